//! Image grids written as PNG.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::data::from_model_range;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Tiles `(N, H, W, C)` images into a grid with `cols` columns and a
/// one-pixel gap. `C` is 1 or 3; values are bytes.
pub fn tile(bytes: &[u8], n: usize, h: usize, w: usize, c: usize, cols: usize) -> Result<(Vec<u8>, usize, usize)> {
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("grids need 1 or 3 channels, got {c}")));
    }
    if bytes.len() != n * h * w * c || n == 0 || cols == 0 {
        return Err(Error::Shape(format!("{} bytes for {n} images of {h}×{w}×{c}", bytes.len())));
    }
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut out = vec![0u8; gw * gh * c];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            let src = &bytes[((i * h + y) * w) * c..((i * h + y + 1) * w) * c];
            let dst = ((oy + y) * gw + ox) * c;
            out[dst..dst + w * c].copy_from_slice(src);
        }
    }
    Ok((out, gw, gh))
}

fn write(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Saves model-range RGB images `(N, H, W, 3)` as one grid.
pub fn save_rgb_grid<T: Real>(path: &Path, images: &Tensor<T>, cols: usize) -> Result<()> {
    let (n, h, w, c) = images.dims4()?;
    let (buf, gw, gh) = tile(&from_model_range(images), n, h, w, c, cols)?;
    let img = RgbImage::from_raw(gw as u32, gh as u32, buf).expect("sized buffer");
    write(path, img.save(path))
}

/// Saves `[0, 1]` maps `(N, H, W)` as one grayscale grid.
pub fn save_gray_grid(path: &Path, maps: &[f64], n: usize, h: usize, w: usize, cols: usize) -> Result<()> {
    let bytes: Vec<u8> = maps.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let (buf, gw, gh) = tile(&bytes, n, h, w, 1, cols)?;
    let img = GrayImage::from_raw(gw as u32, gh as u32, buf).expect("sized buffer");
    write(path, img.save(path))
}
