use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};

/// Bilinear resampling of an interleaved RGB image with half-pixel centres:
/// output pixel `i` samples source coordinate `(i + 0.5)·in/out − 0.5`,
/// clamped to the image, and rounds to the nearest level.
pub fn resize_bilinear(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(h, oh);
    let xs = coords(w, ow);
    let mut out = Vec::with_capacity(oh * ow * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |y: usize, x: usize| f64::from(src[(y * w + x) * 3 + c]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// One class per subdirectory (sorted by name); a folder without
/// subdirectories is a single class. Every image is resized to `size × size`.
pub fn load_image_folder(path: &Path, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Invalid("image size must be positive".into()));
    }
    let entries = sorted_entries(path)?;
    let dirs: Vec<PathBuf> = entries.iter().filter(|p| p.is_dir()).cloned().collect();
    let groups: Vec<(usize, Vec<PathBuf>)> = if dirs.is_empty() {
        vec![(0, entries.into_iter().filter(|p| p.is_file()).collect())]
    } else {
        let mut g = Vec::new();
        for (class, d) in dirs.iter().enumerate() {
            g.push((class, sorted_entries(d)?.into_iter().filter(|p| p.is_file()).collect()));
        }
        g
    };
    let num_classes = groups.len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, files) in groups {
        for f in files {
            let img = match image::open(&f) {
                Ok(i) => i.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    continue;
                }
            };
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = img.into_raw();
            if h == size && w == size {
                pixels.extend_from_slice(&raw);
            } else {
                pixels.extend(resize_bilinear(&raw, h, w, size, size));
            }
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", path.display())));
    }
    Dataset::new(pixels, size, size, Some(labels), num_classes)
}
