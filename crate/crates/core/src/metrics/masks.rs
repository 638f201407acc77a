use std::path::Path;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::imaging::save_gray_grid;
use crate::models::Generator;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Mask values of one SPN site, `(B, H, W, n)` for the selected channels.
#[derive(Clone, Debug)]
pub struct MaskGrid {
    pub site: String,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub mask: Vec<f64>,
    pub mask_inv: Vec<f64>,
}

impl MaskGrid {
    /// Tiles in grid order: per sample, a row of `m` then a row of `m*`.
    pub fn tiles(&self) -> Vec<f64> {
        let (h, w, n) = (self.height, self.width, self.channels.len());
        let mut out = Vec::with_capacity(2 * self.mask.len());
        for b in 0..self.batch {
            for src in [&self.mask, &self.mask_inv] {
                for j in 0..n {
                    for p in 0..h * w {
                        out.push(src[(b * h * w + p) * n + j]);
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.channels.len();
        save_gray_grid(path, &self.tiles(), 2 * self.batch * n, self.height, self.width, n)
    }
}

fn pick(t: &Tensor<f32>, channels: &[usize]) -> Result<Vec<f64>> {
    let (b, h, w, c) = t.dims4()?;
    let mut out = Vec::with_capacity(b * h * w * channels.len());
    for px in t.data().chunks(c) {
        out.extend(channels.iter().map(|&j| f64::from(px[j])));
    }
    Ok(out)
}

/// Runs the generator on `z` and extracts `m` and `m*` at SPN site `layer`
/// (forward order; `None` is the last site).
pub fn visualize_masks(
    gen: &Generator,
    params: &mut ParamStore<f32>,
    z: &Tensor<f32>,
    classes: Option<&[usize]>,
    layer: Option<usize>,
    channels: &[usize],
    mode: Mode,
) -> Result<MaskGrid> {
    let sites = gen.spn_sites();
    if sites.is_empty() {
        return Err(Error::Invalid("generator has no SPN layers".into()));
    }
    let idx = layer.unwrap_or(sites.len() - 1);
    if idx >= sites.len() {
        return Err(Error::Invalid(format!("SPN layer {idx} out of range ({} sites)", sites.len())));
    }
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let mut ctx = Ctx::frozen(params, mode);
    let out = gen.forward(&mut g, &mut ctx, zv, classes)?;
    let (site, trace) = &out.traces[idx];
    let m = g.value(trace.mask);
    let (b, h, w, c) = m.dims4()?;
    let channels: Vec<usize> = if channels.is_empty() { (0..c).collect() } else { channels.to_vec() };
    if let Some(&bad) = channels.iter().find(|&&j| j >= c) {
        return Err(Error::Invalid(format!("mask channel {bad} out of range ({c} channels at {site})")));
    }
    Ok(MaskGrid {
        site: site.clone(),
        batch: b,
        height: h,
        width: w,
        mask: pick(m, &channels)?,
        mask_inv: pick(g.value(trace.mask_inv), &channels)?,
        channels,
    })
}

/// Spatial variance of each `(sample, channel)` map of a `(B, H, W, C)`
/// mask, averaged over samples and channels.
pub fn mask_spatial_variance(mask: &Tensor<f32>) -> Result<f64> {
    let (b, h, w, c) = mask.dims4()?;
    let hw = (h * w) as f64;
    let d = mask.data();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..c {
            let at = |p: usize| f64::from(d[(i * h * w + p) * c + j]);
            let mean = (0..h * w).map(at).sum::<f64>() / hw;
            total += (0..h * w).map(|p| (at(p) - mean).powi(2)).sum::<f64>() / hw;
        }
    }
    Ok(total / (b * c) as f64)
}
