//! Analytic parameter and FLOP counts.
//!
//! FLOP conventions: a multiply-accumulate counts 2 under `Mac2` and 1 under
//! `Mac1`; single adds or multiplies (bias adds, mask inversion, the γ/β
//! fg+bg sums, residual adds, pooling) count 1 under both. Normalization is
//! two MACs per element (`x·s + t` with folded statistics, then the affine).
//! Activations, upsampling and reshapes are free.

use std::fmt::Write as _;

use super::discriminator::Discriminator;
use super::generator::Generator;
use crate::nn::Conv2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    Mac2,
    Mac1,
}

impl FlopConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mac2 => "mac2",
            Self::Mac1 => "mac1",
        }
    }
}

/// One line of a model audit, counted for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    /// `(H, W, C)` of the layer's output.
    pub output: [usize; 3],
    pub params: usize,
    pub macs: u64,
    /// Non-MAC operations under each convention.
    pub ops_mac2: u64,
    pub ops_mac1: u64,
}

impl LayerRow {
    pub fn conv(c: &Conv2d, h: usize, w: usize) -> Self {
        let outs = (h * w * c.out_channels) as u64;
        let bias = if c.bias { outs } else { 0 };
        Self {
            name: c.name.clone(),
            kind: format!("conv{k}x{k}", k = c.kernel),
            output: [h, w, c.out_channels],
            params: c.param_count(),
            macs: c.macs(h, w),
            ops_mac2: bias,
            ops_mac1: bias,
        }
    }

    pub fn dense(name: String, inputs: usize, outputs: usize, bias: bool, params: usize) -> Self {
        let b = if bias { outputs as u64 } else { 0 };
        Self { name, kind: "dense".into(), output: [1, 1, outputs], params, macs: (inputs * outputs) as u64, ops_mac2: b, ops_mac1: b }
    }

    pub fn norm(name: &str, c: usize, h: usize, w: usize, params: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: "norm".into(),
            output: [h, w, c],
            params,
            macs: 2 * (h * w * c) as u64,
            ops_mac2: 0,
            ops_mac1: 0,
        }
    }

    pub fn ops(name: String, kind: &str, output: [usize; 3], n: u64) -> Self {
        Self { name, kind: kind.into(), output, params: 0, macs: 0, ops_mac2: n, ops_mac1: n }
    }

    pub fn flops(&self, convention: FlopConvention) -> u64 {
        match convention {
            FlopConvention::Mac2 => 2 * self.macs + self.ops_mac2,
            FlopConvention::Mac1 => self.macs + self.ops_mac1,
        }
    }
}

/// Anything with an audit table.
pub trait Audited {
    fn label(&self) -> String;
    fn rows(&self) -> Vec<LayerRow>;
    fn param_count(&self) -> usize;
}

impl Audited for Generator {
    fn label(&self) -> String {
        format!("generator{} ({})", self.spec.resolution, self.spec.norm.as_str())
    }

    fn rows(&self) -> Vec<LayerRow> {
        Generator::rows(self)
    }

    fn param_count(&self) -> usize {
        Generator::param_count(self)
    }
}

impl Audited for Discriminator {
    fn label(&self) -> String {
        let head = if self.spec.num_classes.is_some() { "projection" } else { "plain" };
        format!("discriminator{} ({head})", self.spec.resolution)
    }

    fn rows(&self) -> Vec<LayerRow> {
        Discriminator::rows(self)
    }

    fn param_count(&self) -> usize {
        Discriminator::param_count(self)
    }
}

pub fn count_parameters(model: &impl Audited) -> usize {
    model.param_count()
}

/// FLOPs of one forward pass over `batch` samples.
pub fn count_flops(model: &impl Audited, batch: usize, convention: FlopConvention) -> u64 {
    batch as u64 * model.rows().iter().map(|r| r.flops(convention)).sum::<u64>()
}

#[derive(Clone, Debug)]
pub struct ModelAudit {
    pub label: String,
    pub rows: Vec<LayerRow>,
    pub params: usize,
    pub batch: usize,
    pub flops_mac2: u64,
    pub flops_mac1: u64,
}

fn audit(model: &impl Audited, batch: usize) -> ModelAudit {
    ModelAudit {
        label: model.label(),
        rows: model.rows(),
        params: count_parameters(model),
        batch,
        flops_mac2: count_flops(model, batch, FlopConvention::Mac2),
        flops_mac1: count_flops(model, batch, FlopConvention::Mac1),
    }
}

pub fn audit_generator(g: &Generator, batch: usize) -> ModelAudit {
    audit(g, batch)
}

pub fn audit_discriminator(d: &Discriminator, batch: usize) -> ModelAudit {
    audit(d, batch)
}

impl ModelAudit {
    pub fn flops(&self, convention: FlopConvention) -> u64 {
        match convention {
            FlopConvention::Mac2 => self.flops_mac2,
            FlopConvention::Mac1 => self.flops_mac1,
        }
    }

    /// Human-readable layer table.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (batch {})", self.label, self.batch);
        let _ = writeln!(s, "{:<34} {:<16} {:>15} {:>10} {:>14} {:>14}", "layer", "kind", "output", "params", "mac2", "mac1");
        for r in &self.rows {
            let out = format!("{}x{}x{}", r.output[0], r.output[1], r.output[2]);
            let _ = writeln!(
                s,
                "{:<34} {:<16} {:>15} {:>10} {:>14} {:>14}",
                r.name,
                r.kind,
                out,
                r.params,
                self.batch as u64 * r.flops(FlopConvention::Mac2),
                self.batch as u64 * r.flops(FlopConvention::Mac1)
            );
        }
        let _ = writeln!(
            s,
            "total: {} params ({:.2}M), {:.3}B FLOPs mac2, {:.3}B FLOPs mac1",
            self.params,
            self.params as f64 / 1e6,
            self.flops_mac2 as f64 / 1e9,
            self.flops_mac1 as f64 / 1e9
        );
        s
    }

    /// `key = value` lines under `prefix`.
    pub fn render_kv(&self, prefix: &str) -> String {
        format!(
            "{prefix}.label = {}\n{prefix}.params = {}\n{prefix}.batch = {}\n{prefix}.flops_mac2 = {}\n{prefix}.flops_mac1 = {}\n",
            self.label, self.params, self.batch, self.flops_mac2, self.flops_mac1
        )
    }
}
