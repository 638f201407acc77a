use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below `−PSD_TOLERANCE` are rejected; those above are clamped
/// to zero before taking square roots.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance of the rows of `features` (N × F).
pub fn summarize_features(features: &DMatrix<f64>) -> Result<GaussianSummary> {
    let (n, f) = features.shape();
    if n < 2 || f == 0 {
        return Err(Error::Invalid(format!("need at least 2 rows and 1 column, got {n} × {f}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary { mean, cov, count: n })
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE || !v.is_finite() {
            log::error!("{what} has eigenvalue {v:e}");
            return Err(Error::NotPsd { eigenvalue: *v, tolerance: PSD_TOLERANCE });
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the root
/// taken from the symmetric form `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let f = a.mean.len();
    if b.mean.len() != f || a.cov.shape() != (f, f) || b.cov.shape() != (f, f) {
        return Err(Error::Shape(format!("summaries of dimension {f} and {}", b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(&a.cov, "first covariance")?;
    clamped_eigen(&b.cov, "second covariance")?;
    let inner = &ra * &b.cov * &ra;
    let tr_root: f64 = clamped_eigen(&inner, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_root).max(0.0))
}
