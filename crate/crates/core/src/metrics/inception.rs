use nalgebra::DMatrix;

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// Mean and population standard deviation over `splits` contiguous chunks of
/// `exp(mean_i KL(p(y|x_i) ‖ p̄))`.
pub fn inception_score(probs: &DMatrix<f64>, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = probs.shape();
    if splits == 0 || splits > n || k == 0 {
        return Err(Error::Invalid(format!("{splits} splits over {n} rows of {k} classes")));
    }
    for (i, row) in probs.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !p.is_finite() || p < -SIMPLEX_TOL) || (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invalid(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            let part = probs.rows(lo, hi - lo);
            let marginal = part.row_mean();
            let kl: f64 = part
                .row_iter()
                .map(|row| {
                    row.iter()
                        .zip(marginal.iter())
                        .filter(|(&p, _)| p > 0.0)
                        .map(|(&p, &q)| p * (p.ln() - q.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (hi - lo) as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}
