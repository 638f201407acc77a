use super::TrainConfig;

/// Learning rates at `iter`: constant until `total_iters − decay_last_iters`,
/// then linear to zero at `total_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> (f64, f64) {
    let f = decay_factor(iter, cfg.total_iters, cfg.decay_last_iters);
    (cfg.lr_g * f, cfg.lr_d * f)
}

/// Multiplier in `[0, 1]` applied to the base rates.
pub fn decay_factor(iter: usize, total_iters: usize, decay_last_iters: usize) -> f64 {
    if iter >= total_iters {
        return 0.0;
    }
    let window = decay_last_iters.min(total_iters);
    let start = total_iters - window;
    if iter <= start || window == 0 {
        return 1.0;
    }
    (total_iters - iter) as f64 / window as f64
}
