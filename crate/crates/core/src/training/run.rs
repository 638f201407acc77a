//! Artifact directory layout:
//!
//! ```text
//! <out>/config.txt             resolved configuration
//! <out>/version.txt            crate version and git revision
//! <out>/metrics.log            one line per iteration
//! <out>/checkpoints/iter_NNNNNNN.ckpt, latest.ckpt
//! <out>/samples/iter_NNNNNNN.png
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trainer::{StepMetrics, Trainer};
use super::TrainConfig;
use crate::checkpoint::Checkpoint;
use crate::data::{BatchIterator, Dataset, IteratorState};
use crate::error::{Error, Result};
use crate::imaging::save_rgb_grid;
use crate::models::{build_discriminator, build_generator, DiscriminatorSpec, GeneratorSpec};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "# iter d_loss g_loss lr_g lr_d wall_time";
const SAMPLE_COUNT: usize = 64;

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub dataset: Arc<Dataset>,
    /// Resolved configuration written to `config.txt`.
    pub snapshot: String,
    /// Continue from `checkpoints/latest.ckpt` when present.
    pub resume: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub iterations: usize,
    pub resumed_from: Option<usize>,
    pub last: Option<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

fn io<T>(r: std::io::Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| Error::io(what(), e))
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn version_stamp() -> String {
    format!("spn {}\ngit {}\n", env!("CARGO_PKG_VERSION"), git_revision())
}

pub fn metrics_line(m: &StepMetrics, wall_time: f64) -> String {
    format!("{} {} {} {} {} {:.3}", m.iteration + 1, m.d_loss, m.g_loss, m.lr_g, m.lr_d, wall_time)
}

/// Keeps the header and the lines of iterations `≤ upto`.
fn truncate_log(path: &Path, upto: usize) -> Result<()> {
    let text = io(fs::read_to_string(path), || format!("reading {}", path.display()))?;
    let mut kept = String::new();
    for line in text.lines() {
        let iter = line.split_whitespace().next().and_then(|t| t.parse::<usize>().ok());
        if line.starts_with('#') || iter.is_some_and(|i| i <= upto) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    io(fs::write(path, kept), || format!("rewriting {}", path.display()))
}

fn sample_inputs(trainer: &Trainer) -> (Tensor<f32>, Option<Vec<usize>>) {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.cfg.seed);
    rng.set_stream(2);
    let z = Tensor::from_fn([SAMPLE_COUNT, trainer.gen.spec.z_dim], |_| rng.sample::<f32, _>(StandardNormal));
    let classes = trainer
        .gen
        .is_conditional()
        .then(|| (0..SAMPLE_COUNT).map(|i| i % trainer.gen.spec.num_classes.unwrap_or(1)).collect());
    (z, classes)
}

fn save_checkpoint(trainer: &Trainer, data: &BatchIterator, spec: &RunSpec, wall: f64, dir: &Path) -> Result<PathBuf> {
    let mut ckpt = Checkpoint::new();
    trainer.state.save_into(&mut ckpt);
    let st = data.state();
    ckpt.set_meta("data.epoch", st.epoch);
    ckpt.set_meta("data.pos", st.pos);
    ckpt.set_meta("wall_time", wall);
    ckpt.set_meta("config", &spec.snapshot);
    let path = dir.join(format!("iter_{:07}.ckpt", trainer.state.iteration));
    ckpt.save(&path)?;
    ckpt.save(&dir.join("latest.ckpt"))?;
    Ok(path)
}

/// Trains for `spec.train.total_iters`, checkpointing and sampling on the
/// configured cadence.
pub fn run_training(spec: &RunSpec) -> Result<RunSummary> {
    let cfg = &spec.train;
    let gen = build_generator(&spec.generator)?;
    let disc = build_discriminator(&spec.discriminator)?;
    let res = spec.generator.resolution;
    if spec.dataset.height() != res || spec.dataset.width() != res {
        return Err(Error::Config(vec![format!(
            "dataset images are {}×{} but the models expect {res}×{res}",
            spec.dataset.height(),
            spec.dataset.width()
        )]));
    }
    let mut trainer = Trainer::new(cfg.clone(), gen, disc)?;
    let mut data = BatchIterator::new(spec.dataset.clone(), cfg.batch_d, cfg.seed, true)?;

    let dir = &spec.out_dir;
    let (ckpt_dir, sample_dir) = (dir.join("checkpoints"), dir.join("samples"));
    for d in [dir, &ckpt_dir, &sample_dir] {
        io(fs::create_dir_all(d), || format!("creating {}", d.display()))?;
    }
    let log_path = dir.join("metrics.log");
    let latest = ckpt_dir.join("latest.ckpt");
    let mut wall_offset = 0.0;
    let mut resumed_from = None;
    if spec.resume && latest.exists() {
        let ckpt = Checkpoint::load(&latest)?;
        trainer.state.load_from(&ckpt)?;
        data.restore(IteratorState { epoch: ckpt.meta_parse("data.epoch")?, pos: ckpt.meta_parse("data.pos")? })?;
        wall_offset = ckpt.meta_parse("wall_time")?;
        resumed_from = Some(trainer.state.iteration);
        truncate_log(&log_path, trainer.state.iteration)?;
        log::info!("resuming {} at iteration {}", dir.display(), trainer.state.iteration);
    } else {
        io(fs::write(&log_path, format!("{METRICS_HEADER}\n")), || format!("writing {}", log_path.display()))?;
    }
    io(fs::write(dir.join("config.txt"), &spec.snapshot), || "writing config.txt".into())?;
    io(fs::write(dir.join("version.txt"), version_stamp()), || "writing version.txt".into())?;

    let mut log = io(OpenOptions::new().append(true).open(&log_path), || format!("opening {}", log_path.display()))?;
    let (sample_z, sample_classes) = sample_inputs(&trainer);
    let start = Instant::now();
    let mut last = None;
    let mut final_checkpoint = latest.clone();
    while trainer.state.iteration < cfg.total_iters {
        let m = trainer.step(&mut data)?;
        let wall = wall_offset + start.elapsed().as_secs_f64();
        io(writeln!(log, "{}", metrics_line(&m, wall)), || format!("appending to {}", log_path.display()))?;
        let done = trainer.state.iteration;
        if done % cfg.sample_every == 0 || done == cfg.total_iters {
            let images = trainer.sample(&sample_z, sample_classes.as_deref())?;
            save_rgb_grid(&sample_dir.join(format!("iter_{done:07}.png")), &images, 8)?;
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.total_iters {
            final_checkpoint = save_checkpoint(&trainer, &data, spec, wall, &ckpt_dir)?;
        }
        if done % 100 == 0 {
            log::info!("iter {done}: d_loss {:.4} g_loss {:.4}", m.d_loss, m.g_loss);
        }
        last = Some(m);
    }
    Ok(RunSummary { dir: dir.clone(), iterations: trainer.state.iteration, resumed_from, last, final_checkpoint })
}
