use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DatasetSpec, ExperimentConfig, RawConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{load_cifar, load_image_folder, shapes_dataset, Dataset, ShapesConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, load_extractor, visualize_masks};
use crate::models::{audit_discriminator, audit_generator, build_discriminator, build_generator, Generator, NormChoice};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::spn::gradcheck::{run_suite, TensorCheck};
use crate::tensor::Tensor;
use crate::training::{run_training, RunSpec, RunSummary};

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Shapes { count, size, seed } => shapes_dataset(&ShapesConfig::new(*count, *size, *seed)),
        DatasetSpec::Cifar { path, variant } => load_cifar(path, *variant),
        DatasetSpec::Folder { path, size } => load_image_folder(path, *size),
    }
}

fn io<T>(r: std::io::Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| Error::io(what(), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        io(fs::create_dir_all(dir), || format!("creating {}", dir.display()))?;
    }
    io(fs::write(path, text), || format!("writing {}", path.display()))
}

fn run_spec(cfg: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<RunSpec> {
    if let Some(k) = cfg.generator.num_classes.filter(|_| cfg.generator.norm.is_conditional()) {
        if dataset.labels().is_none() || dataset.num_classes() != k {
            return Err(Error::Config(vec![format!(
                "conditional model expects {k} classes, dataset has {}",
                if dataset.labels().is_some() { dataset.num_classes().to_string() } else { "no labels".into() }
            )]));
        }
    }
    Ok(RunSpec {
        out_dir: cfg.out_dir.clone(),
        train: cfg.train.clone(),
        generator: cfg.generator.clone(),
        discriminator: cfg.discriminator.clone(),
        dataset,
        snapshot: cfg.snapshot.clone(),
        resume: cfg.resume,
    })
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let dataset = Arc::new(load_dataset(&cfg.dataset)?);
    let spec = run_spec(cfg, dataset)?;
    let summary = run_training(&spec)?;
    println!("trained {} iterations into {}", summary.iterations, summary.dir.display());
    Ok(summary)
}

fn checkpoint_path(explicit: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoints").join("latest.ckpt"))
}

fn load_generator(cfg: &ExperimentConfig, path: &Path) -> Result<(Generator, ParamStore<f32>)> {
    let gen = build_generator(&cfg.generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = gen.new_store(&mut rng)?;
    Checkpoint::load(path)?.load_store("g", &mut params)?;
    Ok((gen, params))
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let Some(extractor_path) = &cfg.eval.extractor else {
        return Err(Error::Config(vec!["eval.extractor is required".into()]));
    };
    let ckpt = checkpoint_path(&cfg.eval.checkpoint, cfg);
    let extractor = load_extractor(extractor_path)?;
    let (gen, mut params) = load_generator(cfg, &ckpt)?;
    let real = load_dataset(&cfg.dataset)?;
    let report = evaluate_model(&gen, &mut params, extractor.as_ref(), &real, cfg.eval.n_samples, cfg.seed, cfg.eval.batch)?;
    let out = cfg.out_dir.join("eval.txt");
    write_file(&out, &format!("checkpoint = {}\n{}", ckpt.display(), report.render_kv()))?;
    println!("FID {:.4}  IS {:.4} ± {:.4}", report.fid, report.is_mean, report.is_std);
    Ok(out)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<TensorCheck>> {
    let report = run_suite(&cfg.gradcheck)?;
    for c in &report {
        println!(
            "{} {:<28} {:<26} n={:<5} max_rel_err={:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.case,
            c.tensor,
            c.entries,
            c.max_rel_err
        );
    }
    let failed: Vec<String> = report.iter().filter(|c| !c.passed).map(|c| format!("{}/{}", c.case, c.tensor)).collect();
    if failed.is_empty() {
        println!("all {} checks passed at tolerance {:e}", report.len(), cfg.gradcheck.tolerance);
        Ok(report)
    } else {
        Err(Error::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

/// Audits the configured generator's BN and SPN variants plus the
/// discriminator; returns the report text.
pub fn cmd_audit(cfg: &ExperimentConfig) -> Result<String> {
    let (base, spn) = if cfg.generator.norm.is_conditional() { (NormChoice::Cbn, NormChoice::Cspn) } else { (NormChoice::Bn, NormChoice::Spn) };
    let mut text = String::new();
    let mut audits = Vec::new();
    for norm in [base, spn] {
        let spec = crate::models::GeneratorSpec { norm, ..cfg.generator.clone() };
        let a = audit_generator(&build_generator(&spec)?, cfg.audit_batch);
        text.push_str(&a.render_text());
        text.push('\n');
        audits.push(a);
    }
    let d = audit_discriminator(&build_discriminator(&cfg.discriminator)?, cfg.audit_batch);
    text.push_str(&d.render_text());
    text.push('\n');
    let (a, b) = (&audits[0], &audits[1]);
    let dp = b.params as i64 - a.params as i64;
    text.push_str(&format!(
        "delta {} -> {}: {dp} params, {} FLOPs mac2, {} FLOPs mac1\n",
        base.as_str(),
        spn.as_str(),
        b.flops_mac2 as i64 - a.flops_mac2 as i64,
        b.flops_mac1 as i64 - a.flops_mac1 as i64
    ));
    text.push_str(&a.render_kv(base.as_str()));
    text.push_str(&b.render_kv(spn.as_str()));
    text.push_str(&format!("delta.params = {dp}\n"));
    print!("{text}");
    write_file(&cfg.out_dir.join("audit.txt"), &text)?;
    Ok(text)
}

pub fn cmd_masks(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ckpt = checkpoint_path(&cfg.masks.checkpoint, cfg);
    let (gen, mut params) = load_generator(cfg, &ckpt)?;
    let n = cfg.masks.count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let z = Tensor::from_fn([n, gen.spec.z_dim], |_| rng.sample::<f32, _>(StandardNormal));
    let classes: Option<Vec<usize>> =
        gen.is_conditional().then(|| (0..n).map(|i| i % gen.spec.num_classes.unwrap_or(1)).collect());
    let grid = visualize_masks(&gen, &mut params, &z, classes.as_deref(), cfg.masks.layer, &cfg.masks.channels, Mode::Eval)?;
    let dir = cfg.out_dir.join("masks");
    io(fs::create_dir_all(&dir), || format!("creating {}", dir.display()))?;
    let out = dir.join(format!("{}.png", grid.site));
    grid.save(&out)?;
    println!("wrote {} ({} channels × {} samples)", out.display(), grid.channels.len(), grid.batch);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblateOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub result: std::result::Result<RunSummary, String>,
}

/// Trains every point of the sweep grid into `output.dir/<variant>`, all
/// from the same seed. Every variant is validated before any runs.
pub fn cmd_ablate(raw: &RawConfig) -> Result<Vec<AblateOutcome>> {
    if raw.sweeps.is_empty() {
        return Err(Error::Config(vec!["ablate needs at least one `sweep.<key>` entry".into()]));
    }
    let base = ExperimentConfig::from_raw(&RawConfig { sweeps: Default::default(), ..raw.clone() })?;
    let mut variants = Vec::new();
    let mut errs = Vec::new();
    for (name, mut r) in raw.variants() {
        let dir = base.out_dir.join(&name);
        r.values.insert("output.dir".into(), dir.display().to_string());
        match ExperimentConfig::from_raw(&r) {
            Ok(c) => variants.push((name, c)),
            Err(Error::Config(list)) => errs.extend(list.into_iter().map(|m| format!("{name}: {m}"))),
            Err(e) => errs.push(format!("{name}: {e}")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let dataset = Arc::new(load_dataset(&base.dataset)?);
    let specs: Vec<(String, RunSpec)> =
        variants.iter().map(|(n, c)| Ok((n.clone(), run_spec(c, dataset.clone())?))).collect::<Result<_>>()?;
    let run = |(name, spec): &(String, RunSpec)| {
        log::info!("ablation variant {name}");
        AblateOutcome { name: name.clone(), dir: spec.out_dir.clone(), result: run_training(spec).map_err(|e| e.to_string()) }
    };
    let outcomes: Vec<AblateOutcome> = if base.parallel {
        crate::parallel::map_slice(&specs, run)
    } else {
        specs.iter().map(run).collect()
    };
    let mut summary = String::from("# variant status d_loss g_loss\n");
    for o in &outcomes {
        match &o.result {
            Ok(s) => {
                let (d, g) = s.last.as_ref().map_or((f64::NAN, f64::NAN), |m| (m.d_loss, m.g_loss));
                summary.push_str(&format!("{} ok {d} {g}\n", o.name));
            }
            Err(e) => summary.push_str(&format!("{} failed {}\n", o.name, e.replace('\n', " "))),
        }
    }
    write_file(&base.out_dir.join("ablate_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(outcomes)
}
