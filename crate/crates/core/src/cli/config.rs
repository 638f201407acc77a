//! Flat `key = value` configuration files.
//!
//! `#` starts a comment. `include = other.cfg` splices another file (relative
//! to the including file) at that point; later assignments override earlier
//! ones. `sweep.<key> = a, b, c` lists alternatives for `ablate`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::CifarVariant;
use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, GeneratorSpec, NormChoice};
use crate::spn::gradcheck::GradcheckOptions;
use crate::spn::{AffineConv, KernelMode, MaskChannels};
use crate::training::{LossKind, TrainConfig};

pub const DATA_ROOT_ENV: &str = "SPN_DATA_ROOT";
const MAX_INCLUDE_DEPTH: usize = 16;

/// Assignments in file order after includes are expanded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
    pub sweeps: BTreeMap<String, Vec<String>>,
    /// Directory of the top-level file; relative paths resolve against it.
    pub base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let mut raw = RawConfig { base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(), ..Default::default() };
        let mut errs = Vec::new();
        raw.read_into(path, 0, &mut errs);
        if errs.is_empty() {
            Ok(raw)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn parse_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut raw = RawConfig { base_dir: base_dir.to_path_buf(), ..Default::default() };
        let mut errs = Vec::new();
        raw.apply_text(text, "<string>", base_dir, 0, &mut errs);
        if errs.is_empty() {
            Ok(raw)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn read_into(&mut self, path: &Path, depth: usize, errs: &mut Vec<String>) {
        if depth > MAX_INCLUDE_DEPTH {
            errs.push(format!("{}: includes nested deeper than {MAX_INCLUDE_DEPTH}", path.display()));
            return;
        }
        match std::fs::read_to_string(path) {
            Ok(text) => {
                let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                self.apply_text(&text, &path.display().to_string(), &dir, depth, errs);
            }
            Err(e) => errs.push(format!("{}: {e}", path.display())),
        }
    }

    fn apply_text(&mut self, text: &str, origin: &str, dir: &Path, depth: usize, errs: &mut Vec<String>) {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                errs.push(format!("{origin}:{}: empty key", n + 1));
            } else if k == "include" {
                self.read_into(&dir.join(v), depth + 1, errs);
            } else if let Some(key) = k.strip_prefix("sweep.") {
                let opts: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if opts.is_empty() {
                    errs.push(format!("{origin}:{}: sweep over `{key}` lists no values", n + 1));
                }
                self.sweeps.insert(key.to_string(), opts);
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut errs = Vec::new();
        for o in overrides {
            let base = self.base_dir.clone();
            self.apply_text(o, "--set", &base, 0, &mut errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// One config per point of the sweep grid, named by its assignments.
    pub fn variants(&self) -> Vec<(String, RawConfig)> {
        let mut out = vec![(String::new(), RawConfig { sweeps: BTreeMap::new(), ..self.clone() })];
        for (key, opts) in &self.sweeps {
            let short = key.rsplit('.').next().unwrap_or(key);
            out = out
                .into_iter()
                .flat_map(|(name, raw)| {
                    opts.iter().map(move |v| {
                        let mut r = raw.clone();
                        r.values.insert(key.clone(), v.clone());
                        let part = format!("{short}-{v}");
                        (if name.is_empty() { part } else { format!("{name}_{part}") }, r)
                    })
                })
                .collect();
        }
        out
    }
}

/// Typed reads that collect every problem instead of stopping at the first.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    errs: Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self { raw, used: BTreeSet::new(), resolved: BTreeMap::new(), errs: Vec::new() }
    }

    fn parse_with<T: Display>(&mut self, key: &str, default: T, f: impl Fn(&str) -> Result<T>) -> T {
        self.used.insert(key.to_string());
        let v = match self.raw.values.get(key) {
            Some(s) => match f(s) {
                Ok(v) => v,
                Err(e) => {
                    let msg = match e {
                        Error::Invalid(m) => m,
                        other => other.to_string(),
                    };
                    self.errs.push(format!("{key}: {msg}"));
                    default
                }
            },
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        v
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> T {
        self.parse_with(key, default, |s| s.parse::<T>().map_err(|_| Error::Invalid(format!("cannot parse `{s}`"))))
    }

    fn flag(&mut self, key: &str, default: bool) -> bool {
        let v = self.parse_with(key, Flag(default), |s| match s.to_ascii_lowercase().as_str() {
            "on" | "true" | "yes" | "1" => Ok(Flag(true)),
            "off" | "false" | "no" | "0" => Ok(Flag(false)),
            _ => Err(Error::Invalid(format!("expected on/off, got `{s}`"))),
        });
        v.0
    }

    fn opt<T: FromStr + Display>(&mut self, key: &str) -> Option<T> {
        self.used.insert(key.to_string());
        let s = self.raw.values.get(key)?;
        match s.parse::<T>() {
            Ok(v) => {
                self.resolved.insert(key.to_string(), v.to_string());
                Some(v)
            }
            Err(_) => {
                self.errs.push(format!("{key}: cannot parse `{s}`"));
                None
            }
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        let p: String = self.opt(key)?;
        Some(self.raw.base_dir.join(p))
    }

    fn unknown_keys(&mut self) {
        for k in self.raw.values.keys() {
            if !self.used.contains(k) {
                self.errs.push(format!("unknown key `{k}`"));
            }
        }
        for k in self.raw.sweeps.keys() {
            if !self.used.contains(k) {
                self.errs.push(format!("sweep over unknown key `{k}`"));
            }
        }
    }
}

struct Flag(bool);

impl Display for Flag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if self.0 { "on" } else { "off" })
    }
}

struct Shown<T>(T, &'static str);

impl<T> Display for Shown<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Shapes { count: usize, size: usize, seed: u64 },
    Cifar { path: PathBuf, variant: CifarVariant },
    Folder { path: PathBuf, size: usize },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Self::Shapes { .. } => Some(crate::data::shapes::SHAPE_CLASSES),
            Self::Cifar { variant, .. } => Some(variant.num_classes()),
            Self::Folder { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub extractor: Option<PathBuf>,
    pub n_samples: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSection {
    pub checkpoint: Option<PathBuf>,
    pub layer: Option<usize>,
    pub channels: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub masks: MaskSection,
    pub gradcheck: GradcheckOptions,
    pub audit_batch: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub resume: bool,
    /// Run sweep variants concurrently.
    pub parallel: bool,
    /// Every key with the value in effect, as `key = value` lines.
    pub snapshot: String,
}

fn resolve_data_path(p: &str, base: &Path) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => base.join(path),
    }
}

fn parse_mask_channels(s: &str) -> Result<MaskChannels> {
    match s {
        "per-channel" => Ok(MaskChannels::PerChannel),
        "single" => Ok(MaskChannels::Single),
        _ => Err(Error::Invalid(format!("expected per-channel or single, got `{s}`"))),
    }
}

fn parse_affine_conv(s: &str) -> Result<AffineConv> {
    match s {
        "depthwise" => Ok(AffineConv::Depthwise),
        "standard" => Ok(AffineConv::Standard),
        _ => Err(Error::Invalid(format!("expected depthwise or standard, got `{s}`"))),
    }
}

fn parse_kernel_mode(s: &str) -> Result<KernelMode> {
    match s {
        "modulated" => Ok(KernelMode::Modulated),
        "per-class" => Ok(KernelMode::PerClass),
        _ => Err(Error::Invalid(format!("expected modulated or per-class, got `{s}`"))),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Invalid(format!("`{t}` is not a non-negative integer"))))
        .collect()
}

struct List(Vec<usize>);

impl Display for List {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::parse_file(path)?;
        raw.apply_overrides(overrides)?;
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader::new(raw);
        let seed: u64 = r.get("seed", 0);
        let out_dir: String = r.get("output.dir", "runs/default".to_string());
        let out_dir = raw.base_dir.join(out_dir);
        let resume = r.flag("output.resume", false);
        let parallel = r.flag("ablate.parallel", false);

        let kind: String = r.get("dataset.kind", "shapes".to_string());
        let dataset = match kind.as_str() {
            "shapes" => DatasetSpec::Shapes {
                count: r.get("dataset.count", 5000),
                size: r.get("dataset.size", 32),
                seed: r.get("dataset.seed", seed),
            },
            "cifar10" | "cifar100" => {
                let p: Option<String> = r.opt("dataset.path");
                if p.is_none() {
                    r.errs.push(format!("dataset.path is required for {kind}"));
                }
                let variant = if kind == "cifar10" { CifarVariant::Cifar10 } else { CifarVariant::Cifar100 };
                DatasetSpec::Cifar { path: resolve_data_path(&p.unwrap_or_default(), &raw.base_dir), variant }
            }
            "folder" => {
                let p: Option<String> = r.opt("dataset.path");
                if p.is_none() {
                    r.errs.push("dataset.path is required for folder".into());
                }
                DatasetSpec::Folder { path: resolve_data_path(&p.unwrap_or_default(), &raw.base_dir), size: r.get("dataset.size", 128) }
            }
            other => {
                r.errs.push(format!("dataset.kind: unknown `{other}` (shapes, cifar10, cifar100, folder)"));
                DatasetSpec::Shapes { count: 1, size: 32, seed }
            }
        };

        let res: usize = r.get("model.resolution", 32);
        let norm = r.parse_with("model.norm", Shown(NormChoice::Spn, "spn"), |s| {
            NormChoice::parse(s).map(|n| Shown(n, n.as_str()))
        });
        let norm = norm.0;
        let mut generator = match GeneratorSpec::for_resolution(res, norm) {
            Ok(g) => g,
            Err(e) => {
                r.errs.push(format!("model.resolution: {e}"));
                GeneratorSpec::gen32(norm)
            }
        };
        let mut discriminator = DiscriminatorSpec::for_resolution(res).unwrap_or_else(|_| DiscriminatorSpec::disc32());
        generator.z_dim = r.get("model.z_dim", generator.z_dim);
        generator.use_sn = r.flag("model.g_sn", generator.use_sn);
        if let Some(w) = r.opt::<usize>("model.g_width") {
            generator = generator.scaled(w.max(1));
        }
        if let Some(w) = r.opt::<usize>("model.d_width") {
            discriminator = discriminator.scaled(w.max(1));
        }
        let explicit_k: Option<usize> = r.opt("model.num_classes");
        if norm.is_conditional() {
            let k = explicit_k.or(dataset.num_classes());
            if k.is_none() {
                r.errs.push("model.num_classes is required for conditional norms on folder datasets".into());
            }
            generator.num_classes = k;
            discriminator.num_classes = k;
        }

        let spn = &mut generator.spn;
        spn.kernel_size = r.get("spn.kernel_size", spn.kernel_size);
        spn.mask_channels = r
            .parse_with("spn.mask_channels", Shown(spn.mask_channels, "per-channel"), |s| {
                parse_mask_channels(s).map(|m| Shown(m, if m == MaskChannels::Single { "single" } else { "per-channel" }))
            })
            .0;
        spn.affine_conv = r
            .parse_with("spn.affine_conv", Shown(spn.affine_conv, "depthwise"), |s| {
                parse_affine_conv(s).map(|a| Shown(a, if a == AffineConv::Standard { "standard" } else { "depthwise" }))
            })
            .0;
        spn.latent_bias = r.flag("spn.latent_bias", spn.latent_bias);
        spn.kernel_mode = r
            .parse_with("spn.kernel_mode", Shown(spn.kernel_mode, "modulated"), |s| {
                parse_kernel_mode(s).map(|k| Shown(k, if k == KernelMode::PerClass { "per-class" } else { "modulated" }))
            })
            .0;
        spn.embed_dim = r.get("spn.embed_dim", spn.embed_dim);
        if ![1, 3, 5].contains(&generator.spn.kernel_size) {
            r.errs.push(format!("spn.kernel_size: must be 1, 3 or 5, got {}", generator.spn.kernel_size));
        }
        generator.spatial_attention = r.flag("spn.spatial_attention", false);

        let preset: String = r.get("train.preset", if res == 32 { "cifar".to_string() } else { "ttur".to_string() });
        let mut train = match preset.as_str() {
            "cifar" => TrainConfig::cifar(),
            "ttur" => TrainConfig::ttur(),
            other => {
                r.errs.push(format!("train.preset: unknown `{other}` (cifar, ttur)"));
                TrainConfig::cifar()
            }
        };
        train.loss = r
            .parse_with("train.loss", Shown(LossKind::Hinge, "hinge"), |s| LossKind::parse(s).map(|l| Shown(l, l.as_str())))
            .0;
        train.lr_g = r.get("train.lr_g", train.lr_g);
        train.lr_d = r.get("train.lr_d", train.lr_d);
        train.adam_beta1 = r.get("train.adam_beta1", train.adam_beta1);
        train.adam_beta2 = r.get("train.adam_beta2", train.adam_beta2);
        train.adam_eps = r.get("train.adam_eps", train.adam_eps);
        train.n_dis = r.get("train.n_dis", train.n_dis);
        train.batch_d = r.get("train.batch_d", train.batch_d);
        train.batch_g = r.get("train.batch_g", train.batch_g);
        train.total_iters = r.get("train.total_iters", train.total_iters);
        train.decay_last_iters = r.get("train.decay_last_iters", train.decay_last_iters.min(train.total_iters));
        train.hflip = r.flag("train.hflip", train.hflip);
        train.checkpoint_every = r.get("train.checkpoint_every", train.checkpoint_every);
        train.sample_every = r.get("train.sample_every", train.sample_every);
        train.seed = seed;

        let eval = EvalSection {
            checkpoint: r.path("eval.checkpoint"),
            extractor: r.path("eval.extractor"),
            n_samples: r.get("eval.n_samples", 50_000),
            batch: r.get("eval.batch", 64),
        };
        let channels = r.parse_with("masks.channels", List(Vec::new()), |s| parse_list(s).map(List)).0;
        let masks = MaskSection {
            checkpoint: r.path("masks.checkpoint"),
            layer: r.opt("masks.layer"),
            channels,
            count: r.get("masks.count", 4),
        };
        let gc = GradcheckOptions::default();
        let gradcheck = GradcheckOptions {
            batch: r.get("gradcheck.batch", gc.batch),
            height: r.get("gradcheck.height", gc.height),
            width: r.get("gradcheck.width", gc.width),
            channels: r.get("gradcheck.channels", gc.channels),
            seed,
            step: r.get("gradcheck.step", gc.step),
            tolerance: r.get("gradcheck.tolerance", gc.tolerance),
            floor: r.get("gradcheck.floor", gc.floor),
        };
        let audit_batch = r.get("audit.batch", 1);
        r.unknown_keys();

        for (what, res) in [
            ("model", generator.validate()),
            ("model", discriminator.validate()),
            ("train", train.validate()),
            ("gradcheck", gradcheck.validate()),
        ] {
            if let Err(e) = res {
                match e {
                    Error::Config(list) => r.errs.extend(list.into_iter().map(|m| format!("{what}: {m}"))),
                    other => r.errs.push(format!("{what}: {other}")),
                }
            }
        }
        if let DatasetSpec::Shapes { size, .. } | DatasetSpec::Folder { size, .. } = &dataset {
            if *size != res {
                r.errs.push(format!("dataset.size {size} differs from model.resolution {res}"));
            }
        }
        if matches!(dataset, DatasetSpec::Cifar { .. }) && res != 32 {
            r.errs.push(format!("CIFAR images are 32×32 but model.resolution is {res}"));
        }
        if masks.count == 0 || eval.batch == 0 || audit_batch == 0 {
            r.errs.push("masks.count, eval.batch and audit.batch must be positive".into());
        }
        if !r.errs.is_empty() {
            return Err(Error::Config(r.errs));
        }
        let snapshot: String = r.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Ok(Self {
            dataset,
            generator,
            discriminator,
            train,
            eval,
            masks,
            gradcheck,
            audit_batch,
            out_dir,
            seed,
            resume,
            parallel,
            snapshot,
        })
    }
}
