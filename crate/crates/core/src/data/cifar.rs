use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};

const PIXELS: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn from_classes(n: usize) -> Result<Self> {
        match n {
            10 => Ok(Self::Cifar10),
            100 => Ok(Self::Cifar100),
            _ => Err(Error::Invalid(format!("CIFAR variant must be 10 or 100, got {n}"))),
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    fn train_files(self) -> Vec<String> {
        match self {
            Self::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Self::Cifar100 => vec!["train.bin".into()],
        }
    }
}

/// Reads CIFAR binary records from one file, or the training archives when
/// `path` is a directory. Pixels are stored channel-planar per record.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let files: Vec<PathBuf> = variant.train_files().iter().map(|f| path.join(f)).collect();
        if let Some(missing) = files.iter().find(|f| !f.is_file()) {
            return Err(Error::Dataset(format!("missing CIFAR archive {}", missing.display())));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let rec = variant.record_len();
    let mut raw = Vec::with_capacity(files.len());
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(format!("reading {}", f.display()), e))?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::CorruptArchive { path: f.clone(), record: rec, actual: bytes.len() as u64 });
        }
        raw.push(bytes);
    }
    let n: usize = raw.iter().map(|b| b.len() / rec).sum();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let lb = variant.label_bytes();
    for (bytes, f) in raw.iter().zip(&files) {
        for r in bytes.chunks(rec) {
            let label = r[lb - 1] as usize;
            if label >= variant.num_classes() {
                return Err(Error::Dataset(format!("{}: label {label} out of range", f.display())));
            }
            labels.push(label);
            let planes = &r[lb..];
            for p in 0..1024 {
                pixels.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
            }
        }
    }
    Dataset::new(pixels, 32, 32, Some(labels), variant.num_classes())
}

/// Encodes a dataset of 32×32 images as CIFAR records.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.height() != 32 || ds.width() != 32 {
        return Err(Error::Dataset("CIFAR records hold 32x32 images".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        let label = ds.labels().map_or(0, |l| l[i]) as u8;
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(label);
        let img = ds.image(i);
        for c in 0..3 {
            out.extend(img.chunks(3).map(|px| px[c]));
        }
    }
    Ok(out)
}
