//! Dataset ingestion: IDX (MNIST, FashionMNIST) and CIFAR-10 binary files.
//!
//! Images are normalized per channel and zero-padded (in raw pixel space)
//! to the model geometry. The train split sits behind an access counter.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::distill::LabeledImages;
use crate::error::{DfkdError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetId {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion-mnist" | "fashion_mnist" => Ok(DatasetId::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            _ => Err(DfkdError::UnknownVariant {
                kind: "dataset",
                name: name.to_string(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            DatasetId::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetId::FashionMnist => Normalization {
                mean: vec![0.2860],
                std: vec![0.3530],
            },
            DatasetId::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
        }
    }

    pub fn native_channels(self) -> usize {
        match self {
            DatasetId::Cifar10 => 3,
            _ => 1,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

/// Per-channel affine normalization of `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Normalized value back to `[0, 1]` for channel `c` (cycled).
    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        let i = c % self.mean.len();
        v * self.std[i] + self.mean[i]
    }
}

/// Raw images as `u8` with labels.
struct RawSplit {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

fn read_u32_be(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DfkdError::DatasetMissing(format!("{}: {e}", path.display())))
}

fn read_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<RawSplit> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let bad = |p: &Path, why: &str| DfkdError::DatasetMissing(format!("{}: {why}", p.display()));
    if ib.len() < 16 || read_u32_be(&ib, 0) != 0x0803 {
        return Err(bad(images, "not an IDX image file"));
    }
    if lb.len() < 8 || read_u32_be(&lb, 0) != 0x0801 {
        return Err(bad(labels, "not an IDX label file"));
    }
    let n = read_u32_be(&ib, 4) as usize;
    let h = read_u32_be(&ib, 8) as usize;
    let w = read_u32_be(&ib, 12) as usize;
    if read_u32_be(&lb, 4) as usize != n || ib.len() < 16 + n * h * w || lb.len() < 8 + n {
        return Err(bad(images, "truncated or inconsistent with labels"));
    }
    let n = limit.map_or(n, |l| l.min(n));
    Ok(RawSplit {
        channels: 1,
        height: h,
        width: w,
        pixels: ib[16..16 + n * h * w].to_vec(),
        labels: lb[8..8 + n].iter().map(|&v| v as usize).collect(),
    })
}

fn read_cifar(files: &[PathBuf], limit: Option<usize>) -> Result<RawSplit> {
    const REC: usize = 1 + 3 * 32 * 32;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    'outer: for f in files {
        let b = read_file(f)?;
        if b.len() % REC != 0 {
            return Err(DfkdError::DatasetMissing(format!(
                "{}: not a CIFAR-10 batch",
                f.display()
            )));
        }
        for rec in b.chunks_exact(REC) {
            if limit.is_some_and(|l| labels.len() >= l) {
                break 'outer;
            }
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok(RawSplit {
        channels: 3,
        height: 32,
        width: 32,
        pixels,
        labels,
    })
}

/// Normalizes, replicates channels and pads to `(channels, height, width)`.
fn to_tensor<T: Scalar>(
    raw: &RawSplit,
    norm: &Normalization,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    if raw.height > height || raw.width > width {
        return Err(DfkdError::Config(format!(
            "images are {}x{}, larger than the model input {height}x{width}",
            raw.height, raw.width
        )));
    }
    if channels != raw.channels && raw.channels != 1 {
        return Err(DfkdError::Config(format!(
            "cannot map {} image channels to {channels}",
            raw.channels
        )));
    }
    let (top, left) = ((height - raw.height) / 2, (width - raw.width) / 2);
    let n = raw.labels.len();
    let src_plane = raw.height * raw.width;
    let mut out = Vec::with_capacity(n * channels * height * width);
    for i in 0..n {
        for c in 0..channels {
            let sc = if raw.channels == 1 { 0 } else { c };
            let (mean, std) = (norm.mean[c % norm.mean.len()], norm.std[c % norm.std.len()]);
            let pad = T::from_f64_lossy(-mean / std);
            let plane = &raw.pixels
                [(i * raw.channels + sc) * src_plane..(i * raw.channels + sc + 1) * src_plane];
            for y in 0..height {
                for x in 0..width {
                    let inside =
                        y >= top && y < top + raw.height && x >= left && x < left + raw.width;
                    out.push(if inside {
                        let p = plane[(y - top) * raw.width + (x - left)] as f64 / 255.0;
                        T::from_f64_lossy((p - mean) / std)
                    } else {
                        pad
                    });
                }
            }
        }
    }
    Tensor::new(vec![n, channels, height, width], out)
}

/// Where to find files and how to shape them.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub root: PathBuf,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

/// A loaded dataset. Every train-split access goes through
/// [`DatasetHandle::train`] and is counted.
#[derive(Debug)]
pub struct DatasetHandle<T> {
    pub id: DatasetId,
    pub classes: usize,
    pub normalization: Normalization,
    train: Option<LabeledImages<T>>,
    test: Arc<LabeledImages<T>>,
    train_reads: Arc<AtomicU64>,
}

/// The test split alone. This is what distillation receives.
#[derive(Clone, Debug)]
pub struct TestView<T> {
    pub id: DatasetId,
    pub classes: usize,
    pub normalization: Normalization,
    test: Arc<LabeledImages<T>>,
}

impl<T> TestView<T> {
    pub fn test(&self) -> &LabeledImages<T> {
        &self.test
    }
}

impl<T: Scalar> DatasetHandle<T> {
    /// Loads the test split, and the train split when `with_train` is set.
    pub fn load(spec: &DatasetSpec, with_train: bool) -> Result<Self> {
        let dir = spec.root.join(spec.id.subdir());
        let (train_raw, test_raw) = match spec.id {
            DatasetId::Mnist | DatasetId::FashionMnist => {
                let train = if with_train {
                    Some(read_idx(
                        &dir.join("train-images-idx3-ubyte"),
                        &dir.join("train-labels-idx1-ubyte"),
                        spec.max_train,
                    )?)
                } else {
                    None
                };
                let test = read_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    spec.max_test,
                )?;
                (train, test)
            }
            DatasetId::Cifar10 => {
                let train = if with_train {
                    let files: Vec<PathBuf> = (1..=5)
                        .map(|i| dir.join(format!("data_batch_{i}.bin")))
                        .collect();
                    Some(read_cifar(&files, spec.max_train)?)
                } else {
                    None
                };
                (
                    train,
                    read_cifar(&[dir.join("test_batch.bin")], spec.max_test)?,
                )
            }
        };
        let norm = spec.id.normalization();
        let wrap = |raw: &RawSplit| -> Result<LabeledImages<T>> {
            LabeledImages::new(
                to_tensor(raw, &norm, spec.channels, spec.height, spec.width)?,
                raw.labels.clone(),
            )
        };
        let train = train_raw.as_ref().map(wrap).transpose()?;
        let test = wrap(&test_raw)?;
        Ok(Self {
            id: spec.id,
            classes: 10,
            normalization: norm,
            train,
            test: Arc::new(test),
            train_reads: Arc::new(AtomicU64::new(0)),
        })
    }

    /// The labeled train split. Each call counts as one read.
    pub fn train(&self) -> Result<&LabeledImages<T>> {
        self.train_reads.fetch_add(1, Ordering::SeqCst);
        self.train
            .as_ref()
            .ok_or_else(|| DfkdError::DatasetMissing("train split was not loaded".into()))
    }

    pub fn test(&self) -> &LabeledImages<T> {
        &self.test
    }

    /// Number of train-split accesses so far.
    pub fn train_reads(&self) -> u64 {
        self.train_reads.load(Ordering::SeqCst)
    }

    /// A view with the train split stripped.
    pub fn test_view(&self) -> TestView<T> {
        TestView {
            id: self.id,
            classes: self.classes,
            normalization: self.normalization.clone(),
            test: Arc::clone(&self.test),
        }
    }
}
