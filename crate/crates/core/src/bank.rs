//! The image bank: every synthesized batch, kept for replay during transfer.
//!
//! On disk a bank is a directory with `index.meta` (JSON: geometry, labels,
//! rounds, capacity) and `pixels.bin` (little-endian `f32`, record-major).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfkdError, Result};
use crate::losses::KdConfig;
use crate::models::{Generator, ModelBundle};
use crate::rng::{Component, RngStreams};
use crate::synthesis::{
    run_synthesis_stage, select_ablation_objective, SynthesisConfig, SynthesisRngs, Variant,
};
use crate::tensor::{Scalar, Tensor};

pub const INDEX_FILE: &str = "index.meta";
pub const PIXELS_FILE: &str = "pixels.bin";
pub const BANK_FORMAT: &str = "dfkd-bank/1";

/// Round tag of records created during warm-up.
pub const WARM_UP_ROUND: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Maximum record count; the oldest records are evicted first.
    pub capacity: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    capacity: Option<usize>,
    labels: Vec<usize>,
    rounds: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBank {
    geometry: Option<(usize, usize, usize)>,
    capacity: Option<usize>,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    rounds: Vec<u32>,
}

impl ImageBank {
    pub fn new(config: &BankConfig) -> Self {
        Self {
            geometry: None,
            capacity: config.capacity,
            pixels: Vec::new(),
            labels: Vec::new(),
            rounds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// `(C, H, W)`, known after the first append.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.geometry
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rounds(&self) -> &[u32] {
        &self.rounds
    }

    fn record_len(&self) -> usize {
        self.geometry.map_or(0, |(c, h, w)| c * h * w)
    }

    /// Pixels of record `i` as `(C, H, W)` values.
    pub fn record(&self, i: usize) -> Option<&[f32]> {
        let n = self.record_len();
        (i < self.len()).then(|| &self.pixels[i * n..(i + 1) * n])
    }

    pub fn append<T: Scalar>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        round: u32,
    ) -> Result<()> {
        let (b, c, h, w) = batch.dims4()?;
        if labels.len() != b {
            return Err(DfkdError::shape(format!(
                "{} labels for {b} images",
                labels.len()
            )));
        }
        match self.geometry {
            Some(geo) if geo != (c, h, w) => {
                return Err(DfkdError::shape(format!(
                    "bank holds {geo:?} images, got ({c}, {h}, {w})"
                )))
            }
            _ => self.geometry = Some((c, h, w)),
        }
        self.pixels
            .extend(batch.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        self.labels.extend_from_slice(labels);
        self.rounds.extend(std::iter::repeat_n(round, b));
        if let Some(cap) = self.capacity {
            if self.len() > cap {
                let drop = self.len() - cap;
                let n = self.record_len();
                self.pixels.drain(..drop * n);
                self.labels.drain(..drop);
                self.rounds.drain(..drop);
            }
        }
        Ok(())
    }

    /// Drops every record created after `round`. Returns how many were removed.
    pub fn truncate_after_round(&mut self, round: u32) -> usize {
        let n = self.record_len();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.rounds[i] <= round)
            .collect();
        let removed = self.len() - keep.len();
        if removed == 0 {
            return 0;
        }
        let mut pixels = Vec::with_capacity(keep.len() * n);
        for &i in &keep {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        self.labels = keep.iter().map(|&i| self.labels[i]).collect();
        self.rounds = keep.iter().map(|&i| self.rounds[i]).collect();
        self.pixels = pixels;
        removed
    }

    /// `count` records drawn uniformly with replacement.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.is_empty() {
            return Err(DfkdError::EmptyBank);
        }
        let idx: Vec<usize> = (0..count)
            .map(|_| rng.random_range(0..self.len()))
            .collect();
        self.gather(&idx)
    }

    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = self.geometry.ok_or(DfkdError::EmptyBank)?;
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = self
                .record(i)
                .ok_or_else(|| DfkdError::shape(format!("record {i} out of range")))?;
            data.extend(rec.iter().map(|&v| T::from_f64_lossy(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Class counts over `classes` labels.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes.max(self.labels.iter().map(|&l| l + 1).max().unwrap_or(0))];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Record count per creation round.
    pub fn rounds_represented(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &r in &self.rounds {
            *m.entry(r).or_insert(0) += 1;
        }
        m
    }

    /// SHA-256 over pixel bytes, labels and rounds.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        for (&l, &r) in self.labels.iter().zip(&self.rounds) {
            h.update((l as u64).to_le_bytes());
            h.update(r.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (channels, height, width) = self.geometry.unwrap_or((0, 0, 0));
        let index = Index {
            format: BANK_FORMAT.into(),
            count: self.len(),
            channels,
            height,
            width,
            capacity: self.capacity,
            labels: self.labels.clone(),
            rounds: self.rounds.clone(),
        };
        let mut bytes = Vec::with_capacity(self.pixels.len() * 4);
        for v in &self.pixels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&dir.join(PIXELS_FILE), &bytes)?;
        write_atomic(&dir.join(INDEX_FILE), &serde_json::to_vec(&index)?)?;
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let corrupt = |reason: String| DfkdError::CorruptBank {
            path: dir.to_path_buf(),
            reason,
        };
        let index: Index = serde_json::from_slice(&fs::read(&index_path)?)
            .map_err(|e| corrupt(format!("index: {e}")))?;
        if index.format != BANK_FORMAT {
            return Err(corrupt(format!("unknown format `{}`", index.format)));
        }
        if index.labels.len() != index.count || index.rounds.len() != index.count {
            return Err(corrupt(
                "label or round array length differs from count".into(),
            ));
        }
        let bytes = fs::read(dir.join(PIXELS_FILE))?;
        let n = index.channels * index.height * index.width;
        if bytes.len() != index.count * n * 4 {
            return Err(corrupt(format!(
                "pixels.bin holds {} bytes, expected {}",
                bytes.len(),
                index.count * n * 4
            )));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            geometry: (index.count > 0 || n > 0).then_some((
                index.channels,
                index.height,
                index.width,
            )),
            capacity: index.capacity,
            pixels,
            labels: index.labels,
            rounds: index.rounds,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Fills an empty bank with `batches` synthesis batches made with the
/// baseline objective (no student-dependent term).
pub fn warm_up<T: Scalar>(
    bank: &mut ImageBank,
    bundle: &mut ModelBundle<T>,
    cfg: &SynthesisConfig,
    kd: &KdConfig,
    batches: usize,
    streams: &RngStreams,
) -> Result<()> {
    if !bank.is_empty() {
        return Err(DfkdError::Config("warm-up needs an empty bank".into()));
    }
    let objective = select_ablation_objective(Variant::Baseline, 0.0);
    for i in 0..batches as u64 {
        let mut init = streams.stream(Component::WarmUp, 4 * i);
        if !cfg.persistent_generator || i == 0 {
            bundle.generator = Generator::new(bundle.arch.generator_spec(), &mut init)?;
        }
        let mut noise = streams.stream(Component::WarmUp, 4 * i + 1);
        let mut labels = streams.stream(Component::WarmUp, 4 * i + 2);
        let mut rotation = streams.stream(Component::WarmUp, 4 * i + 3);
        let out = run_synthesis_stage(
            bundle,
            cfg,
            &objective,
            kd,
            SynthesisRngs {
                noise: &mut noise,
                labels: &mut labels,
                rotation: &mut rotation,
            },
        )?;
        bank.append(&out.images, &out.labels, WARM_UP_ROUND)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(b: usize, start: f32) -> Tensor<f32> {
        Tensor::new(
            vec![b, 1, 2, 2],
            (0..b * 4).map(|v| start + v as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut bank = ImageBank::new(&BankConfig {
            capacity: Some(300),
        });
        bank.append(&batch(300, 0.0), &vec![1; 300], 0).unwrap();
        bank.append(&batch(100, 1e6), &vec![2; 100], 1).unwrap();
        assert_eq!(bank.len(), 300);
        assert_eq!(bank.record(0).unwrap()[0], 400.0);
        assert_eq!(bank.labels()[199], 1);
        assert_eq!(bank.labels()[200], 2);
    }

    #[test]
    fn truncation_keeps_earlier_rounds() {
        let mut bank = ImageBank::new(&BankConfig::default());
        bank.append(&batch(2, 0.0), &[0, 1], 0).unwrap();
        bank.append(&batch(3, 100.0), &[2, 3, 4], 1).unwrap();
        bank.append(&batch(1, 200.0), &[5], 2).unwrap();
        assert_eq!(bank.truncate_after_round(1), 1);
        assert_eq!(bank.labels(), &[0, 1, 2, 3, 4]);
        assert_eq!(bank.record(4).unwrap()[0], 108.0);
        assert_eq!(bank.truncate_after_round(1), 0);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let mut bank = ImageBank::new(&BankConfig::default());
        bank.append(&batch(2, 0.0), &[0, 1], 0).unwrap();
        let other = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(bank.append(&other, &[0], 1).is_err());
    }

    #[test]
    fn single_record_sample_repeats_it() {
        let mut bank = ImageBank::new(&BankConfig::default());
        bank.append(&batch(1, 5.0), &[7], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, l) = bank.sample::<f32, _>(128, &mut rng).unwrap();
        assert_eq!(x.shape(), &[128, 1, 2, 2]);
        assert!(l.iter().all(|&v| v == 7));
        assert!(x.data().chunks(4).all(|c| c == [5.0, 6.0, 7.0, 8.0]));
    }

    #[test]
    fn empty_bank_cannot_be_sampled() {
        let bank = ImageBank::new(&BankConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            bank.sample::<f32, _>(1, &mut rng),
            Err(DfkdError::EmptyBank)
        ));
    }
}
