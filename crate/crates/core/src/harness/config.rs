//! Run configuration, its TOML form and the frozen hash in `config.lock`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::BankConfig;
use crate::distill::TransferConfig;
use crate::error::{DfkdError, Result};
use crate::losses::{KdConfig, LossWeights};
use crate::models::{ArchitectureConfig, AuxTask};
use crate::synthesis::{SynthesisConfig, Variant};

pub const CONFIG_LOCK: &str = "config.lock";

/// Teacher pretraining on the labeled train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Use only the first `n` training images.
    pub max_train: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            max_train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: String,
    pub variant: Variant,
    pub rounds: usize,
    pub warm_up_batches: usize,
    pub seed: u64,
    pub teacher_checkpoint: PathBuf,
    pub output_dir: PathBuf,
    /// Write `grids/round_####.png` each round.
    pub save_grids: bool,
    /// Evaluate on the first `n` test images only.
    pub max_test: Option<usize>,
    /// Directory where warm-up banks are cached and reused across runs.
    pub warm_up_cache: Option<PathBuf>,
    pub architecture: ArchitectureConfig,
    pub synthesis: SynthesisConfig,
    pub transfer: TransferConfig,
    pub bank: BankConfig,
    pub weights: LossWeights,
    pub kd: KdConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            variant: Variant::Csd,
            rounds: 20,
            warm_up_batches: 8,
            seed: 0,
            teacher_checkpoint: PathBuf::from("runs/teacher.ckpt"),
            output_dir: PathBuf::from("runs/csd"),
            save_grids: true,
            max_test: None,
            warm_up_cache: None,
            architecture: ArchitectureConfig::default(),
            synthesis: SynthesisConfig::default(),
            transfer: TransferConfig::default(),
            bank: BankConfig::default(),
            weights: LossWeights::default(),
            kd: KdConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| DfkdError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DfkdError::Config(e.to_string()))
    }

    /// The architecture with the auxiliary head matching the variant.
    pub fn effective_architecture(&self) -> ArchitectureConfig {
        let mut arch = self.architecture.clone();
        arch.aux_task = if self.variant == Variant::Rotation {
            AuxTask::Rotation
        } else {
            AuxTask::Augmented
        };
        arch
    }

    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        self.transfer.validate()?;
        self.weights.validate()?;
        self.kd.validate()?;
        if let Some(cap) = self.bank.capacity {
            let warm = self.warm_up_batches * self.synthesis.batch_size;
            if cap < warm {
                return Err(DfkdError::Config(format!(
                    "bank capacity {cap} is below the warm-up size {warm}"
                )));
            }
        }
        Ok(())
    }

    /// Fields that influence results. Output location and cache paths are
    /// excluded so a run directory can be moved.
    fn hashed_view(&self) -> RunConfig {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.warm_up_cache = None;
        c
    }

    /// SHA-256 of the canonical JSON encoding of the result-relevant fields.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.hashed_view())?;
        Ok(hex(&Sha256::digest(json)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigLock {
    pub hash: String,
    pub config: RunConfig,
}

/// Writes `config.lock` on first use; afterwards requires the hash to match.
pub fn check_or_write_lock(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(CONFIG_LOCK);
    let hash = cfg.hash()?;
    if path.exists() {
        let lock: ConfigLock = serde_json::from_slice(&fs::read(&path)?)?;
        if lock.hash != hash {
            return Err(DfkdError::ResumeMismatch {
                dir: dir.to_path_buf(),
                expected: hash,
                found: lock.hash,
            });
        }
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let lock = ConfigLock {
        hash,
        config: cfg.clone(),
    };
    fs::write(&path, serde_json::to_vec_pretty(&lock)?)?;
    Ok(())
}

pub fn read_lock(dir: &Path) -> Result<ConfigLock> {
    Ok(serde_json::from_slice(&fs::read(dir.join(CONFIG_LOCK))?)?)
}
