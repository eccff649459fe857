//! Network architectures, the model bundle and checkpoint I/O.

pub mod checkpoint;
pub mod cnn;
pub mod generator;
pub mod heads;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointMetadata,
    Checkpointable,
};
pub use cnn::{CnnOutput, CnnSpec, CnnVars, StudentModel, TeacherModel, TinyCnn};
pub use generator::{Generator, GeneratorSpec, GeneratorVars};
pub use heads::{AuxClassifier, AuxSpec, AuxVars, Projector, ProjectorSpec, ProjectorVars};
pub use layers::{Binding, BnMode, Module};

use crate::error::{DfkdError, Result};
use crate::tensor::Scalar;

/// Registered conv stacks: `(name, widths)`. All use stride-2 blocks.
pub const REGISTRY: &[(&str, &[usize])] = &[
    ("tiny-cnn-t", &[32, 64, 128]),
    ("tiny-cnn-s", &[16, 32, 64]),
    ("probe-cnn-t", &[4, 6, 8]),
    ("probe-cnn-s", &[2, 3, 4]),
];

pub fn registered_architectures() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Label space of the auxiliary head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    /// Joint class-and-rotation labels, `K = N * M`.
    #[default]
    Augmented,
    /// Rotation labels only, `K = M`.
    Rotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub teacher: String,
    pub student: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub rotations: usize,
    pub aux_depth: usize,
    #[serde(default)]
    pub aux_task: AuxTask,
    /// Overrides the aux input width; must equal the student feature dim.
    #[serde(default)]
    pub aux_input_dim: Option<usize>,
    pub noise_dim: usize,
    pub generator_width: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            teacher: "tiny-cnn-t".into(),
            student: "tiny-cnn-s".into(),
            channels: 1,
            height: 32,
            width: 32,
            classes: 10,
            rotations: 4,
            aux_depth: 2,
            aux_task: AuxTask::Augmented,
            aux_input_dim: None,
            noise_dim: 256,
            generator_width: 128,
        }
    }
}

impl ArchitectureConfig {
    pub fn cnn_spec(&self, name: &str) -> Result<CnnSpec> {
        let widths = REGISTRY
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, w)| w.to_vec())
            .ok_or_else(|| DfkdError::UnknownArchitecture(name.to_string()))?;
        Ok(CnnSpec {
            name: name.to_string(),
            in_channels: self.channels,
            height: self.height,
            width: self.width,
            strides: vec![2; widths.len()],
            widths,
            classes: self.classes,
        })
    }

    pub fn teacher_spec(&self) -> Result<CnnSpec> {
        self.cnn_spec(&self.teacher)
    }

    pub fn student_spec(&self) -> Result<CnnSpec> {
        self.cnn_spec(&self.student)
    }

    pub fn aux_outputs(&self) -> usize {
        match self.aux_task {
            AuxTask::Augmented => self.classes * self.rotations,
            AuxTask::Rotation => self.rotations,
        }
    }

    pub fn aux_spec(&self) -> Result<AuxSpec> {
        let d = self.student_spec()?.feature_dim();
        if let Some(dim) = self.aux_input_dim {
            if dim != d {
                return Err(DfkdError::shape(format!(
                    "auxiliary classifier input {dim} does not match student feature dim {d}"
                )));
            }
        }
        Ok(AuxSpec {
            input_dim: d,
            outputs: self.aux_outputs(),
            depth: self.aux_depth,
        })
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            noise_dim: self.noise_dim,
            base_width: self.generator_width,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn projector_spec(&self) -> Result<ProjectorSpec> {
        let (cs, ..) = self.student_spec()?.feature_map_shape();
        let (ct, ht, wt) = self.teacher_spec()?.feature_map_shape();
        Ok(ProjectorSpec {
            in_channels: cs,
            out_channels: ct,
            out_height: ht,
            out_width: wt,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.channels < 1 {
            return Err(DfkdError::Config(
                "classes and channels must be positive".into(),
            ));
        }
        if self.rotations != 2 && self.rotations != 4 {
            return Err(DfkdError::UnsupportedRotationCount(self.rotations));
        }
        Ok(())
    }
}

/// The actors of one distillation run.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub arch: ArchitectureConfig,
    pub teacher: TeacherModel<T>,
    pub student: StudentModel<T>,
    pub projector: Projector<T>,
    pub generator: Generator<T>,
    pub aux: AuxClassifier<T>,
}

/// Builds every network for `config` with freshly initialized weights.
/// The teacher is usually replaced by a loaded checkpoint afterwards.
pub fn build_models<T: Scalar, R: Rng + ?Sized>(
    config: &ArchitectureConfig,
    rng: &mut R,
) -> Result<ModelBundle<T>> {
    config.validate()?;
    let teacher = TeacherModel::new(TinyCnn::new(config.teacher_spec()?, rng)?);
    let student = StudentModel::new(TinyCnn::new(config.student_spec()?, rng)?);
    let aux = AuxClassifier::new(config.aux_spec()?, rng)?;
    let projector = Projector::new(config.projector_spec()?, rng);
    let generator = Generator::new(config.generator_spec(), rng)?;
    Ok(ModelBundle {
        arch: config.clone(),
        teacher,
        student,
        projector,
        generator,
        aux,
    })
}
