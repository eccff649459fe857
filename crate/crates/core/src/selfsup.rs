//! Right-angle rotations and the joint class-and-rotation label algebra.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DfkdError, Result};
use crate::kernels::rotate_plane;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ROTATIONS: usize = 4;

fn check_rotations(rotations: usize) -> Result<()> {
    if rotations == 2 || rotations == 4 {
        Ok(())
    } else {
        Err(DfkdError::UnsupportedRotationCount(rotations))
    }
}

/// Rotation `m` of `M`, i.e. `m * 360 / M` degrees clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RotationId {
    m: usize,
    count: usize,
}

impl RotationId {
    pub fn new(m: usize, count: usize) -> Result<Self> {
        check_rotations(count)?;
        if m >= count {
            return Err(DfkdError::LabelOutOfRange {
                label: m,
                classes: count,
            });
        }
        Ok(Self { m, count })
    }

    pub fn identity(count: usize) -> Result<Self> {
        Self::new(0, count)
    }

    pub fn index(self) -> usize {
        self.m
    }

    pub fn count(self) -> usize {
        self.count
    }

    pub fn degrees(self) -> usize {
        self.m * 360 / self.count
    }

    pub fn quarter_turns(self) -> u8 {
        (self.m * 4 / self.count) as u8
    }

    pub fn compose(self, other: Self) -> Self {
        debug_assert_eq!(self.count, other.count);
        Self {
            m: (self.m + other.m) % self.count,
            count: self.count,
        }
    }
}

/// `k = n * M + m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedLabel {
    pub k: usize,
    pub n: usize,
    pub m: usize,
}

impl AugmentedLabel {
    pub fn encode(n: usize, m: usize, classes: usize, rotations: usize) -> Result<Self> {
        if n >= classes {
            return Err(DfkdError::LabelOutOfRange { label: n, classes });
        }
        if m >= rotations {
            return Err(DfkdError::LabelOutOfRange {
                label: m,
                classes: rotations,
            });
        }
        Ok(Self {
            k: n * rotations + m,
            n,
            m,
        })
    }

    pub fn decode(k: usize, classes: usize, rotations: usize) -> Result<Self> {
        if rotations == 0 || k >= classes * rotations {
            return Err(DfkdError::LabelOutOfRange {
                label: k,
                classes: classes * rotations,
            });
        }
        Ok(Self {
            k,
            n: k / rotations,
            m: k % rotations,
        })
    }
}

/// Pixel-exact clockwise rotation of every image in `(B, C, H, W)`.
pub fn rotate<T: Scalar>(batch: &Tensor<T>, rotation: RotationId) -> Result<Tensor<T>> {
    let (_, _, h, w) = batch.dims4()?;
    let turns = rotation.quarter_turns();
    if turns % 2 == 1 && h != w {
        return Err(DfkdError::NonSquare {
            height: h,
            width: w,
            quarter_turns: turns,
        });
    }
    let plane = h * w;
    let mut out = vec![T::zero(); batch.numel()];
    for (src, dst) in batch
        .data()
        .chunks_exact(plane)
        .zip(out.chunks_exact_mut(plane))
    {
        rotate_plane(src, dst, h, w, turns);
    }
    Tensor::new(batch.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationPolicy {
    /// Every image under every rotation: `M * B` outputs, rotation-major.
    #[default]
    AllRotations,
    /// One uniformly drawn rotation per image: `B` outputs.
    RandomRotation,
}

/// Which source image and rotation produce each augmented sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationPlan {
    pub rotations: usize,
    pub source: Vec<usize>,
    pub labels: Vec<AugmentedLabel>,
}

impl AugmentationPlan {
    pub fn new<R: Rng + ?Sized>(
        class_labels: &[usize],
        classes: usize,
        rotations: usize,
        policy: RotationPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        check_rotations(rotations)?;
        let b = class_labels.len();
        let mut source = Vec::new();
        let mut labels = Vec::new();
        match policy {
            RotationPolicy::AllRotations => {
                for m in 0..rotations {
                    for (i, &n) in class_labels.iter().enumerate() {
                        source.push(i);
                        labels.push(AugmentedLabel::encode(n, m, classes, rotations)?);
                    }
                }
            }
            RotationPolicy::RandomRotation => {
                for (i, &n) in class_labels.iter().enumerate() {
                    let m = rng.random_range(0..rotations);
                    source.push(i);
                    labels.push(AugmentedLabel::encode(n, m, classes, rotations)?);
                }
            }
        }
        debug_assert!(source.len() == b || source.len() == b * rotations);
        Ok(Self {
            rotations,
            source,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.k).collect()
    }

    pub fn rotation_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.m).collect()
    }

    fn turns(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| (l.m * 4 / self.rotations) as u8)
            .collect()
    }

    /// Applies the plan inside a graph so gradients reach `x`.
    pub fn apply_var<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = g.shape(x).first().copied().unwrap_or(0);
        let identity_order = self
            .source
            .iter()
            .enumerate()
            .all(|(i, &s)| s == i % b.max(1));
        if !identity_order || !self.source.len().is_multiple_of(b.max(1)) {
            return Err(DfkdError::shape("augmentation plan does not match batch"));
        }
        let turns = self.turns();
        if self.source.len() == b {
            return g.rotate(x, &turns);
        }
        let parts = turns
            .chunks_exact(b)
            .map(|t| g.rotate(x, t))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&parts)
    }

    pub fn apply<T: Scalar>(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let y = self.apply_var(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Expands `batch` with rotations and returns the rotated images and their
/// joint labels.
pub fn make_augmented_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    labels: &[usize],
    classes: usize,
    rotations: usize,
    policy: RotationPolicy,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<AugmentedLabel>)> {
    let (b, ..) = batch.dims4()?;
    if labels.len() != b {
        return Err(DfkdError::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let plan = AugmentationPlan::new(labels, classes, rotations, policy, rng)?;
    Ok((plan.apply(batch)?, plan.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe() -> Tensor<f32> {
        let data = (0..2 * 2 * 4 * 4).map(|v| v as f32).collect();
        Tensor::new(vec![2, 2, 4, 4], data).unwrap()
    }

    #[test]
    fn label_examples() {
        assert_eq!(AugmentedLabel::encode(3, 2, 10, 4).unwrap().k, 14);
        assert_eq!(AugmentedLabel::encode(0, 0, 10, 4).unwrap().k, 0);
        assert!(AugmentedLabel::encode(10, 0, 10, 4).is_err());
        assert!(AugmentedLabel::decode(40, 10, 4).is_err());
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let x = probe();
        let r = rotate(&x, RotationId::new(1, 4).unwrap()).unwrap();
        let n = 4;
        for p in 0..4 {
            let src = &x.data()[p * 16..(p + 1) * 16];
            let dst = &r.data()[p * 16..(p + 1) * 16];
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(dst[j * n + (n - 1 - i)], src[i * n + j]);
                }
            }
        }
    }

    #[test]
    fn two_rotation_setting_uses_half_turns() {
        let r = RotationId::new(1, 2).unwrap();
        assert_eq!(r.quarter_turns(), 2);
        assert_eq!(r.degrees(), 180);
        let x = Tensor::<f32>::new(vec![1, 1, 2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let y = rotate(&x, r).unwrap();
        assert_eq!(y.data(), &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn odd_turn_on_non_square_fails() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(matches!(
            rotate(&x, RotationId::new(1, 4).unwrap()),
            Err(DfkdError::NonSquare { .. })
        ));
        assert!(RotationId::new(0, 3).is_err());
    }

    #[test]
    fn all_rotations_is_rotation_major() {
        let x = probe();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, labels) =
            make_augmented_batch(&x, &[3, 7], 10, 4, RotationPolicy::AllRotations, &mut rng)
                .unwrap();
        assert_eq!(y.shape(), &[8, 2, 4, 4]);
        let ks: Vec<usize> = labels.iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![12, 28, 13, 29, 14, 30, 15, 31]);
        let r2 = rotate(&x, RotationId::new(2, 4).unwrap()).unwrap();
        assert_eq!(y.slice_rows(4, 6).unwrap(), r2);
    }

    #[test]
    fn random_rotation_keeps_batch_size() {
        let x = probe();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, labels) =
            make_augmented_batch(&x, &[1, 2], 10, 4, RotationPolicy::RandomRotation, &mut rng)
                .unwrap();
        assert_eq!(y.shape(), x.shape());
        for (i, l) in labels.iter().enumerate() {
            let single = x.slice_rows(i, i + 1).unwrap();
            let expect = rotate(&single, RotationId::new(l.m, 4).unwrap()).unwrap();
            assert_eq!(y.slice_rows(i, i + 1).unwrap(), expect);
        }
    }
}
