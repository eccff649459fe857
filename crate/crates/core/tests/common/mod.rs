//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use dfkd::models::{build_models, ArchitectureConfig, ModelBundle, Module};
use dfkd::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probe-sized networks on `channels x size x size` inputs.
pub fn probe_arch(channels: usize, size: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        teacher: "probe-cnn-t".into(),
        student: "probe-cnn-s".into(),
        channels,
        height: size,
        width: size,
        noise_dim: 8,
        generator_width: 8,
        ..Default::default()
    }
}

/// A probe bundle whose teacher has non-trivial running statistics.
pub fn probe_bundle<T: Scalar>(seed: u64) -> ModelBundle<T> {
    let mut r = rng(seed);
    let mut b = build_models::<T, _>(&probe_arch(1, 8), &mut r).unwrap();
    b.teacher.visit_buffers_mut(&mut |name, t| {
        let var = name.ends_with("running_var");
        for v in t.data_mut() {
            let u: f64 = r.random_range(-0.5..0.5);
            *v = T::from_f64_lossy(if var { 1.0 + u } else { u });
        }
    });
    b
}

/// SHA-256 over a module's parameters and buffers.
pub fn module_hash<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    let mut feed = |name: &str, t: &Tensor<T>| {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    };
    m.visit_params(&mut feed);
    m.visit_buffers(&mut feed);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn params<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    m.visit_params(&mut |_, t| out.push(t.clone()));
    out
}

pub fn set_params<T: Scalar, M: Module<T> + ?Sized>(m: &mut M, values: &[Tensor<T>]) {
    let mut i = 0;
    m.visit_params_mut(&mut |_, t| {
        *t = values[i].clone();
        i += 1;
    });
    assert_eq!(i, values.len());
}

fn write_idx(dir: &Path, prefix: &str, images: &[u8], labels: &[u8], side: usize) {
    let n = labels.len() as u32;
    let mut ib = Vec::new();
    for v in [0x0803u32, n, side as u32, side as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(images);
    let mut lb = Vec::new();
    for v in [0x0801u32, n] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), ib).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lb).unwrap();
}

/// A learnable 8x8 MNIST stand-in under `root/mnist`: class `c` is a bright
/// bar (rows for 0..8, columns for 8 and 9) over speckle noise.
pub fn synthetic_mnist(root: &Path, train: usize, test: usize, seed: u64) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let mut r = rng(seed);
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 10;
            labels.push(c as u8);
            for y in 0..8 {
                for x in 0..8 {
                    let on = match c {
                        0..=7 => y == c,
                        8 => x == 1,
                        _ => x == 6,
                    };
                    let base: u8 = if on { 220 } else { 0 };
                    images.push(base.saturating_add(r.random_range(0..30)));
                }
            }
        }
        (images, labels)
    };
    let (ti, tl) = make(train);
    write_idx(&dir, "train", &ti, &tl, 8);
    let (vi, vl) = make(test);
    write_idx(&dir, "t10k", &vi, &vl, 8);
}
