//! Supervised teacher pretraining. The only code path that reads the
//! labeled train split.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;

use super::config::PretrainConfig;
use super::data::DatasetHandle;
use crate::autograd::Graph;
use crate::distill::evaluate;
use crate::error::{DfkdError, Result};
use crate::losses::cross_entropy;
use crate::models::{
    save_checkpoint, ArchitectureConfig, Binding, BnMode, CheckpointMetadata, TeacherModel, TinyCnn,
};
use crate::optim::{apply_to_module, collect_grads, cosine_lr, Optimizer, Sgd};
use crate::rng::{Component, RngStreams};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub test_accuracy: f64,
}

/// Trains the teacher architecture of `arch` with SGD and a cosine schedule,
/// then writes it to `out` as a teacher checkpoint.
pub fn pretrain_teacher<T: Scalar>(
    data: &DatasetHandle<T>,
    arch: &ArchitectureConfig,
    cfg: &PretrainConfig,
    out: &Path,
) -> Result<(TeacherModel<T>, PretrainSummary)> {
    let streams = RngStreams::new(cfg.seed);
    let mut net = TinyCnn::<T>::new(
        arch.teacher_spec()?,
        &mut streams.stream(Component::TeacherInit, 0),
    )?;
    let train = data.train()?;
    let n = train.len();
    if n == 0 {
        return Err(DfkdError::EmptyDataset);
    }
    let bs = cfg.batch_size.max(1);
    let per_epoch = n.div_ceil(bs) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut opt = Sgd::<T>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut shuffle = streams.stream(Component::PretrainShuffle, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(bs).enumerate() {
            let x = train.images.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let vars = net.bind(&mut g, Binding::Trainable);
            let xv = g.constant(x);
            let out = net.forward(&vars, &mut g, xv, BnMode::Train)?;
            let loss = cross_entropy(&mut g, out.logits, &labels)?;
            let lv = g.scalar(loss).as_f64();
            if !lv.is_finite() {
                return Err(DfkdError::NonFinite {
                    stage: "pretrain",
                    step: step as usize,
                    detail: format!("loss={lv}"),
                });
            }
            sum += lv;
            let mut grads = g.backward(loss)?;
            let gs = collect_grads(&g, &mut grads, &vars.vars());
            drop(g);
            opt.set_lr(cosine_lr(cfg.lr, step, total));
            opt.begin_step();
            apply_to_module(&mut opt, 0, &mut net, &gs)?;
            net.commit_moments(&out.moments);
            step += 1;
            final_loss = sum / (bi + 1) as f64;
        }
        info!("pretrain epoch {} loss {final_loss:.4}", epoch + 1);
    }
    let teacher = TeacherModel::new(net);
    let test_accuracy = evaluate(&teacher, data.test())?;
    info!("teacher test accuracy {test_accuracy:.4}");
    save_checkpoint(
        &teacher,
        out,
        CheckpointMetadata {
            epoch: Some(cfg.epochs),
            seed: Some(cfg.seed),
            dataset: Some(data.id.name().into()),
            test_accuracy: Some(test_accuracy),
            ..Default::default()
        },
    )?;
    Ok((
        teacher,
        PretrainSummary {
            epochs: cfg.epochs,
            final_loss,
            test_accuracy,
        },
    ))
}
