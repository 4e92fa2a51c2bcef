//! Teacher-side training: plain cross-entropy training of the ANN, and
//! the disentangling fine-tune that pushes the N contiguous feature
//! clusters apart while preserving accuracy.

use crate::arch::{ModelInstance, NetKind};
use crate::autodiff::{SpikeMode, Tape};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::losses::{mean_pairwise_cluster_distance, sim_loss, teacher_finetune_loss};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::substream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub ce: f64,
    /// Similarity loss value; 0 when disentanglement is off.
    pub sim: f64,
    pub train_accuracy: f64,
    /// Mean pairwise distance between normalized cluster rows; 0 when not
    /// tracked (plain CE training).
    pub cluster_distance: f64,
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape[1];
    labels
        .iter()
        .enumerate()
        .filter(|(b, &y)| {
            let row = &logits.data[b * classes..(b + 1) * classes];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

fn check_teacher(model: &ModelInstance) -> Result<()> {
    if model.spec.kind != NetKind::Ann || !model.spec.with_head {
        return Err(Error::invalid(
            "teacher",
            "teacher must be an ann with a classification head",
        ));
    }
    Ok(())
}

/// Cross-entropy training of the ANN teacher.
pub fn train_teacher(
    model: &mut ModelInstance,
    dataset: &ImageDataset,
    epochs: usize,
    batch_size: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<TeacherEpoch>> {
    check_teacher(model)?;
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape.clone()).collect();
    let mut optim = Optimizer::new(*opt_cfg, &shapes);
    let mut batch_rng = substream(seed, "teacher-batches");
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut ce_sum = 0.0;
        let mut correct = 0usize;
        let batches = dataset.epoch_batches(batch_size, Some(&mut batch_rng));
        let n_batches = batches.len();
        for indices in batches {
            let (images, labels) = dataset.batch(&indices);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &images, 1, SpikeMode::Hard, true)?;
            let logits = out.logits.expect("teacher has a head");
            let ce = tape.ce_loss(logits, &labels)?;
            tape.backward(ce)?;
            step_params(model, &mut optim, &mut tape, &out.param_vars);
            ce_sum += tape.value(ce).item();
            correct += accuracy_of(tape.value(logits), &labels);
        }
        history.push(TeacherEpoch {
            epoch,
            ce: ce_sum / n_batches as f64,
            sim: 0.0,
            train_accuracy: correct as f64 / dataset.len() as f64,
            cluster_distance: 0.0,
        });
    }
    Ok(history)
}

/// Fine-tune with `L = L_CE + lambda * L_sim` over N contiguous feature
/// clusters. `lambda` must be negative to push clusters apart; exactly
/// zero degenerates to plain CE with the distance still tracked.
#[allow(clippy::too_many_arguments)]
pub fn finetune_teacher(
    model: &mut ModelInstance,
    dataset: &ImageDataset,
    n_clusters: usize,
    lambda: f64,
    epochs: usize,
    batch_size: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<TeacherEpoch>> {
    check_teacher(model)?;
    if lambda > 0.0 {
        return Err(Error::invalid("finetune_teacher", "lambda must be <= 0"));
    }
    if n_clusters < 2 || model.feature_dim % n_clusters != 0 {
        return Err(Error::invalid(
            "finetune_teacher",
            format!(
                "feature dim {} not divisible into {} clusters",
                model.feature_dim, n_clusters
            ),
        ));
    }
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape.clone()).collect();
    let mut optim = Optimizer::new(*opt_cfg, &shapes);
    let mut batch_rng = substream(seed, "finetune-batches");
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut ce_sum = 0.0;
        let mut sim_sum = 0.0;
        let mut dist_sum = 0.0;
        let mut correct = 0usize;
        let batches = dataset.epoch_batches(batch_size, Some(&mut batch_rng));
        let n_batches = batches.len();
        for indices in batches {
            let (images, labels) = dataset.batch(&indices);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &images, 1, SpikeMode::Hard, true)?;
            let logits = out.logits.expect("teacher has a head");
            let sim = sim_loss(&mut tape, out.features, n_clusters)?;
            let (loss, ce) = if lambda == 0.0 {
                let ce = tape.ce_loss(logits, &labels)?;
                (ce, ce)
            } else {
                let ce = tape.ce_loss(logits, &labels)?;
                let loss =
                    teacher_finetune_loss(&mut tape, logits, &labels, out.features, n_clusters, lambda)?;
                (loss, ce)
            };
            tape.backward(loss)?;
            step_params(model, &mut optim, &mut tape, &out.param_vars);
            ce_sum += tape.value(ce).item();
            sim_sum += tape.value(sim).item();
            dist_sum += mean_pairwise_cluster_distance(tape.value(out.features), n_clusters)?;
            correct += accuracy_of(tape.value(logits), &labels);
        }
        history.push(TeacherEpoch {
            epoch,
            ce: ce_sum / n_batches as f64,
            sim: sim_sum / n_batches as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
            cluster_distance: dist_sum / n_batches as f64,
        });
    }
    Ok(history)
}

fn step_params(
    model: &mut ModelInstance,
    optim: &mut Optimizer,
    tape: &mut Tape,
    vars: &[crate::autodiff::Var],
) {
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(&model.params)
        .map(|(v, p)| match tape.grad(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&p.shape),
        })
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut param_refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
    optim.step(&mut param_refs, &grad_refs);
}

/// Plain accuracy of the teacher over a dataset.
pub fn evaluate_teacher(
    model: &mut ModelInstance,
    dataset: &ImageDataset,
    batch_size: usize,
) -> Result<f64> {
    check_teacher(model)?;
    let mut correct = 0usize;
    for indices in dataset.epoch_batches(batch_size, None) {
        let (images, labels) = dataset.batch(&indices);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &images, 1, SpikeMode::Hard, false)?;
        correct += accuracy_of(tape.value(out.logits.expect("teacher has a head")), &labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}
