//! The N-student spiking ensemble: shared encoded input, per-student
//! feature slices placed at their plan-assigned columns, a linear
//! classification head over the concatenation, joint distillation
//! training, and dynamic activation policies.

use crate::arch::{build_model, tiny_spec, ArchSpec, BlockSpec, ModelInstance, NetKind};
use crate::autodiff::{SpikeMode, Tape, Var};
use crate::data::ImageDataset;
use crate::energy::{ledger_from_trace, merge_ledgers, EnergyLedger};
use crate::error::{Error, Result};
use crate::losses::{kd_loss_ensemble, student_total_loss, DistillConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::partition::{validate_partition, PartitionPlan, PartitionScheme};
use crate::rng::{substream, SneRng};
use crate::snn::encode_repeat;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ActivationPolicy {
    /// Every student active for every batch.
    All,
    /// K students resampled per batch at evaluation time only.
    StochasticEval { k: usize },
    /// K students resampled per training batch; evaluation behaves like
    /// `StochasticEval` at the same K.
    TrainedDropout { k: usize },
}

impl ActivationPolicy {
    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.k(n);
        if k == 0 || k > n {
            return Err(Error::invalid(
                "activation_policy",
                format!("K={} outside 1..={}", k, n),
            ));
        }
        Ok(())
    }

    pub fn k(&self, n: usize) -> usize {
        match *self {
            ActivationPolicy::All => n,
            ActivationPolicy::StochasticEval { k } | ActivationPolicy::TrainedDropout { k } => k,
        }
    }
}

/// Uniform sample of K distinct student indices, ascending.
pub fn sample_active_set(n: usize, k: usize, rng: &mut SneRng) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::invalid(
            "sample_active_set",
            format!("K={} outside 1..={}", k, n),
        ));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub students: Vec<ModelInstance>,
    pub plan: PartitionPlan,
    /// Head weights `[D, classes]` over the concatenated firing rates.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub distill: DistillConfig,
    pub t_steps: usize,
    pub classes: usize,
}

/// Build one student per plan subset from a trunk template whose last
/// block must be `FeatureLinear`; its width is replaced by the subset
/// size. Students carry no head of their own.
pub fn build_ensemble(
    trunk: &ArchSpec,
    plan: &PartitionPlan,
    distill: &DistillConfig,
    classes: usize,
    t_steps: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    distill.validate()?;
    validate_partition(plan, plan.dims)?;
    if trunk.kind != NetKind::Snn || trunk.with_head {
        return Err(Error::invalid(
            "build_ensemble",
            "student trunk must be headless snn",
        ));
    }
    if plan.subsets.len() != distill.n_students {
        return Err(Error::invalid(
            "build_ensemble",
            format!(
                "plan has {} subsets, config says {} students",
                plan.subsets.len(),
                distill.n_students
            ),
        ));
    }
    if plan.dims != distill.feature_dim {
        return Err(Error::invalid(
            "build_ensemble",
            format!("plan covers {} dims, config says {}", plan.dims, distill.feature_dim),
        ));
    }
    let mut students = Vec::with_capacity(plan.subsets.len());
    for (i, subset) in plan.subsets.iter().enumerate() {
        let mut spec = trunk.clone();
        spec.name = format!("{}-s{}", trunk.name, i);
        match spec.blocks.last_mut() {
            Some(BlockSpec::FeatureLinear { out }) => *out = subset.len(),
            _ => {
                return Err(Error::invalid(
                    "build_ensemble",
                    "trunk must end in a feature projection",
                ))
            }
        }
        let init_seed = substream(seed, &format!("student{}", i)).gen::<u64>();
        students.push(build_model(&spec, init_seed)?);
    }
    let d = plan.dims;
    let mut head_rng = substream(seed, "head");
    Ok(EnsembleModel {
        students,
        plan: plan.clone(),
        head_w: Tensor::kaiming_uniform(&[d, classes], d, &mut head_rng),
        head_b: Tensor::zeros(&[classes]),
        distill: *distill,
        t_steps,
        classes,
    })
}

/// Convenience desk-scale ensemble: tiny student trunks over a contiguous
/// partition.
pub fn desk_ensemble(
    n_students: usize,
    feature_dim: usize,
    classes: usize,
    input_shape: [usize; 3],
    t_steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<EnsembleModel> {
    let plan = crate::partition::fixed_partition(
        feature_dim,
        n_students,
        crate::partition::FixedMode::Contiguous,
    )?;
    let trunk = tiny_spec(NetKind::Snn, input_shape, classes, feature_dim, false);
    let distill = DistillConfig {
        alpha,
        lambda: -0.1,
        n_students,
        feature_dim,
    };
    build_ensemble(&trunk, &plan, &distill, classes, t_steps, seed)
}

pub struct EnsembleForward {
    /// `[B, D]` concatenated firing rates, inactive slices exactly zero.
    pub features: Var,
    /// `[B, classes]` head output.
    pub logits: Var,
    /// Sum of the active students' ledgers; inactive students cost nothing.
    pub ledger: EnergyLedger,
    /// Per-student feature slices, `None` for inactive students.
    pub student_features: Vec<Option<Var>>,
    /// Per-student parameter leaves, `None` for inactive students.
    pub student_params: Vec<Option<Vec<Var>>>,
    pub head_w: Var,
    pub head_b: Var,
    /// Mean firing rate over the active students' feature slices.
    pub mean_firing_rate: f64,
}

/// Run the ensemble over one raw image batch `[B, C, H, W]`. Every active
/// student sees the same T-step encoding; LIF states are reset first, so
/// batches are independent sequences.
pub fn ensemble_forward(
    model: &mut EnsembleModel,
    tape: &mut Tape,
    images: &Tensor,
    active: &[usize],
    mode: SpikeMode,
    train: bool,
) -> Result<EnsembleForward> {
    let n = model.students.len();
    if active.is_empty() {
        return Err(Error::invalid("ensemble_forward", "empty active set"));
    }
    if active.windows(2).any(|w| w[0] >= w[1]) || *active.last().unwrap() >= n {
        return Err(Error::invalid(
            "ensemble_forward",
            "active set must be ascending distinct indices",
        ));
    }
    let enc = encode_repeat(images, model.t_steps)?;
    let d = model.plan.dims;
    let mut parts: Vec<(Var, Vec<usize>)> = Vec::with_capacity(active.len());
    let mut student_features = vec![None; n];
    let mut student_params = vec![None; n];
    let mut ledgers = Vec::with_capacity(active.len());
    let mut rate_sum = 0.0;
    let mut rate_count = 0usize;
    for &i in active {
        let student = &mut model.students[i];
        student.reset_states();
        let out = student.forward(tape, &enc, model.t_steps, mode, train)?;
        let summaries = student.spec.layer_summaries()?;
        ledgers.push(ledger_from_trace(&summaries, &out.trace, model.t_steps)?);
        let fv = tape.value(out.features);
        rate_sum += fv.data.iter().sum::<f64>();
        rate_count += fv.len();
        parts.push((out.features, model.plan.subsets[i].clone()));
        student_features[i] = Some(out.features);
        student_params[i] = Some(out.param_vars);
    }
    let features = tape.scatter_cols(&parts, d)?;
    let head_w = tape.leaf(model.head_w.clone());
    let head_b = tape.leaf(model.head_b.clone());
    let hw = tape.matmul(features, head_w)?;
    let logits = tape.add_row(hw, head_b)?;
    Ok(EnsembleForward {
        features,
        logits,
        ledger: merge_ledgers(&ledgers)?,
        student_features,
        student_params,
        head_w,
        head_b,
        mean_firing_rate: if rate_count == 0 { 0.0 } else { rate_sum / rate_count as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> usize {
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

/// Joint distillation training against a frozen teacher. Per batch the
/// active set is every student (`All`) or a fresh K-sample
/// (`TrainedDropout`); inactive students are excluded from both loss
/// terms and receive no gradient that batch.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    model: &mut EnsembleModel,
    teacher: &mut ModelInstance,
    dataset: &ImageDataset,
    policy: &ActivationPolicy,
    epochs: usize,
    batch_size: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    let n = model.students.len();
    policy.validate(n)?;
    if matches!(policy, ActivationPolicy::StochasticEval { .. }) {
        return Err(Error::invalid(
            "train_ensemble",
            "stochastic_eval is an evaluation-only policy",
        ));
    }
    if teacher.feature_dim != model.plan.dims {
        return Err(Error::invalid(
            "train_ensemble",
            format!(
                "teacher feature dim {} vs plan dims {}",
                teacher.feature_dim, model.plan.dims
            ),
        ));
    }
    let k = policy.k(n);
    let mut batch_rng = substream(seed, "batches");
    let mut dropout_rng = substream(seed, "dropout");
    let mut optims: Vec<Optimizer> = model
        .students
        .iter()
        .map(|s| {
            let shapes: Vec<Vec<usize>> = s.params.iter().map(|p| p.shape.clone()).collect();
            Optimizer::new(*opt_cfg, &shapes)
        })
        .collect();
    let mut head_optim = Optimizer::new(
        *opt_cfg,
        &[model.head_w.shape.clone(), model.head_b.shape.clone()],
    );
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut ce_sum = 0.0;
        let mut kd_sum = 0.0;
        let mut total_sum = 0.0;
        let mut correct = 0usize;
        let batches = dataset.epoch_batches(batch_size, Some(&mut batch_rng));
        let n_batches = batches.len();
        for indices in batches {
            let (images, labels) = dataset.batch(&indices);
            let active = if k == n {
                (0..n).collect::<Vec<_>>()
            } else {
                sample_active_set(n, k, &mut dropout_rng)?
            };
            // frozen teacher: evaluated off-tape, features enter as a leaf
            let teacher_feat = {
                let mut ttape = Tape::new();
                let out = teacher.forward(&mut ttape, &images, 1, SpikeMode::Hard, false)?;
                ttape.value(out.features).clone()
            };
            let mut tape = Tape::new();
            let fwd = ensemble_forward(model, &mut tape, &images, &active, SpikeMode::Hard, true)?;
            let ce = tape.ce_loss(fwd.logits, &labels)?;
            let tf = tape.leaf(teacher_feat);
            let active_plan = PartitionPlan {
                subsets: active.iter().map(|&i| model.plan.subsets[i].clone()).collect(),
                scheme: model.plan.scheme,
                seed: model.plan.seed,
                dims: model.plan.dims,
            };
            let active_feats: Vec<Var> = active
                .iter()
                .map(|&i| fwd.student_features[i].expect("active student has features"))
                .collect();
            let kd = kd_loss_ensemble(&mut tape, tf, &active_feats, &active_plan)?;
            let loss = student_total_loss(&mut tape, ce, kd, model.distill.alpha)?;
            tape.backward(loss)?;

            for &i in &active {
                let vars = fwd.student_params[i].as_ref().expect("active student params");
                let grads: Vec<Tensor> = vars
                    .iter()
                    .zip(&model.students[i].params)
                    .map(|(v, p)| match tape.grad(*v) {
                        Some(g) => g.clone(),
                        None => Tensor::zeros(&p.shape),
                    })
                    .collect();
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut param_refs: Vec<&mut Tensor> =
                    model.students[i].params.iter_mut().collect();
                optims[i].step(&mut param_refs, &grad_refs);
            }
            let hw_grad = tape
                .grad(fwd.head_w)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&model.head_w.shape));
            let hb_grad = tape
                .grad(fwd.head_b)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&model.head_b.shape));
            head_optim.step(
                &mut [&mut model.head_w, &mut model.head_b],
                &[&hw_grad, &hb_grad],
            );

            ce_sum += tape.value(ce).item();
            kd_sum += tape.value(kd).item();
            total_sum += tape.value(loss).item();
            correct += batch_accuracy(tape.value(fwd.logits), &labels);
        }
        history.push(EpochStats {
            epoch,
            ce: ce_sum / n_batches as f64,
            kd: kd_sum / n_batches as f64,
            total: total_sum / n_batches as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Standard error of the mean over repeats (sample sd / sqrt(repeats)).
    pub sem: f64,
    pub per_repeat: Vec<f64>,
    /// Counters averaged over repeats.
    pub ledger: EnergyLedger,
    pub mean_firing_rate: f64,
}

/// Evaluate under a policy. `All` is deterministic; the K-policies
/// resample the active set per batch, so repeats differ and the SEM is
/// meaningful.
pub fn evaluate(
    model: &mut EnsembleModel,
    dataset: &ImageDataset,
    policy: &ActivationPolicy,
    repeats: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EvalResult> {
    let n = model.students.len();
    policy.validate(n)?;
    if repeats == 0 || dataset.is_empty() {
        return Err(Error::invalid("evaluate", "need at least one repeat and data"));
    }
    let k = policy.k(n);
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut ledgers = Vec::with_capacity(repeats);
    let mut rate_sum = 0.0;
    let mut rate_batches = 0usize;
    for r in 0..repeats {
        let mut rng = substream(seed, &format!("eval{}", r));
        let mut correct = 0usize;
        let mut repeat_ledgers = Vec::new();
        for indices in dataset.epoch_batches(batch_size, None) {
            let (images, labels) = dataset.batch(&indices);
            let active = if k == n {
                (0..n).collect::<Vec<_>>()
            } else {
                sample_active_set(n, k, &mut rng)?
            };
            let mut tape = Tape::new();
            let fwd =
                ensemble_forward(model, &mut tape, &images, &active, SpikeMode::Hard, false)?;
            correct += batch_accuracy(tape.value(fwd.logits), &labels);
            repeat_ledgers.push(fwd.ledger);
            rate_sum += fwd.mean_firing_rate;
            rate_batches += 1;
        }
        per_repeat.push(correct as f64 / dataset.len() as f64);
        ledgers.push(merge_ledgers(&repeat_ledgers)?);
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let sem = if repeats > 1 {
        let var = per_repeat.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
            / (repeats - 1) as f64;
        (var / repeats as f64).sqrt()
    } else {
        0.0
    };
    let ledger = merge_ledgers(&ledgers)?.divided(repeats as u64)?;
    Ok(EvalResult {
        accuracy: mean,
        sem,
        per_repeat,
        ledger,
        mean_firing_rate: rate_sum / rate_batches as f64,
    })
}

/// Evaluate once for every fixed K-subset; reference for the stochastic
/// estimator.
pub fn evaluate_all_subsets(
    model: &mut EnsembleModel,
    dataset: &ImageDataset,
    k: usize,
    batch_size: usize,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = model.students.len();
    if k == 0 || k > n {
        return Err(Error::invalid("evaluate_all_subsets", "K out of range"));
    }
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut subsets);
    let mut results = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let mut correct = 0usize;
        for indices in dataset.epoch_batches(batch_size, None) {
            let (images, labels) = dataset.batch(&indices);
            let mut tape = Tape::new();
            let fwd =
                ensemble_forward(model, &mut tape, &images, &subset, SpikeMode::Hard, false)?;
            correct += batch_accuracy(tape.value(fwd.logits), &labels);
        }
        results.push((subset, correct as f64 / dataset.len() as f64));
    }
    Ok(results)
}

/// Partition scheme is carried on the plan; re-exported here for report
/// plumbing convenience.
pub fn scheme_of(model: &EnsembleModel) -> PartitionScheme {
    model.plan.scheme
}
