//! Training objectives: cross-entropy, knowledge-distillation MSE (single
//! and partitioned), the combined student loss, and the teacher
//! disentanglement similarity loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::partition::PartitionPlan;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const SIM_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// KD weight α (≥ 0).
    pub alpha: f64,
    /// Similarity weight λ (< 0 when disentanglement is active).
    pub lambda: f64,
    pub n_students: usize,
    pub feature_dim: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::invalid("distill_config", "alpha must be >= 0"));
        }
        if self.n_students == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("distill_config", "empty ensemble or features"));
        }
        Ok(())
    }
}

/// Mean over the batch of −log softmax at the true class.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.ce_loss(logits, labels)
}

/// `Σ_i (v_i − k_i)²` per sample, averaged over the batch.
pub fn kd_loss_single(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    let st = tape.shape(teacher).to_vec();
    if st != tape.shape(student) {
        return Err(Error::shape(
            "kd_loss_single",
            format!("{:?} vs {:?}", st, tape.shape(student)),
        ));
    }
    let b = st[0];
    let diff = tape.sub(teacher, student)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `Σ_i Σ_k (v_ik − s_ik)²` where `v_i` gathers the teacher columns of
/// subset `S_i`; averaged over the batch.
pub fn kd_loss_ensemble(
    tape: &mut Tape,
    teacher_features: Var,
    student_features: &[Var],
    plan: &PartitionPlan,
) -> Result<Var> {
    let st = tape.shape(teacher_features).to_vec();
    if st.len() != 2 {
        return Err(Error::shape("kd_loss_ensemble", "teacher features must be [B, D]"));
    }
    let (b, d) = (st[0], st[1]);
    if plan.dims != d {
        return Err(Error::shape(
            "kd_loss_ensemble",
            format!("plan covers {} dims, teacher has {}", plan.dims, d),
        ));
    }
    if student_features.len() != plan.subsets.len() {
        return Err(Error::shape(
            "kd_loss_ensemble",
            format!(
                "{} student features for {} subsets",
                student_features.len(),
                plan.subsets.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (subset, &sf) in plan.subsets.iter().zip(student_features) {
        let ss = tape.shape(sf);
        if ss.len() != 2 || ss[0] != b || ss[1] != subset.len() {
            return Err(Error::shape(
                "kd_loss_ensemble",
                format!("student features {:?} vs subset width {}", ss, subset.len()),
            ));
        }
        let vi = tape.gather_cols(teacher_features, subset)?;
        let diff = tape.sub(vi, sf)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("plan has at least one subset");
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `L = L_CE + α·L_KD`; α = 0 reduces to plain SNN training.
pub fn student_total_loss(tape: &mut Tape, ce: Var, kd: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(kd, alpha);
    tape.add(ce, weighted)
}

/// Similarity loss over N contiguous column clusters of `features [B, D]`:
/// after L2-normalizing each cluster row, sum over cluster pairs and batch
/// rows of the MSE (mean over the D/N sub-dimensions) between corresponding
/// rows.
pub fn sim_loss(tape: &mut Tape, features: Var, n_clusters: usize) -> Result<Var> {
    let sf = tape.shape(features).to_vec();
    if sf.len() != 2 {
        return Err(Error::shape("sim_loss", "features must be [B, D]"));
    }
    let (b, d) = (sf[0], sf[1]);
    if b == 0 {
        return Err(Error::invalid("sim_loss", "empty batch"));
    }
    if n_clusters == 0 || d % n_clusters != 0 {
        return Err(Error::invalid(
            "sim_loss",
            format!("D={} not divisible by N={}", d, n_clusters),
        ));
    }
    let sub = d / n_clusters;
    let mut normalized = Vec::with_capacity(n_clusters);
    for i in 0..n_clusters {
        let cols: Vec<usize> = (i * sub..(i + 1) * sub).collect();
        let cluster = tape.gather_cols(features, &cols)?;
        normalized.push(tape.normalize_rows(cluster, SIM_NORM_EPS)?);
    }
    let mut total: Option<Var> = None;
    for i in 0..n_clusters {
        for j in (i + 1)..n_clusters {
            let diff = tape.sub(normalized[i], normalized[j])?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("sim_loss", "need at least 2 clusters"))?;
    Ok(tape.scale(total, 1.0 / sub as f64))
}

/// `Loss = L_CE + λ·L_sim` with λ < 0 rewarding separation.
pub fn teacher_finetune_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    features: Var,
    n_clusters: usize,
    lambda: f64,
) -> Result<Var> {
    if lambda >= 0.0 {
        return Err(Error::invalid(
            "teacher_finetune_loss",
            "disentanglement requires lambda < 0",
        ));
    }
    let ce = tape.ce_loss(logits, labels)?;
    let sim = sim_loss(tape, features, n_clusters)?;
    let weighted = tape.scale(sim, lambda);
    tape.add(ce, weighted)
}

/// Diagnostic metric: mean over batch rows and cluster pairs of the
/// Euclidean distance between L2-normalized contiguous sub-rows.
pub fn mean_pairwise_cluster_distance(features: &Tensor, n_clusters: usize) -> Result<f64> {
    if features.shape.len() != 2 {
        return Err(Error::shape("cluster_distance", "features must be [B, D]"));
    }
    let (b, d) = (features.shape[0], features.shape[1]);
    if n_clusters < 2 || d % n_clusters != 0 {
        return Err(Error::invalid(
            "cluster_distance",
            format!("D={} N={}", d, n_clusters),
        ));
    }
    let sub = d / n_clusters;
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        let row = &features.data[bi * d..(bi + 1) * d];
        let norm_sub = |i: usize| -> Vec<f64> {
            let s = &row[i * sub..(i + 1) * sub];
            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(SIM_NORM_EPS);
            s.iter().map(|v| v / n).collect()
        };
        for i in 0..n_clusters {
            let vi = norm_sub(i);
            for j in (i + 1)..n_clusters {
                let vj = norm_sub(j);
                let dist: f64 = vi
                    .iter()
                    .zip(&vj)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                total += dist;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
