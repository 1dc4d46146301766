//! Importance-aware ranking distillation.
//!
//! Each teacher candidate `i` in the top-K list of sample `s` is treated as
//! a soft positive with weight
//! `w = γ_p·exp(-r/β) + γ_c·exp(-d_s/β) + γ_o·[i ∈ O^S]`, where `r` is the
//! 1-based teacher rank, `d_s` the teacher's grounding distance and `O^S`
//! the student's own top-K list. Weights are constants during
//! backpropagation.

use std::collections::{BTreeMap, HashSet};

use distillrec_autodiff::{log_sigmoid, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::SequenceSample;
use crate::error::{CoreError, Result};
use crate::student::{Reduction, StudentModel};
use crate::teacher::TeacherArtifact;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub k: usize,
    /// Weight temperature; `f64::INFINITY` gives the uniform limit.
    pub beta: f64,
    pub gamma_p: f64,
    pub gamma_c: f64,
    pub gamma_o: f64,
    pub lambda_d: f64,
    pub refresh_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 10,
            beta: 1.0,
            gamma_p: 0.3,
            gamma_c: 0.5,
            gamma_o: 0.1,
            lambda_d: 0.5,
            refresh_epochs: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.k == 0 {
            return bad("distill.k must be at least 1".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("distill.beta = {} must be > 0", self.beta));
        }
        for (name, g) in [
            ("gamma_p", self.gamma_p),
            ("gamma_c", self.gamma_c),
            ("gamma_o", self.gamma_o),
            ("lambda_d", self.lambda_d),
        ] {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("distill.{name} = {g} must be finite and ≥ 0"));
            }
        }
        if self.refresh_epochs == 0 {
            return bad("distill.refresh_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Whether any term can make the distillation loss nonzero.
    pub fn is_active(&self) -> bool {
        self.lambda_d > 0.0 && (self.gamma_p > 0.0 || self.gamma_c > 0.0 || self.gamma_o > 0.0)
    }

    pub fn needs_student_topk(&self) -> bool {
        self.lambda_d > 0.0 && self.gamma_o > 0.0
    }
}

/// `exp(-r/β)` for 1-based rank `r`.
pub fn position_weight(rank: usize, beta: f64) -> Result<f64> {
    if rank < 1 {
        return Err(CoreError::invalid("ranks are 1-based"));
    }
    if !(beta > 0.0) {
        return Err(CoreError::invalid(format!("beta = {beta} must be > 0")));
    }
    Ok((-(rank as f64) / beta).exp())
}

/// `exp(-d/β)` for grounding distance `d`.
pub fn confidence_weight(distance: f64, beta: f64) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(CoreError::invalid(format!("distance {distance} must be ≥ 0")));
    }
    if !(beta > 0.0) {
        return Err(CoreError::invalid(format!("beta = {beta} must be > 0")));
    }
    Ok((-distance / beta).exp())
}

/// 1 if `item` is in both lists, else 0.
pub fn consistency_weight(item: usize, teacher: &[usize], student: &[usize]) -> f64 {
    (teacher.contains(&item) && student.contains(&item)) as u8 as f64
}

pub fn combine_weights(wp: f64, wc: f64, wo: f64, gamma_p: f64, gamma_c: f64, gamma_o: f64) -> f64 {
    gamma_p * wp + gamma_c * wc + gamma_o * wo
}

pub fn total_loss(rec: f64, distill: f64, lambda_d: f64) -> f64 {
    rec + lambda_d * distill
}

/// Weights for the top-K teacher candidates of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    pub items: Vec<usize>,
    pub position: Vec<f64>,
    /// Shared by every candidate of the sample.
    pub confidence: f64,
    pub consistency: Vec<f64>,
    pub combined: Vec<f64>,
}

pub fn importance_weights(
    teacher_ranking: &[usize],
    distance: f64,
    student_topk: &[usize],
    cfg: &DistillConfig,
) -> Result<ImportanceWeights> {
    let k = cfg.k.min(teacher_ranking.len());
    let items = teacher_ranking[..k].to_vec();
    let student: HashSet<usize> = student_topk.iter().copied().collect();
    let confidence = confidence_weight(distance, cfg.beta)?;
    let mut position = Vec::with_capacity(k);
    let mut consistency = Vec::with_capacity(k);
    let mut combined = Vec::with_capacity(k);
    for (r, item) in items.iter().enumerate() {
        let wp = position_weight(r + 1, cfg.beta)?;
        let wo = student.contains(item) as u8 as f64;
        position.push(wp);
        consistency.push(wo);
        combined.push(combine_weights(wp, confidence, wo, cfg.gamma_p, cfg.gamma_c, cfg.gamma_o));
    }
    Ok(ImportanceWeights {
        items,
        position,
        confidence,
        consistency,
        combined,
    })
}

/// `-Σ_s Σ_i w_si·log σ(ŷ_si)` for logits `[B, K]` and constant weights of
/// the same shape. Mean reduction divides by `B`.
pub fn distill_loss_node(g: &mut Graph, logits: NodeId, weights: Tensor, reduction: Reduction) -> NodeId {
    let batch = weights.rows().max(1);
    let w = g.constant(weights);
    let ls = g.log_sigmoid(logits);
    let weighted = g.mul(ls, w);
    let total = g.sum(weighted);
    let scale = match reduction {
        Reduction::Mean => -1.0 / batch as f64,
        Reduction::Sum => -1.0,
    };
    let l = g.scale(total, scale);
    g.label(l, "loss.distill")
}

/// Scalar form of [`distill_loss_node`] for one sample.
pub fn distill_loss_value(logits: &[f64], weights: &[f64]) -> f64 {
    logits
        .iter()
        .zip(weights)
        .map(|(&y, &w)| if w == 0.0 { 0.0 } else { -w * log_sigmoid(y) })
        .sum()
}

/// `∂/∂ŷ [-w·log σ(ŷ)] = -w·σ(-ŷ)`.
pub fn distill_gradient(logit: f64, weight: f64) -> f64 {
    -weight * distillrec_autodiff::sigmoid(-logit)
}

/// Student top-K lists keyed by sample index.
pub type StudentTopK = BTreeMap<usize, Vec<usize>>;

/// Recomputes the student's top-K list for every sample.
pub fn refresh_student_topk(model: &StudentModel, samples: &[SequenceSample], k: usize) -> Result<StudentTopK> {
    if k == 0 {
        return Err(CoreError::invalid("k must be at least 1"));
    }
    let prefixes: Vec<&[usize]> = samples.iter().map(|s| s.prefix.as_slice()).collect();
    let lists = model.recommend(&prefixes, k, false)?;
    Ok(samples.iter().map(|s| s.index).zip(lists).collect())
}

/// Combined weights `[samples, K]` and the candidate ids, row-major.
/// Missing student lists count as empty.
pub fn batch_weights(
    samples: &[&SequenceSample],
    teacher: &TeacherArtifact,
    student: &StudentTopK,
    cfg: &DistillConfig,
) -> Result<(Vec<usize>, Tensor)> {
    let k = cfg.k;
    let mut ids = Vec::with_capacity(samples.len() * k);
    let mut w = Vec::with_capacity(samples.len() * k);
    for s in samples {
        let entry = teacher.entry(s.index)?;
        if entry.ranking.len() < k {
            return Err(CoreError::Teacher(format!(
                "sample {} has {} ranked items, distillation needs {k}",
                s.index,
                entry.ranking.len()
            )));
        }
        let own = student.get(&s.index).map(Vec::as_slice).unwrap_or(&[]);
        let iw = importance_weights(&entry.ranking, entry.distance, own, cfg)?;
        ids.extend_from_slice(&iw.items);
        w.extend_from_slice(&iw.combined);
    }
    Ok((ids, Tensor::matrix(samples.len(), k, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use distillrec_autodiff::ParamStore;

    #[test]
    fn position_examples() {
        assert!((position_weight(1, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(position_weight(7, f64::INFINITY).unwrap(), 1.0);
        assert!(position_weight(0, 1.0).is_err());
        for beta in [0.1, 1.0, 10.0] {
            for r in 1..30 {
                assert!(position_weight(r, beta).unwrap() > position_weight(r + 1, beta).unwrap());
            }
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_weight(0.0, 1.0).unwrap(), 1.0);
        assert!((confidence_weight(2.0, 2.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(confidence_weight(1.0, 1.0).unwrap() > confidence_weight(1.5, 1.0).unwrap());
        assert!(confidence_weight(-0.1, 1.0).is_err());
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(consistency_weight(3, &[1, 2, 3], &[3, 4, 5]), 1.0);
        assert_eq!(consistency_weight(1, &[1, 2, 3], &[3, 4, 5]), 0.0);
        let w = importance_weights(&[1, 2, 3], 0.0, &[1, 2, 3], &DistillConfig::default()).unwrap();
        assert_eq!(w.consistency, vec![1.0; 3]);
    }

    #[test]
    fn combined_defaults() {
        let c = DistillConfig::default();
        let w = combine_weights(1.0, 1.0, 1.0, c.gamma_p, c.gamma_c, c.gamma_o);
        assert!((w - 0.9).abs() < 1e-15);
        assert_eq!(combine_weights(0.4, 0.9, 1.0, 0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(distill_loss_value(&[0.3, -2.0], &[0.0, 0.0]), 0.0);
        assert!((distill_loss_value(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert!((total_loss(1.0, 0.5, 0.2) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn loss_node_matches_value() {
        let mut g = Graph::new(false);
        let y = g.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let w = Tensor::matrix(2, 2, vec![0.9, 0.2, 0.0, 0.4]).unwrap();
        let l = distill_loss_node(&mut g, y, w, Reduction::Mean);
        g.forward(&ParamStore::new(), &Default::default()).unwrap();
        let want = (distill_loss_value(&[0.5, -1.0], &[0.9, 0.2]) + distill_loss_value(&[2.0, 0.0], &[0.0, 0.4])) / 2.0;
        assert!((g.value(l).unwrap().item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut c = DistillConfig::default();
        c.beta = 0.0;
        assert!(c.validate().is_err());
        c.beta = f64::INFINITY;
        assert!(c.validate().is_ok());
        c.gamma_o = -0.1;
        assert!(c.validate().is_err());
    }
}
