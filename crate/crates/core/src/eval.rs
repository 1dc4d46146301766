//! Ranking metrics, full-catalog evaluation and list-overlap diagnostics.

use serde::Serialize;

use crate::data::SequenceSample;
use crate::error::{CoreError, Result};
use crate::student::StudentModel;

/// 1 if `target` is in the list.
pub fn hr_at_k(list: &[usize], target: usize) -> f64 {
    list.contains(&target) as u8 as f64
}

/// `1 / log2(rank + 1)` for the 1-based rank of `target`, 0 if absent.
pub fn ndcg_at_k(list: &[usize], target: usize) -> f64 {
    match list.iter().position(|&i| i == target) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub k: usize,
    pub samples: usize,
    pub hr: f64,
    pub ndcg: f64,
    /// Per-sample hit flags, in input order.
    #[serde(skip)]
    pub hits: Vec<bool>,
    #[serde(skip)]
    pub per_sample_ndcg: Vec<f64>,
}

/// Scores precomputed lists against their targets.
pub fn metrics_from_lists(lists: &[Vec<usize>], targets: &[usize], k: usize) -> Result<MetricsReport> {
    if lists.len() != targets.len() {
        return Err(CoreError::invalid(format!(
            "{} lists for {} targets",
            lists.len(),
            targets.len()
        )));
    }
    let mut hits = Vec::with_capacity(lists.len());
    let mut per_sample_ndcg = Vec::with_capacity(lists.len());
    for (list, &t) in lists.iter().zip(targets) {
        let list = &list[..k.min(list.len())];
        hits.push(hr_at_k(list, t) == 1.0);
        per_sample_ndcg.push(ndcg_at_k(list, t));
    }
    let n = lists.len().max(1) as f64;
    // Summed in sample order so the result does not depend on scheduling.
    let hr = hits.iter().filter(|&&h| h).count() as f64 / n;
    let ndcg = per_sample_ndcg.iter().sum::<f64>() / n;
    Ok(MetricsReport {
        k,
        samples: lists.len(),
        hr,
        ndcg,
        hits,
        per_sample_ndcg,
    })
}

/// Full-catalog top-`k` evaluation of a frozen model.
pub fn evaluate(model: &StudentModel, samples: &[SequenceSample], k: usize, exclude_seen: bool) -> Result<MetricsReport> {
    let lists = recommend_samples(model, samples, k, exclude_seen)?;
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    metrics_from_lists(&lists, &targets, k)
}

pub fn recommend_samples(
    model: &StudentModel,
    samples: &[SequenceSample],
    k: usize,
    exclude_seen: bool,
) -> Result<Vec<Vec<usize>>> {
    let prefixes: Vec<&[usize]> = samples.iter().map(|s| s.prefix.as_slice()).collect();
    model.recommend(&prefixes, k, exclude_seen)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapStats {
    /// Mean of `|A ∩ B| / K` over samples.
    pub overlap: f64,
    /// Among items in both lists, the fraction that is the target.
    pub hit_overlap: f64,
    pub hit_a_only: f64,
    pub hit_b_only: f64,
}

/// Overlap of paired top-`k` lists; with `targets`, also the hit rate of
/// the overlapped, A-only and B-only regions (hits per listed item).
pub fn overlap_ratio(a: &[Vec<usize>], b: &[Vec<usize>], k: usize, targets: Option<&[usize]>) -> Result<OverlapStats> {
    if a.len() != b.len() {
        return Err(CoreError::invalid(format!("{} lists vs {} lists", a.len(), b.len())));
    }
    if let Some(t) = targets {
        if t.len() != a.len() {
            return Err(CoreError::invalid(format!("{} targets for {} lists", t.len(), a.len())));
        }
    }
    if k == 0 {
        return Err(CoreError::invalid("k must be at least 1"));
    }
    let mut overlap_sum = 0.0;
    let (mut both, mut a_only, mut b_only) = ((0usize, 0usize), (0usize, 0usize), (0usize, 0usize));
    for (s, (la, lb)) in a.iter().zip(b).enumerate() {
        let la = &la[..k.min(la.len())];
        let lb = &lb[..k.min(lb.len())];
        let common = la.iter().filter(|i| lb.contains(i)).count();
        overlap_sum += common as f64 / k as f64;
        if let Some(t) = targets {
            let t = t[s];
            for i in la {
                let region = if lb.contains(i) { &mut both } else { &mut a_only };
                region.0 += 1;
                region.1 += (*i == t) as usize;
            }
            for i in lb.iter().filter(|i| !la.contains(i)) {
                b_only.0 += 1;
                b_only.1 += (*i == t) as usize;
            }
        }
    }
    let frac = |(n, h): (usize, usize)| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(OverlapStats {
        overlap: if a.is_empty() { 0.0 } else { overlap_sum / a.len() as f64 },
        hit_overlap: frac(both),
        hit_a_only: frac(a_only),
        hit_b_only: frac(b_only),
    })
}

/// Teacher–student overlap before and after distillation.
pub fn overlap_before_after(
    teacher: &[Vec<usize>],
    before: &[Vec<usize>],
    after: &[Vec<usize>],
    k: usize,
) -> Result<(f64, f64)> {
    Ok((
        overlap_ratio(teacher, before, k, None)?.overlap,
        overlap_ratio(teacher, after, k, None)?.overlap,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WinLoss {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

/// Per-sample comparison of two NDCG vectors; equal values are ties.
pub fn compare_per_sample(a: &[f64], b: &[f64]) -> Result<WinLoss> {
    if a.len() != b.len() {
        return Err(CoreError::invalid("per-sample vectors differ in length"));
    }
    let mut out = WinLoss {
        wins: 0,
        losses: 0,
        ties: 0,
    };
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => out.wins += 1,
            Some(std::cmp::Ordering::Less) => out.losses += 1,
            _ => out.ties += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hit_and_ndcg_examples() {
        assert_eq!(hr_at_k(&[4, 1, 2], 4), 1.0);
        assert_eq!(hr_at_k(&[4, 1, 2], 9), 0.0);
        assert_eq!(ndcg_at_k(&[4, 1, 2], 4), 1.0);
        assert_eq!(ndcg_at_k(&[4, 1, 2], 2), 0.5);
        assert_eq!(ndcg_at_k(&[4, 1, 2], 9), 0.0);
    }

    #[test]
    fn overlap_examples() {
        let a = vec![vec![1, 2, 3, 4]];
        let b = vec![vec![3, 4, 5, 6]];
        assert_eq!(overlap_ratio(&a, &a, 4, None).unwrap().overlap, 1.0);
        assert_eq!(overlap_ratio(&a, &[vec![7, 8, 9, 10]], 4, None).unwrap().overlap, 0.0);
        let s = overlap_ratio(&a, &b, 4, Some(&[3])).unwrap();
        assert_eq!(s.overlap, 0.5);
        assert_eq!((s.hit_overlap, s.hit_a_only, s.hit_b_only), (0.5, 0.0, 0.0));
        assert!(overlap_ratio(&a, &[], 4, None).is_err());
    }

    #[test]
    fn copying_teacher_gives_full_overlap() {
        let t = vec![vec![1, 2], vec![3, 4]];
        let (pre, post) = overlap_before_after(&t, &[vec![5, 6], vec![3, 7]], &t, 2).unwrap();
        assert_eq!((pre, post), (0.25, 1.0));
    }

    #[test]
    fn ties_are_neither() {
        let w = compare_per_sample(&[1.0, 0.5, 0.0], &[0.5, 0.5, 1.0]).unwrap();
        assert_eq!((w.wins, w.ties, w.losses), (1, 1, 1));
    }
}
