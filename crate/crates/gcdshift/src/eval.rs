//! Hungarian-matched clustering accuracy on All/Old/New splits, per
//! domain, and the serialized evaluation report.
//!
//! The cluster-to-class assignment is computed once over the full pool
//! (all domains jointly); the per-domain and Old/New numbers restrict
//! that single assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn-Munkres
/// with potentials, O(n^3)). Returns `row -> col`.
pub fn hungarian_min_cost(cost: &Mat) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-indexed potentials; p[j] = row matched to column j
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Clustering accuracy after the optimal cluster-to-class relabeling.
/// Returns the accuracy and the `cluster -> class` map.
pub fn hungarian_acc(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<(f64, Vec<usize>)> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Invalid("empty or misaligned label arrays".into()));
    }
    if y_true.iter().chain(y_pred).any(|&y| y >= k) {
        return Err(Error::Invalid(format!("labels must lie in 0..{k}")));
    }
    // contingency counts: rows = predicted cluster, cols = true class
    let mut counts = Mat::zeros((k, k));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[[p, t]] += 1.0;
    }
    let maxc = counts.iter().cloned().fold(0.0, f64::max);
    let cost = counts.mapv(|c| maxc - c);
    let assignment = hungarian_min_cost(&cost);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .map(|(cluster, &class)| counts[[cluster, class]])
        .sum();
    Ok((matched / y_true.len() as f64, assignment))
}

/// Accuracies for one subset of samples under a fixed global assignment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitAcc {
    /// `None` when the subset is empty (omitted, not zero).
    pub all: Option<f64>,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Joint numbers over every evaluated sample.
    pub overall: SplitAcc,
    /// Restrictions of the single global assignment per domain id.
    pub per_domain: Vec<SplitAcc>,
    /// Optimal `cluster -> class` map from the joint pool.
    pub assignment: Vec<usize>,
    /// Contingency counts, `counts[cluster][class]`.
    pub counts: Vec<Vec<usize>>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

fn subset_acc(
    y_true: &[usize],
    y_pred: &[usize],
    assignment: &[usize],
    base: &[bool],
    select: impl Fn(usize) -> bool,
) -> SplitAcc {
    let mut n = [0usize; 3]; // all, old, new
    let mut hit = [0usize; 3];
    for i in 0..y_true.len() {
        if !select(i) {
            continue;
        }
        let correct = assignment[y_pred[i]] == y_true[i];
        let old = base[y_true[i]];
        n[0] += 1;
        hit[0] += correct as usize;
        let slot = if old { 1 } else { 2 };
        n[slot] += 1;
        hit[slot] += correct as usize;
    }
    let frac = |h: usize, n: usize| {
        if n == 0 {
            None
        } else {
            Some(h as f64 / n as f64)
        }
    };
    SplitAcc {
        all: frac(hit[0], n[0]),
        old: frac(hit[1], n[1]),
        new: frac(hit[2], n[2]),
        n_all: n[0],
        n_old: n[1],
        n_new: n[2],
    }
}

/// Computes the report: one Hungarian assignment over the whole pool,
/// then All/Old/New restrictions overall and per domain.
pub fn split_accuracies(
    y_true: &[usize],
    y_pred: &[usize],
    domain_ids: &[u8],
    base_classes: &[usize],
    k: usize,
) -> Result<EvalReport> {
    if y_true.len() != domain_ids.len() {
        return Err(Error::Invalid("domain ids misaligned".into()));
    }
    let (_, assignment) = hungarian_acc(y_true, y_pred, k)?;
    let mut base = vec![false; k];
    for &b in base_classes {
        if b >= k {
            return Err(Error::Invalid("base class out of range".into()));
        }
        base[b] = true;
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p][t] += 1;
    }
    let overall = subset_acc(y_true, y_pred, &assignment, &base, |_| true);
    let n_domains = domain_ids.iter().copied().max().unwrap_or(0) as usize + 1;
    let per_domain = (0..n_domains)
        .map(|d| {
            subset_acc(y_true, y_pred, &assignment, &base, |i| {
                domain_ids[i] as usize == d
            })
        })
        .collect();
    Ok(EvalReport {
        method: String::new(),
        overall,
        per_domain,
        assignment,
        counts,
        config_hash: String::new(),
        checkpoint_id: String::new(),
    })
}

/// Exhaustive maximum over all cluster-to-class bijections; test oracle
/// for small K.
pub fn brute_force_acc(y_true: &[usize], y_pred: &[usize], k: usize) -> f64 {
    assert!(k <= 8, "factorial oracle limited to small K");
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let s: usize = (0..k).map(|c| counts[c][p[c]]).sum();
        if s > best {
            best = s;
        }
    });
    best as f64 / y_true.len() as f64
}

fn permute(arr: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == arr.len() {
        f(arr);
        return;
    }
    for i in at..arr.len() {
        arr.swap(at, i);
        permute(arr, at + 1, f);
        arr.swap(at, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn relabeled_clusters_score_perfectly() {
        let t = [0, 0, 1, 1];
        let p = [1, 1, 0, 0];
        let (acc, map) = hungarian_acc(&t, &p, 2).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(map, vec![1, 0]);
    }

    #[test]
    fn half_right_is_half() {
        let t = [0, 0, 1, 1];
        let p = [0, 1, 0, 1];
        let (acc, _) = hungarian_acc(&t, &p, 2).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(brute_force_acc(&t, &p, 2), 0.5);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(hungarian_acc(&[], &[], 3).is_err());
        assert!(hungarian_acc(&[0, 1], &[0], 2).is_err());
        assert!(hungarian_acc(&[0, 5], &[0, 1], 2).is_err());
    }

    #[test]
    fn hungarian_equals_factorial_brute_force() {
        let mut r = crate::rng::rng(1, "hung", &[]);
        for trial in 0..200 {
            let k = r.gen_range(2..=7);
            let n = r.gen_range(2..=30);
            let t: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let (acc, _) = hungarian_acc(&t, &p, k).unwrap();
            let brute = brute_force_acc(&t, &p, k);
            assert!(
                (acc - brute).abs() < 1e-12,
                "trial {trial}: hungarian {acc} vs brute {brute}"
            );
        }
    }

    #[test]
    fn accuracies_are_invariant_to_cluster_relabeling() {
        let mut r = crate::rng::rng(2, "perm", &[]);
        let k = 5;
        let t: Vec<usize> = (0..40).map(|_| r.gen_range(0..k)).collect();
        let p: Vec<usize> = (0..40).map(|_| r.gen_range(0..k)).collect();
        let d: Vec<u8> = (0..40).map(|_| r.gen_range(0..2)).collect();
        let base = [0, 1, 2];
        let r1 = split_accuracies(&t, &p, &d, &base, k).unwrap();
        // relabel clusters by a fixed permutation
        let perm = [3, 0, 4, 1, 2];
        let p2: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let r2 = split_accuracies(&t, &p2, &d, &base, k).unwrap();
        assert_eq!(r1.overall, r2.overall);
        assert_eq!(r1.per_domain, r2.per_domain);
    }

    #[test]
    fn all_is_the_size_weighted_mean_of_old_and_new() {
        let mut r = crate::rng::rng(3, "mean", &[]);
        let k = 6;
        let t: Vec<usize> = (0..60).map(|_| r.gen_range(0..k)).collect();
        let p: Vec<usize> = (0..60).map(|_| r.gen_range(0..k)).collect();
        let d = vec![0u8; 60];
        let rep = split_accuracies(&t, &p, &d, &[0, 1, 2], k).unwrap();
        let o = &rep.overall;
        let weighted = (o.old.unwrap_or(0.0) * o.n_old as f64
            + o.new.unwrap_or(0.0) * o.n_new as f64)
            / o.n_all as f64;
        assert!((o.all.unwrap() - weighted).abs() < 1e-12);
    }

    #[test]
    fn base_only_correct_predictor_splits_cleanly() {
        // classes 0,1 base; 2,3 novel; predictor correct on base,
        // shifted wrong on novel (2 <-> 3 stay distinct clusters but
        // both wrong after the identity-favoring assignment)
        let t = [0, 0, 1, 1, 2, 2, 3, 3];
        let p = [0, 0, 1, 1, 3, 3, 2, 2];
        let d = [0u8; 8];
        let rep = split_accuracies(&t, &p, &d, &[0, 1], 4).unwrap();
        let o = &rep.overall;
        assert_eq!(o.old, Some(1.0));
        // swapped novel clusters still relabel to full accuracy via the
        // joint assignment, so drive them to a single cluster instead
        let p2 = [0, 0, 1, 1, 2, 2, 2, 2];
        let rep2 = split_accuracies(&t, &p2, &d, &[0, 1], 4).unwrap();
        assert_eq!(rep2.overall.old, Some(1.0));
        assert_eq!(rep2.overall.new, Some(0.5));
    }

    #[test]
    fn empty_split_reports_null_not_zero() {
        let t = [0, 0, 1, 1];
        let p = [0, 0, 1, 1];
        let d = [0u8; 4];
        // every class is base: the "new" split has no samples
        let rep = split_accuracies(&t, &p, &d, &[0, 1], 2).unwrap();
        assert_eq!(rep.overall.new, None);
        assert_eq!(rep.overall.n_new, 0);
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["overall"]["new"].is_null());
    }

    #[test]
    fn shuffled_predictions_score_near_chance() {
        // Monte-Carlo: chance level for K=8 balanced labels, with the
        // optimistic bias the optimal assignment introduces at finite n
        let k = 8;
        let n = 240;
        let mut accs = Vec::new();
        for seed in 0..50u64 {
            let mut r = crate::rng::rng(seed, "chance", &[]);
            let t: Vec<usize> = (0..n).map(|i| i % k).collect();
            let p: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let (acc, _) = hungarian_acc(&t, &p, k).unwrap();
            accs.push(acc);
        }
        let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean > 1.0 / k as f64, "assignment bias lifts above 1/K");
        assert!(mean < 1.0 / k as f64 + 0.15, "mean {mean} far from chance");
    }
}
