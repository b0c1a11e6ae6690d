//! Normalized-cut bipartition of patch affinity graphs.
//!
//! The affinity couples Gaussian feature similarity with a Chebyshev
//! locality gate on the patch grid. The relaxed cut indicator is the
//! eigenvector of the second-smallest generalized eigenvalue of
//! `(D - W) v = mu D v`, solved through the symmetric normalized form
//! `D^{-1/2} (D - W) D^{-1/2}` with a cyclic Jacobi eigensolver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

const DEGREE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// Median pairwise feature distance among gated pairs.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Split the indicator eigenvector at zero.
    Zero,
    /// Try indicator quantiles 0.3..0.7 and keep the lowest cut value.
    QuantileSweep,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AffinityConfig {
    pub sigma: SigmaRule,
    /// Locality radius in patch-grid Chebyshev distance; edges exist for
    /// distance strictly below it.
    pub radius: usize,
    pub threshold: ThresholdRule,
    /// Backbone block whose patch tokens feed the affinity graph.
    pub tap_layer: usize,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            sigma: SigmaRule::Median,
            radius: 3,
            threshold: ThresholdRule::Zero,
            tap_layer: 1,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config("locality radius must be >= 1".into()));
        }
        if let SigmaRule::Fixed(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config("sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian-similarity affinity with a locality gate. Self-edges are
/// zero; the diagonal carries no weight.
pub fn affinity_from_features(feats: &Mat, grid: usize, cfg: &AffinityConfig) -> Result<Mat> {
    cfg.validate()?;
    let p = feats.nrows();
    if p != grid * grid {
        return Err(Error::Invalid(format!(
            "{p} features do not fill a {grid}x{grid} patch grid"
        )));
    }
    if feats.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite patch features".into()));
    }
    let cheb = |i: usize, j: usize| -> usize {
        let (ri, ci) = (i / grid, i % grid);
        let (rj, cj) = (j / grid, j % grid);
        ri.abs_diff(rj).max(ci.abs_diff(cj))
    };

    let mut d2 = Mat::zeros((p, p));
    let mut gated = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if cheb(i, j) < cfg.radius {
                let dist2: f64 = feats
                    .row(i)
                    .iter()
                    .zip(feats.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2[[i, j]] = dist2;
                d2[[j, i]] = dist2;
                gated.push(dist2.sqrt());
            }
        }
    }
    let sigma = match cfg.sigma {
        SigmaRule::Fixed(s) => s,
        SigmaRule::Median => {
            gated.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if gated.is_empty() {
                0.0
            } else {
                gated[gated.len() / 2]
            };
            if med < 1e-12 {
                1.0
            } else {
                med
            }
        }
    };

    let mut w = Mat::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            if i != j && cheb(i, j) < cfg.radius {
                w[[i, j]] = (-d2[[i, j]] / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Ok(w)
}

/// Cyclic Jacobi diagonalization of a symmetric matrix. Returns
/// eigenvalues ascending with matching eigenvector columns.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi wants a square matrix");
    let mut m = a.clone();
    let mut v = Mat::eye(n);
    let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-15 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Mat::zeros((n, n));
    for (out, &i) in order.iter().enumerate() {
        // deterministic sign: largest-magnitude component positive
        let col = v.column(i);
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(_, &x)| x)
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, out]] = sign * v[[k, i]];
        }
    }
    (eigenvalues, vectors)
}

/// Cut weight normalized by both associations for a bipartition of `w`.
pub fn ncut_value(w: &Mat, in_a: &[bool]) -> f64 {
    let n = w.nrows();
    let mut cut = 0.0;
    let mut assoc_a = 0.0;
    let mut assoc_b = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = w[[i, j]];
            if in_a[i] {
                assoc_a += x;
            } else {
                assoc_b += x;
            }
            if in_a[i] != in_a[j] {
                cut += x;
            }
        }
    }
    cut /= 2.0; // each cut edge counted from both sides
    let term = |cut: f64, assoc: f64| {
        if assoc <= 0.0 {
            if cut > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            cut / assoc
        }
    };
    term(cut, assoc_a) + term(cut, assoc_b)
}

#[derive(Debug, Clone)]
pub struct NcutResult {
    /// `true` marks the first partition side (higher indicator value).
    pub in_a: Vec<bool>,
    pub indicator: Vec<f64>,
    pub eigenvalue: f64,
    pub value: f64,
}

/// Spectral bipartition from an affinity matrix: solve the generalized
/// problem via the symmetric normalized Laplacian, threshold the second
/// eigenvector.
pub fn ncut_partition(w: &Mat, threshold: ThresholdRule) -> Result<NcutResult> {
    let n = w.nrows();
    if n < 2 || w.ncols() != n {
        return Err(Error::Invalid("affinity must be square with n >= 2".into()));
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| w.row(i).sum().max(DEGREE_EPS))
        .collect();

    // D^{-1/2} (D - W) D^{-1/2}, explicitly symmetrized
    let mut lsym = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let lij = if i == j { degrees[i] - w[[i, j]] } else { -w[[i, j]] };
            lsym[[i, j]] = lij / (degrees[i] * degrees[j]).sqrt();
        }
    }
    let lsym = (&lsym + &lsym.t()) * 0.5;

    let (vals, vecs) = jacobi_eigen(&lsym);
    let mu2 = vals[1];
    let indicator: Vec<f64> = (0..n)
        .map(|i| vecs[[i, 1]] / degrees[i].sqrt())
        .collect();

    let split_at = |t: f64| -> Vec<bool> { indicator.iter().map(|&x| x > t).collect() };
    fn consider(w: &Mat, best: &mut Option<(Vec<bool>, f64)>, mask: Vec<bool>) {
        if mask.iter().any(|&x| x) && mask.iter().any(|&x| !x) {
            let v = ncut_value(w, &mask);
            if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
                *best = Some((mask, v));
            }
        }
    }

    let mut best: Option<(Vec<bool>, f64)> = None;
    match threshold {
        ThresholdRule::Zero => consider(w, &mut best, split_at(0.0)),
        ThresholdRule::QuantileSweep => {
            let mut sorted = indicator.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for q in [0.3, 0.4, 0.5, 0.6, 0.7] {
                let idx = ((n as f64 - 1.0) * q) as usize;
                consider(w, &mut best, split_at(sorted[idx]));
            }
        }
    }
    // degenerate threshold: fall back to a median split, then to a
    // single-node split so a bipartition always comes back
    if best.is_none() {
        let mut sorted = indicator.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        consider(w, &mut best, split_at(sorted[n / 2]));
    }
    let (in_a, value) = best.unwrap_or_else(|| {
        let mut m = vec![false; n];
        m[0] = true;
        let v = ncut_value(w, &m);
        (m, v)
    });

    Ok(NcutResult {
        in_a,
        indicator,
        eigenvalue: mu2,
        value,
    })
}

/// Full foreground mask: bipartition the patch graph, then call the side
/// with the higher mean CLS attention the foreground.
pub fn ncut_mask(
    feats: &Mat,
    grid: usize,
    cls_attention: &[f64],
    cfg: &AffinityConfig,
) -> Result<Vec<bool>> {
    let p = grid * grid;
    if p < 4 {
        return Err(Error::Invalid("need at least 4 patches".into()));
    }
    if cls_attention.len() != p {
        return Err(Error::Invalid("attention length != patch count".into()));
    }
    let w = affinity_from_features(feats, grid, cfg)?;
    let part = ncut_partition(&w, cfg.threshold)?;
    let mean = |side: bool| {
        let (mut s, mut c) = (0.0, 0usize);
        for (i, &a) in part.in_a.iter().enumerate() {
            if a == side {
                s += cls_attention[i];
                c += 1;
            }
        }
        if c == 0 {
            f64::NEG_INFINITY
        } else {
            s / c as f64
        }
    };
    let fg_side = mean(true) >= mean(false);
    Ok(part.in_a.iter().map(|&a| a == fg_side).collect())
}

/// Exhaustive minimum over all bipartitions; test oracle for small `n`.
pub fn brute_force_min_ncut(w: &Mat) -> (Vec<bool>, f64) {
    let n = w.nrows();
    assert!(n <= 20, "brute force limited to small graphs");
    let mut best_mask = vec![false; n];
    let mut best = f64::INFINITY;
    for bits in 1..((1u32 << n) - 1) {
        let mask: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        let v = ncut_value(w, &mask);
        if v < best {
            best = v;
            best_mask = mask;
        }
    }
    (best_mask, best)
}
