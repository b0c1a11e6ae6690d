//! Embedding-space patch mixing.
//!
//! Two samples' patch embeddings are blended row-wise with per-patch
//! Beta-distributed coefficients. The blended view inherits a soft
//! semantic identity: a scalar weight `alpha` computed from the two
//! images' CLS attention maps decides how much of the anchor's label
//! survives, and labels are smoothed toward uniform accordingly.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::rng;

/// One anchor's mixing recipe.
#[derive(Debug, Clone)]
pub struct MixEntry {
    /// Batch position of the partner sample.
    pub partner: usize,
    /// Per-patch anchor share, each in `[0, 1]`.
    pub beta: Vec<f64>,
    /// Mean of `beta`; the text-side mixing coefficient.
    pub beta_bar: f64,
    /// Attention-weighted semantic share of the anchor; filled in once
    /// attention maps are known.
    pub alpha: f64,
}

/// A full batch mixing plan: one entry per anchor, partners drawn by a
/// seeded policy that prefers labelled-unlabelled pairs.
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub entries: Vec<MixEntry>,
}

impl MixPlan {
    /// Builds the pairing and Beta draws. Every anchor receives exactly
    /// one partner: labelled anchors prefer unlabelled partners and vice
    /// versa, falling back to any other sample when a side runs dry.
    pub fn generate(
        labelled_mask: &[bool],
        n_patches: usize,
        beta_param: f64,
        seed: u64,
    ) -> Result<MixPlan> {
        let n = labelled_mask.len();
        if n < 2 {
            return Err(Error::Invalid("mixing needs at least two samples".into()));
        }
        if beta_param <= 0.0 {
            return Err(Error::Invalid("beta parameter must be positive".into()));
        }
        let mut r = rng::rng(seed, "mix-plan", &[]);
        let mut labelled: Vec<usize> = (0..n).filter(|&i| labelled_mask[i]).collect();
        let mut unlabelled: Vec<usize> = (0..n).filter(|&i| !labelled_mask[i]).collect();
        labelled.shuffle(&mut r);
        unlabelled.shuffle(&mut r);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut r);

        let mut li = 0usize;
        let mut ui = 0usize;
        let mut ai = 0usize;
        let beta_dist = Beta::new(beta_param, beta_param)
            .map_err(|e| Error::Invalid(format!("bad Beta parameter: {e}")))?;

        let mut entries = Vec::with_capacity(n);
        for anchor in 0..n {
            let preferred = if labelled_mask[anchor] {
                &mut unlabelled
            } else {
                &mut labelled
            };
            let cursor = if labelled_mask[anchor] { &mut ui } else { &mut li };
            let mut partner = None;
            if !preferred.is_empty() {
                for _ in 0..preferred.len() {
                    let cand = preferred[*cursor % preferred.len()];
                    *cursor += 1;
                    if cand != anchor {
                        partner = Some(cand);
                        break;
                    }
                }
            }
            let partner = partner.unwrap_or_else(|| {
                // fall back to the shuffled full batch
                loop {
                    let cand = all[ai % n];
                    ai += 1;
                    if cand != anchor {
                        break cand;
                    }
                }
            });

            let beta: Vec<f64> = (0..n_patches).map(|_| beta_dist.sample(&mut r)).collect();
            let beta_bar = beta.iter().sum::<f64>() / n_patches as f64;
            entries.push(MixEntry {
                partner,
                beta,
                beta_bar,
                alpha: f64::NAN,
            });
        }
        Ok(MixPlan { entries })
    }

    /// Fills `alpha` from the unmixed images' CLS attention maps.
    pub fn set_alphas(&mut self, attention: &[Vec<f64>]) -> Result<()> {
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.alpha = mix_coefficient(&e.beta, &attention[i], &attention[e.partner])?;
        }
        Ok(())
    }
}

/// `row_j = beta_j * a_j + (1 - beta_j) * b_j`.
pub fn mix_patch_embeddings(g: &mut Graph, a: Var, b: Var, beta: &[f64]) -> Result<Var> {
    let (p, d) = g.shape(a);
    if g.shape(b) != (p, d) || beta.len() != p {
        return Err(Error::Invalid(format!(
            "mix shapes disagree: {:?} vs {:?} with {} coefficients",
            g.shape(a),
            g.shape(b),
            beta.len()
        )));
    }
    if beta.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Invalid("beta coefficients outside [0,1]".into()));
    }
    let bcol = g.constant(Mat::from_shape_fn((p, 1), |(i, _)| beta[i]));
    let bb = g.bcast_col(bcol, d);
    let ccol = g.constant(Mat::from_shape_fn((p, 1), |(i, _)| 1.0 - beta[i]));
    let cb = g.bcast_col(ccol, d);
    let wa = g.mul(a, bb);
    let wb = g.mul(b, cb);
    Ok(g.add(wa, wb))
}

/// Attention-weighted semantic share of the anchor:
/// `alpha = <beta, s> / (<beta, s> + <1 - beta, s'>)`.
pub fn mix_coefficient(beta: &[f64], s: &[f64], s_partner: &[f64]) -> Result<f64> {
    if beta.len() != s.len() || s.len() != s_partner.len() {
        return Err(Error::Invalid("attention/beta length mismatch".into()));
    }
    if s.iter().chain(s_partner).any(|&x| x < 0.0) {
        return Err(Error::Invalid("attention scores must be non-negative".into()));
    }
    let num: f64 = beta.iter().zip(s).map(|(b, a)| b * a).sum();
    let den2: f64 = beta
        .iter()
        .zip(s_partner)
        .map(|(b, a)| (1.0 - b) * a)
        .sum();
    let den = num + den2;
    if den <= 0.0 {
        return Err(Error::Invalid(
            "degenerate mixing: both attention masses vanished".into(),
        ));
    }
    Ok(num / den)
}

/// Soft label: `q~ = alpha * q + (1 - alpha) / K`, a distribution again.
pub fn pm_soft_label(q: &[f64], alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0,1]")));
    }
    if q.len() != k {
        return Err(Error::Invalid("label length != K".into()));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > 1e-5 || q.iter().any(|&x| x < 0.0) {
        return Err(Error::Invalid("q must be a distribution".into()));
    }
    Ok(q.iter().map(|&x| alpha * x + (1.0 - alpha) / k as f64).collect())
}

/// Text-side mixing: `t~ = beta_bar * t_anchor + (1 - beta_bar) * t_partner`.
pub fn mix_text(g: &mut Graph, t_anchor: Var, t_partner: Var, beta_bar: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta_bar) {
        return Err(Error::Invalid(format!("beta_bar {beta_bar} outside [0,1]")));
    }
    if g.shape(t_anchor) != g.shape(t_partner) {
        return Err(Error::Invalid("text feature shapes disagree".into()));
    }
    let a = g.mul_scalar(t_anchor, beta_bar);
    let b = g.mul_scalar(t_partner, 1.0 - beta_bar);
    Ok(g.add(a, b))
}
