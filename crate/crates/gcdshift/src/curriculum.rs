//! Pseudo-domain partitioning of the unlabelled pool and
//! curriculum-weighted batch sampling.
//!
//! Unlabelled samples are split into labelled-domain-like and
//! new-domain-like clusters by semi-supervised 2-means over a domain
//! representation (either the model's low-level projected feature or the
//! pooled amplitude spectrum). Sampling weights then stage new-domain
//! samples in after a warmup epoch.

use std::collections::BTreeMap;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRepKind {
    /// Low-level projected feature from the current model.
    BackboneFeature,
    /// Pooled amplitude spectrum of the grayscale image.
    FftAmplitude,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// New-domain sampling weight before the ramp epoch.
    pub r0: f64,
    /// New-domain sampling weight after it.
    pub r_prime: f64,
    /// Ramp epoch; the weight switches strictly after it.
    pub t_prime: u64,
    pub domain_rep_kind: DomainRepKind,
    /// Recompute the partition from fresh features every epoch.
    pub refresh_per_epoch: bool,
}

impl CurriculumConfig {
    /// Corruption-style preset: new-domain samples stay out until late.
    pub fn corruption_preset() -> Self {
        CurriculumConfig {
            r0: 0.0,
            r_prime: 0.05,
            t_prime: 80,
            domain_rep_kind: DomainRepKind::FftAmplitude,
            refresh_per_epoch: false,
        }
    }

    /// Style-gap preset: new-domain samples enter at full weight.
    pub fn style_preset() -> Self {
        CurriculumConfig {
            r0: 0.0,
            r_prime: 1.0,
            t_prime: 80,
            domain_rep_kind: DomainRepKind::FftAmplitude,
            refresh_per_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r0 < 0.0 || self.r_prime < 0.0 {
            return Err(Error::Config("curriculum weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Labelled,
    /// Unlabelled, clustered with the labelled domain.
    ClusterA,
    /// Unlabelled, clustered away from it.
    ClusterB,
}

/// The frozen pseudo-domain partition plus schedule constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumState {
    pub assignment: BTreeMap<u64, Membership>,
    pub n_labelled: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub config: CurriculumConfig,
}

impl CurriculumState {
    pub fn new(
        labelled: &[u64],
        cluster_a: &[u64],
        cluster_b: &[u64],
        config: CurriculumConfig,
    ) -> Self {
        let mut assignment = BTreeMap::new();
        for &id in labelled {
            assignment.insert(id, Membership::Labelled);
        }
        for &id in cluster_a {
            assignment.insert(id, Membership::ClusterA);
        }
        for &id in cluster_b {
            assignment.insert(id, Membership::ClusterB);
        }
        CurriculumState {
            assignment,
            n_labelled: labelled.len(),
            n_a: cluster_a.len(),
            n_b: cluster_b.len(),
            config,
        }
    }

    /// Sampling weight of a sample at epoch `t`: labelled samples weigh 1,
    /// labelled-domain-like samples `|D_l| / |D_a|`, new-domain-like
    /// samples `r0` before the ramp and `r'` strictly after it.
    pub fn weight(&self, sample_id: u64, t: u64) -> Result<f64> {
        let m = self
            .assignment
            .get(&sample_id)
            .ok_or_else(|| Error::Invalid(format!("sample {sample_id} not in curriculum")))?;
        Ok(match m {
            Membership::Labelled => 1.0,
            Membership::ClusterA => {
                if self.n_a == 0 {
                    // impossible once a sample maps to the cluster, but
                    // guarded rather than divided through
                    return Err(Error::Invalid("cluster A empty yet populated".into()));
                }
                self.n_labelled as f64 / self.n_a as f64
            }
            Membership::ClusterB => {
                let c = &self.config;
                c.r0 + (c.r_prime - c.r0) * if t > c.t_prime { 1.0 } else { 0.0 }
            }
        })
    }

    /// Inspection dump: `{sample_id: "labelled" | "a" | "b"}`.
    pub fn dump_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .assignment
            .iter()
            .map(|(id, m)| {
                let tag = match m {
                    Membership::Labelled => "labelled",
                    Membership::ClusterA => "a",
                    Membership::ClusterB => "b",
                };
                (id.to_string(), serde_json::Value::String(tag.into()))
            })
            .collect();
        serde_json::Value::Object(map)
    }
}

// ---- domain representations ------------------------------------------------

/// Pooled amplitude spectrum of a grayscale image: 2-D DFT amplitude,
/// mirrored frequency bins folded together (making the vector invariant
/// to horizontal/vertical flips), then averaged into an 8x8 grid.
pub fn fft_amplitude_rep(gray: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if gray.len() != h * w || h < 8 || w < 8 {
        return Err(Error::Invalid(format!(
            "grayscale {}x{} unsupported for spectral pooling",
            h, w
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut data: Vec<Complex<f64>> = gray.iter().map(|&x| Complex::new(x, 0.0)).collect();
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }

    let amp = |u: usize, v: usize| data[u * w + v].norm();
    // fold the v-mirror; with the Hermitian symmetry of real input this
    // also symmetrizes the u-axis
    let folded = |u: usize, v: usize| 0.5 * (amp(u, v) + amp(u, (w - v) % w));

    let mut sums = vec![0.0f64; 64];
    let mut counts = vec![0usize; 64];
    for u in 0..h {
        for v in 0..w {
            let bu = u * 8 / h;
            let bv = v * 8 / w;
            sums[bu * 8 + bv] += folded(u, v);
            counts[bu * 8 + bv] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}

// ---- semi-supervised 2-means -------------------------------------------------

#[derive(Debug, Clone)]
pub struct SsKmeansResult {
    /// Per unlabelled point: true if it joined the labelled-domain cluster.
    pub in_cluster_a: Vec<bool>,
    /// Pinned within-cluster squared error after each update.
    pub objective_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations with every labelled point pinned to cluster 0.
/// Cluster 0 starts at the labelled mean; cluster 1 at the unlabelled
/// point farthest from it. Ties assign to cluster 0. Deterministic.
pub fn ss_kmeans(
    labelled: &[Vec<f64>],
    unlabelled: &[Vec<f64>],
    max_iters: usize,
) -> Result<SsKmeansResult> {
    if labelled.is_empty() {
        return Err(Error::Invalid("need at least one labelled point".into()));
    }
    let dim = labelled[0].len();
    if labelled.iter().chain(unlabelled).any(|v| v.len() != dim) {
        return Err(Error::Invalid("inconsistent feature dimensions".into()));
    }
    let mut c0 = vec![0.0; dim];
    for v in labelled {
        for (c, x) in c0.iter_mut().zip(v) {
            *c += x / labelled.len() as f64;
        }
    }
    if unlabelled.is_empty() {
        return Ok(SsKmeansResult {
            in_cluster_a: vec![],
            objective_trace: vec![0.0],
        });
    }
    let far = unlabelled
        .iter()
        .enumerate()
        .max_by(|a, b| {
            dist2(a.1, &c0)
                .partial_cmp(&dist2(b.1, &c0))
                .unwrap()
                .then(b.0.cmp(&a.0)) // lowest index wins ties
        })
        .map(|(i, _)| i)
        .unwrap();
    let mut c1 = unlabelled[far].clone();

    let mut assign = vec![true; unlabelled.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, v) in unlabelled.iter().enumerate() {
            let a = dist2(v, &c0) <= dist2(v, &c1);
            if a != assign[i] {
                changed = true;
            }
            assign[i] = a;
        }
        // means; an emptied cluster keeps its previous center
        let mut n0 = labelled.len();
        let mut s0 = vec![0.0; dim];
        for v in labelled {
            for (s, x) in s0.iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut n1 = 0usize;
        let mut s1 = vec![0.0; dim];
        for (i, v) in unlabelled.iter().enumerate() {
            if assign[i] {
                n0 += 1;
                for (s, x) in s0.iter_mut().zip(v) {
                    *s += x;
                }
            } else {
                n1 += 1;
                for (s, x) in s1.iter_mut().zip(v) {
                    *s += x;
                }
            }
        }
        for s in s0.iter_mut() {
            *s /= n0 as f64;
        }
        c0 = s0;
        if n1 > 0 {
            for s in s1.iter_mut() {
                *s /= n1 as f64;
            }
            c1 = s1;
        }

        let mut obj = 0.0;
        for v in labelled {
            obj += dist2(v, &c0);
        }
        for (i, v) in unlabelled.iter().enumerate() {
            obj += dist2(v, if assign[i] { &c0 } else { &c1 });
        }
        trace.push(obj);
        if !changed && trace.len() > 1 {
            break;
        }
    }
    Ok(SsKmeansResult {
        in_cluster_a: assign,
        objective_trace: trace,
    })
}

// ---- batch sampling ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub labelled: Vec<u64>,
    pub unlabelled: Vec<u64>,
    /// Set when the positive-weight pool was smaller than the half-batch
    /// and sampling fell back to replacement.
    pub replacement_used: bool,
}

fn weighted_draw_without_replacement(
    pool: &[(u64, f64)],
    count: usize,
    r: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<u64>, bool) {
    use rand::Rng;
    let mut positive: Vec<(u64, f64)> = pool.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    if positive.len() < count {
        // not enough distinct mass: draw with replacement and flag it
        let total: f64 = positive.iter().map(|&(_, w)| w).sum();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut x = r.gen_range(0.0..total);
            let mut chosen = positive[positive.len() - 1].0;
            for &(id, w) in &positive {
                if x < w {
                    chosen = id;
                    break;
                }
                x -= w;
            }
            out.push(chosen);
        }
        return (out, true);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = positive.iter().map(|&(_, w)| w).sum();
        let mut x = r.gen_range(0.0..total);
        let mut idx = positive.len() - 1;
        for (i, &(_, w)) in positive.iter().enumerate() {
            if x < w {
                idx = i;
                break;
            }
            x -= w;
        }
        out.push(positive.swap_remove(idx).0);
    }
    (out, false)
}

/// Draws a training batch: `batch_size / 2` labelled ids uniformly and
/// `batch_size / 2` unlabelled ids by weight, both without replacement
/// when the pools allow it. Deterministic per seed.
pub fn draw_batch(
    labelled_ids: &[u64],
    unlabelled_weights: &[(u64, f64)],
    batch_size: usize,
    seed: u64,
) -> Result<BatchDraw> {
    if batch_size % 2 != 0 || batch_size == 0 {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} must be even and positive"
        )));
    }
    let half = batch_size / 2;
    if labelled_ids.is_empty() {
        return Err(Error::Invalid("no labelled samples to draw".into()));
    }
    let total_w: f64 = unlabelled_weights
        .iter()
        .map(|&(_, w)| w.max(0.0))
        .sum();
    if total_w <= 0.0 {
        return Err(Error::Invalid(
            "all unlabelled sampling weights are zero".into(),
        ));
    }

    let mut r = rng::rng(seed, "draw-batch", &[]);
    let uniform: Vec<(u64, f64)> = labelled_ids.iter().map(|&id| (id, 1.0)).collect();
    let (labelled, l_repl) = weighted_draw_without_replacement(&uniform, half, &mut r);
    let (unlabelled, u_repl) = weighted_draw_without_replacement(unlabelled_weights, half, &mut r);
    Ok(BatchDraw {
        labelled,
        unlabelled,
        replacement_used: l_repl || u_repl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata;

    fn state(n_l: usize, n_a: usize, n_b: usize, cfg: CurriculumConfig) -> CurriculumState {
        let labelled: Vec<u64> = (0..n_l as u64).collect();
        let a: Vec<u64> = (n_l as u64..(n_l + n_a) as u64).collect();
        let b: Vec<u64> = ((n_l + n_a) as u64..(n_l + n_a + n_b) as u64).collect();
        CurriculumState::new(&labelled, &a, &b, cfg)
    }

    #[test]
    fn weight_table_is_exhaustively_correct() {
        let cfg = CurriculumConfig::corruption_preset(); // r0=0, r'=0.05, t'=80
        let st = state(32, 128, 64, cfg);
        for t in [0, 40, 79, 80] {
            assert_eq!(st.weight(0, t).unwrap(), 1.0);
            assert_eq!(st.weight(32, t).unwrap(), 0.25); // 32/128
            assert_eq!(st.weight(160, t).unwrap(), 0.0); // strict: t <= t'
        }
        for t in [81, 100, 10_000] {
            assert_eq!(st.weight(0, t).unwrap(), 1.0);
            assert_eq!(st.weight(32, t).unwrap(), 0.25);
            assert_eq!(st.weight(160, t).unwrap(), 0.05);
        }

        let style = CurriculumConfig::style_preset(); // r'=1
        let st2 = state(4, 8, 8, style);
        assert_eq!(st2.weight(4, 81).unwrap(), 0.5);
        assert_eq!(st2.weight(12, 81).unwrap(), 1.0);
        assert_eq!(st2.weight(12, 80).unwrap(), 0.0);

        assert!(st.weight(9_999, 0).is_err());
    }

    #[test]
    fn kmeans_identical_points_collapse_to_cluster_a() {
        let l = vec![vec![1.0, 2.0]; 3];
        let u = vec![vec![1.0, 2.0]; 5];
        let res = ss_kmeans(&l, &u, 50).unwrap();
        assert!(res.in_cluster_a.iter().all(|&x| x));
    }

    #[test]
    fn kmeans_1d_example_separates_far_points() {
        let l = vec![vec![0.0], vec![0.1]];
        let u = vec![vec![0.05], vec![5.0], vec![5.1]];
        let res = ss_kmeans(&l, &u, 50).unwrap();
        assert_eq!(res.in_cluster_a, vec![true, false, false]);
    }

    #[test]
    fn kmeans_objective_is_monotone_nonincreasing() {
        for seed in 0..20u64 {
            let mut r = rng::rng(seed, "km", &[]);
            let l: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..6).map(|_| rng::normal(&mut r)).collect())
                .collect();
            let u: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..6).map(|_| 2.0 * rng::normal(&mut r)).collect())
                .collect();
            let res = ss_kmeans(&l, &u, 100).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "seed {seed}: objective rose {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut r = rng::rng(3, "det", &[]);
        let l: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let u: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..8).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let a = ss_kmeans(&l, &u, 100).unwrap();
        let b = ss_kmeans(&l, &u, 100).unwrap();
        assert_eq!(a.in_cluster_a, b.in_cluster_a);
    }

    #[test]
    fn fft_rep_of_constant_image_is_dc_dominated() {
        let gray = vec![0.5; 32 * 32];
        let rep = fft_amplitude_rep(&gray, 32, 32).unwrap();
        assert_eq!(rep.len(), 64);
        let (argmax, max) = rep
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &v)| (i, v))
            .unwrap();
        assert_eq!(argmax, 0, "DC pool bin must dominate");
        let rest: f64 = rep.iter().skip(1).sum();
        assert!(max > 10.0 * rest.max(1e-12));
    }

    #[test]
    fn fft_rep_is_flip_invariant() {
        let img = synthdata::render_glyph(5, (32, 32), 11);
        let gray = synthdata::grayscale(&img, (32, 32));
        let mut flipped = vec![0.0; 32 * 32];
        for r in 0..32 {
            for c in 0..32 {
                flipped[r * 32 + c] = gray[r * 32 + (31 - c)];
            }
        }
        let a = fft_amplitude_rep(&gray, 32, 32).unwrap();
        let b = fft_amplitude_rep(&flipped, 32, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    /// On the synthetic photometric shift, pinned 2-means over spectral
    /// features must recover the true domains almost perfectly.
    #[test]
    fn pseudo_domains_recover_true_domains() {
        let gen = synthdata::GenConfig {
            k: 8,
            n_per_class_per_domain: 8,
            image_shape: [3, 32, 32],
            seed: 21,
        };
        let split = synthdata::SplitSpec::first_n_base(4, 8, 0.5);
        let ds = synthdata::make_dataset(&gen, &split, "dom").unwrap();
        let (dl, du) = synthdata::split_ids(&ds.manifest, &split).unwrap();
        let rep = |id: u64| {
            let idx = ds.index_of(id);
            let gray = synthdata::grayscale(&ds.images[idx], (32, 32));
            fft_amplitude_rep(&gray, 32, 32).unwrap()
        };
        let l: Vec<Vec<f64>> = dl.iter().map(|&id| rep(id)).collect();
        let u: Vec<Vec<f64>> = du.iter().map(|&id| rep(id)).collect();
        let res = ss_kmeans(&l, &u, 100).unwrap();
        let mut agree = 0usize;
        for (i, &id) in du.iter().enumerate() {
            let truth_a = ds.manifest.records[id as usize].domain_id == 0;
            if truth_a == res.in_cluster_a[i] {
                agree += 1;
            }
        }
        // 2-cluster agreement up to relabeling
        let frac = agree.max(du.len() - agree) as f64 / du.len() as f64;
        assert!(frac >= 0.9, "domain recovery {frac}");
    }

    #[test]
    fn draw_batch_respects_zero_weights_and_determinism() {
        let labelled: Vec<u64> = (0..10).collect();
        let weights: Vec<(u64, f64)> = (10..30)
            .map(|id| (id, if id < 20 { 1.0 } else { 0.0 }))
            .collect();
        let a = draw_batch(&labelled, &weights, 8, 5).unwrap();
        let b = draw_batch(&labelled, &weights, 8, 5).unwrap();
        assert_eq!(a.labelled, b.labelled);
        assert_eq!(a.unlabelled, b.unlabelled);
        assert!(a.unlabelled.iter().all(|&id| id < 20), "zero-weight drawn");
        assert!(!a.replacement_used);
        // without replacement within a draw
        let mut u = a.unlabelled.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 4);

        assert!(draw_batch(&labelled, &weights, 7, 5).is_err());
    }

    #[test]
    fn draw_batch_single_positive_weight_always_present() {
        let labelled: Vec<u64> = (0..4).collect();
        let mut weights: Vec<(u64, f64)> = (4..10).map(|id| (id, 0.0)).collect();
        weights[2].1 = 1.0; // id 6
        for seed in 0..20 {
            let d = draw_batch(&labelled, &weights, 2, seed).unwrap();
            assert_eq!(d.unlabelled, vec![6]);
        }
        // half-batch larger than the positive pool: replacement flagged
        let d = draw_batch(&labelled, &weights, 4, 3).unwrap();
        assert!(d.replacement_used);
        assert!(d.unlabelled.iter().all(|&id| id == 6));
    }

    #[test]
    fn draw_batch_uniform_weights_pass_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let labelled: Vec<u64> = (0..8).collect();
        let weights: Vec<(u64, f64)> = (8..28).map(|id| (id, 1.0)).collect();
        let mut counts = vec![0f64; 20];
        let draws = 10_000;
        for seed in 0..draws {
            let d = draw_batch(&labelled, &weights, 8, seed).unwrap();
            for id in d.unlabelled {
                counts[(id - 8) as usize] += 1.0;
            }
        }
        let expected = (draws * 4) as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new(19.0).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi-square p = {p}, chi2 = {chi2}");
    }

    #[test]
    fn assignment_dump_has_expected_tags() {
        let cfg = CurriculumConfig::corruption_preset();
        let st = state(1, 1, 1, cfg);
        let dump = st.dump_json();
        assert_eq!(dump["0"], "labelled");
        assert_eq!(dump["1"], "a");
        assert_eq!(dump["2"], "b");
    }
}
