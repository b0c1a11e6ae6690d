//! Loss builders: instance-contrastive representation loss, prototype
//! classification with cross-view pseudo-labels, mean-entropy
//! regularization, the clustering-baseline composition, the
//! Jensen-Shannon mutual-information estimate, and the vision-language
//! matching and alignment objectives.
//!
//! Targets (pseudo-labels) are plain `f64` distributions computed from
//! current values and inserted as constants, so stop-gradient is
//! structural: the view that produced a target receives exactly zero
//! gradient through it.

use crate::backbone::Bind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamStore, Var};
use crate::heads::Discriminator;

const UNIT_TOL: f64 = 1e-5;

fn require_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    for row in g.value(v).rows() {
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Invalid(format!(
                "{what} rows must be unit norm (found {n})"
            )));
        }
    }
    Ok(())
}

fn require_distribution(q: &[f64], what: &str) -> Result<()> {
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > UNIT_TOL || q.iter().any(|&x| x < 0.0) {
        return Err(Error::Invalid(format!(
            "{what} must be a distribution (sum {s})"
        )));
    }
    Ok(())
}

/// One contrastive anchor: a row index, its positive rows, and a loss
/// weight (1 for plain anchors, the semantic mixing weight for mixed
/// views).
#[derive(Debug, Clone)]
pub struct RepAnchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub weight: f64,
}

impl RepAnchor {
    pub fn new(row: usize, positives: Vec<usize>) -> Self {
        RepAnchor {
            row,
            positives,
            weight: 1.0,
        }
    }
}

/// Instance-contrastive loss over unit-norm features `[R, d]`.
///
/// For each anchor `a`: `-(1/|P|) sum_{p in P} log softmax(f_a . f_p / tau)`
/// where the softmax runs over every other row in the batch (the anchor
/// itself is masked out). The result is the weighted mean over anchors.
pub fn rep_loss(g: &mut Graph, feats: Var, anchors: &[RepAnchor], tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if anchors.is_empty() {
        return Err(Error::Invalid("no anchors".into()));
    }
    require_unit_rows(g, feats, "contrastive features")?;
    let (rows, _) = g.shape(feats);
    for a in anchors {
        if a.positives.is_empty() {
            return Err(Error::Invalid(format!("anchor {} has no positives", a.row)));
        }
        if a.positives.iter().any(|&p| p == a.row || p >= rows) || a.row >= rows {
            return Err(Error::Invalid("anchor/positive rows out of range".into()));
        }
    }

    let ft = g.transpose(feats);
    let sims = g.matmul(feats, ft);
    let logits = g.mul_scalar(sims, 1.0 / tau);
    // mask self-similarity out of every candidate set
    let mask = {
        let mut m = Mat::zeros((rows, rows));
        for i in 0..rows {
            m[[i, i]] = -1e30;
        }
        g.constant(m)
    };
    let masked = g.add(logits, mask);
    let lse = g.lse_rows(masked);

    let na = anchors.len() as f64;
    let mut cvec = Mat::zeros((rows, 1));
    let mut pw = Mat::zeros((rows, rows));
    for a in anchors {
        cvec[[a.row, 0]] += a.weight / na;
        let share = a.weight / (na * a.positives.len() as f64);
        for &p in &a.positives {
            pw[[a.row, p]] += share;
        }
    }
    let c = g.constant(cvec);
    let pwc = g.constant(pw);
    let lse_term = g.mul(c, lse);
    let pos_term = g.mul(pwc, logits);
    let lse_sum = g.sum_all(lse_term);
    let pos_sum = g.sum_all(pos_term);
    Ok(g.sub(lse_sum, pos_sum))
}

/// A classification target: row index plus a distribution over classes.
pub type ClsTarget = (usize, Vec<f64>);

/// Prototype cross-entropy: `-sum_k q_k log softmax(feat . w_k / tau)`,
/// mean over targeted rows. Features and prototype rows must be unit
/// norm; `q` rows must sum to one.
pub fn cls_loss(
    g: &mut Graph,
    feats: Var,
    protos: Var,
    targets: &[ClsTarget],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if targets.is_empty() {
        return Err(Error::Invalid("no classification targets".into()));
    }
    require_unit_rows(g, feats, "classifier features")?;
    require_unit_rows(g, protos, "prototypes")?;
    let (rows, _) = g.shape(feats);
    let k = g.shape(protos).0;
    for (row, q) in targets {
        if *row >= rows || q.len() != k {
            return Err(Error::Invalid("target row/class count mismatch".into()));
        }
        require_distribution(q, "classification target")?;
    }

    let pt = g.transpose(protos);
    let sims = g.matmul(feats, pt);
    let logits = g.mul_scalar(sims, 1.0 / tau);
    let lse = g.lse_rows(logits);

    let na = targets.len() as f64;
    let mut cvec = Mat::zeros((rows, 1));
    let mut qw = Mat::zeros((rows, k));
    for (row, q) in targets {
        cvec[[*row, 0]] += 1.0 / na;
        for (j, &x) in q.iter().enumerate() {
            qw[[*row, j]] += x / na;
        }
    }
    let c = g.constant(cvec);
    let qwc = g.constant(qw);
    let lse_term = g.mul(c, lse);
    let q_term = g.mul(qwc, logits);
    let lse_sum = g.sum_all(lse_term);
    let q_sum = g.sum_all(q_term);
    Ok(g.sub(lse_sum, q_sum))
}

/// Mean-entropy regularizer: `delta = -H(mean prediction)`. Adding
/// `eps * delta` to a loss pushes the batch-mean prediction toward
/// uniform, preventing pseudo-label collapse.
pub fn entropy_reg(g: &mut Graph, preds: Var) -> Result<Var> {
    let (rows, _) = g.shape(preds);
    if rows == 0 {
        return Err(Error::Invalid("empty prediction batch".into()));
    }
    let sums = g.col_sums(preds);
    let mean = g.mul_scalar(sums, 1.0 / rows as f64);
    let plogp = g.xlogx(mean);
    Ok(g.sum_all(plogp))
}

/// Softmax of `row / tau` as plain data (used for detached pseudo-labels).
pub fn sharpen(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = row.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

/// Batch layout for the clustering baseline: `n` samples seen under two
/// views, features stored view-major (`row = view * n + i`).
pub struct TwoViewBatch {
    pub n: usize,
    /// Projected contrastive features, `[2n, d_proj]`, unit rows.
    pub feats_rep: Var,
    /// Normalized backbone features for the classifier, `[2n, d]`.
    pub feats_cls: Var,
    /// Per-sample ground-truth labels; `None` marks unlabelled samples.
    pub labels: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SimGcdWeights {
    pub lambda: f64,
    pub eps: f64,
    pub tau: f64,
    pub tau_sharpen: f64,
}

/// Per-term values of the composed baseline loss, as graph nodes.
pub struct SimGcdParts {
    pub total: Var,
    pub rep_all: Var,
    pub cls_all: Var,
    pub rep_sup: Option<Var>,
    pub cls_sup: Option<Var>,
    pub entropy: Var,
    /// Row-wise class predictions used for the entropy term, `[2n, K]`.
    pub predictions: Var,
}

/// Cross-view positives for every anchor row.
pub fn cross_view_positives(n: usize) -> Vec<RepAnchor> {
    (0..2 * n)
        .map(|row| {
            let (v, i) = (row / n, row % n);
            RepAnchor::new(row, vec![(1 - v) * n + i])
        })
        .collect()
}

/// Supervised positives: all rows sharing the anchor's class (both
/// views), excluding the anchor itself. Only labelled samples anchor.
pub fn supervised_positives(n: usize, labels: &[Option<usize>]) -> Vec<RepAnchor> {
    let mut anchors = Vec::new();
    for row in 0..2 * n {
        let i = row % n;
        let Some(cls) = labels[i] else { continue };
        let positives: Vec<usize> = (0..2 * n)
            .filter(|&r| r != row && labels[r % n] == Some(cls))
            .collect();
        if !positives.is_empty() {
            anchors.push(RepAnchor::new(row, positives));
        }
    }
    anchors
}

/// Cross-view pseudo-labels: for every row, the sharpened prototype
/// prediction of the same sample's other view, as plain (detached) data.
pub fn cross_view_targets(
    g: &Graph,
    feats_cls: Var,
    protos: Var,
    n: usize,
    tau_sharpen: f64,
) -> Vec<ClsTarget> {
    let fc = g.value(feats_cls);
    let pr = g.value(protos);
    let logits = fc.dot(&pr.t());
    (0..2 * n)
        .map(|row| {
            let (v, i) = (row / n, row % n);
            let other = (1 - v) * n + i;
            let q = sharpen(logits.row(other).to_slice().expect("contiguous"), tau_sharpen);
            (row, q)
        })
        .collect()
}

/// The clustering baseline: `lambda * (rep + cls over all) +
/// (1 - lambda) * (supervised rep + cls over labelled) + eps * delta`.
///
/// Unsupervised classification targets are the sharpened predictions of
/// the other view, detached; supervised targets are one-hot labels.
pub fn simgcd_loss(
    g: &mut Graph,
    batch: &TwoViewBatch,
    protos: Var,
    w: &SimGcdWeights,
) -> Result<SimGcdParts> {
    let targets = cross_view_targets(g, batch.feats_cls, protos, batch.n, w.tau_sharpen);
    simgcd_loss_with_targets(g, batch, protos, w, &targets)
}

/// Same composition with the unsupervised targets supplied by the caller
/// (they are data, not graph nodes; the finite-difference suite probes
/// the loss at fixed targets).
pub fn simgcd_loss_with_targets(
    g: &mut Graph,
    batch: &TwoViewBatch,
    protos: Var,
    w: &SimGcdWeights,
    unsup_targets: &[ClsTarget],
) -> Result<SimGcdParts> {
    let n = batch.n;
    if n < 1 || g.shape(batch.feats_rep).0 != 2 * n || g.shape(batch.feats_cls).0 != 2 * n {
        return Err(Error::Invalid("batch needs two views per sample".into()));
    }
    if !(0.0..=1.0).contains(&w.lambda) {
        return Err(Error::Invalid(format!("lambda {} outside [0,1]", w.lambda)));
    }
    if unsup_targets.len() != 2 * n {
        return Err(Error::Invalid("need one target per view row".into()));
    }

    // representation terms
    let unsup = cross_view_positives(n);
    let rep_all = rep_loss(g, batch.feats_rep, &unsup, w.tau)?;
    let sup = supervised_positives(n, &batch.labels);
    let rep_sup = if sup.is_empty() {
        None
    } else {
        Some(rep_loss(g, batch.feats_rep, &sup, w.tau)?)
    };

    let k = g.shape(protos).0;
    let cls_all = cls_loss(g, batch.feats_cls, protos, unsup_targets, w.tau)?;

    let sup_targets: Vec<ClsTarget> = (0..2 * n)
        .filter_map(|row| batch.labels[row % n].map(|cls| (row, one_hot(cls, k))))
        .collect();
    let cls_sup = if sup_targets.is_empty() {
        None
    } else {
        Some(cls_loss(g, batch.feats_cls, protos, &sup_targets, w.tau)?)
    };

    // entropy of the batch-mean prediction
    let pt = g.transpose(protos);
    let sims = g.matmul(batch.feats_cls, pt);
    let logits = g.mul_scalar(sims, 1.0 / w.tau);
    let predictions = g.softmax_rows(logits);
    let entropy = entropy_reg(g, predictions)?;

    let rc_all = g.add(rep_all, cls_all);
    let mut total = g.mul_scalar(rc_all, w.lambda);
    if let (Some(rs), Some(cs)) = (&rep_sup, &cls_sup) {
        let rc_sup = g.add(*rs, *cs);
        let weighted = g.mul_scalar(rc_sup, 1.0 - w.lambda);
        total = g.add(total, weighted);
    }
    let ent_w = g.mul_scalar(entropy, w.eps);
    total = g.add(total, ent_w);

    Ok(SimGcdParts {
        total,
        rep_all,
        cls_all,
        rep_sup,
        cls_sup,
        entropy,
        predictions,
    })
}

/// Core of the Jensen-Shannon mutual-information estimate given joint
/// and shuffled-pair discriminator scores:
/// `mean(-softplus(-D_joint)) + mean(-softplus(D_shuffled))`.
pub fn mi_from_scores(g: &mut Graph, d_joint: Var, d_marginal: Var) -> Var {
    let nj = g.neg(d_joint);
    let sp_j = g.softplus(nj);
    let m_j = g.mean_all(sp_j);
    let sp_m = g.softplus(d_marginal);
    let m_m = g.mean_all(sp_m);
    let s = g.add(m_j, m_m);
    g.neg(s)
}

/// Mutual-information estimate between row-aligned feature batches. The
/// marginal pairing replaces the second feature with `perm`-shuffled rows
/// (a derangement). The encoder minimizes this; the discriminator ascends
/// on it with features detached.
pub fn mi_estimate(
    g: &mut Graph,
    store: &ParamStore,
    disc: &Discriminator,
    h_dom: Var,
    h_sem: Var,
    perm: &[usize],
    mode: Bind,
) -> Result<Var> {
    let (n, _) = g.shape(h_dom);
    if n < 2 {
        return Err(Error::Invalid(
            "mutual information needs at least 2 rows for a derangement".into(),
        ));
    }
    if g.shape(h_sem).0 != n || perm.len() != n {
        return Err(Error::Invalid("misaligned feature batches".into()));
    }
    if perm.iter().enumerate().any(|(i, &p)| p == i || p >= n) {
        return Err(Error::Invalid("perm must be a derangement".into()));
    }
    let joint = g.concat_cols(&[h_dom, h_sem]);
    let shuffled = g.gather_rows(h_sem, perm);
    let marginal = g.concat_cols(&[h_dom, shuffled]);
    let dj = disc.score(g, store, joint, mode)?;
    let dm = disc.score(g, store, marginal, mode)?;
    Ok(mi_from_scores(g, dj, dm))
}

/// Shift-by-one derangement used for training steps.
pub fn shift_derangement(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Cosine matching score between two unit-norm embeddings.
pub fn match_score(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    require_unit_rows(g, a, "matching lhs")?;
    require_unit_rows(g, b, "matching rhs")?;
    let bt = g.transpose(b);
    Ok(g.matmul(a, bt))
}

/// Symmetric-KL alignment between image and text batches given the raw
/// similarity logits `S` (already temperature-scaled): the mean KL
/// between row distributions of `S` and `S^T`, symmetrized and halved.
pub fn vl_align_from_logits(g: &mut Graph, s: Var) -> Result<Var> {
    let (r, c) = g.shape(s);
    if r != c {
        return Err(Error::Invalid(format!(
            "alignment logits must be square, got {r}x{c}"
        )));
    }
    let st = g.transpose(s);
    let l_it = g.log_softmax_rows(s);
    let l_ti = g.log_softmax_rows(st);
    let p_it = g.exp(l_it);
    let p_ti = g.exp(l_ti);

    // KL(p_ti || p_it) rows
    let d1 = g.sub(l_ti, l_it);
    let w1 = g.mul(p_ti, d1);
    let kl1 = g.row_sums(w1);
    let m1 = g.mean_all(kl1);
    // KL(p_it || p_ti) rows
    let d2 = g.sub(l_it, l_ti);
    let w2 = g.mul(p_it, d2);
    let kl2 = g.row_sums(w2);
    let m2 = g.mean_all(kl2);

    let s2 = g.add(m1, m2);
    Ok(g.mul_scalar(s2, 0.5))
}

/// Alignment between unit-norm visual rows `V` and text rows `T`:
/// logits `S = V T^T / tau`, then [`vl_align_from_logits`].
pub fn vl_align_loss(g: &mut Graph, v: Var, t: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if g.shape(v) != g.shape(t) {
        return Err(Error::Invalid(format!(
            "visual {:?} and text {:?} batches differ",
            g.shape(v),
            g.shape(t)
        )));
    }
    let tt = g.transpose(t);
    let s = g.matmul(v, tt);
    let scaled = g.mul_scalar(s, 1.0 / tau);
    vl_align_from_logits(g, scaled)
}
