//! Projection heads, prototype banks, and the mutual-information
//! discriminator.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamGroup, ParamId, ParamStore, Var};
use crate::rng;

use crate::backbone::Bind;

fn gauss(rows: usize, cols: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * rng::normal(r))
}

fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(store, id),
        Bind::Freeze => g.frozen(store, id),
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let rows = g.shape(x).0;
    let h = g.matmul(x, w);
    let bb = g.bcast_row(b, rows);
    g.add(h, bb)
}

/// Three-layer MLP `d -> 2d -> 2d -> d_proj` with GELU, output rows
/// scaled to unit norm.
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Self {
        let h = 2 * in_dim;
        let mut r = rng::rng(seed, "proj-init", &[]);
        ProjectionHead {
            in_dim,
            out_dim,
            w1: store.add(
                format!("{name}.w1"),
                group,
                gauss(in_dim, h, 1.0 / (in_dim as f64).sqrt(), &mut r),
            ),
            b1: store.add(format!("{name}.b1"), group, Mat::zeros((1, h))),
            w2: store.add(
                format!("{name}.w2"),
                group,
                gauss(h, h, 1.0 / (h as f64).sqrt(), &mut r),
            ),
            b2: store.add(format!("{name}.b2"), group, Mat::zeros((1, h))),
            w3: store.add(
                format!("{name}.w3"),
                group,
                gauss(h, out_dim, 1.0 / (h as f64).sqrt(), &mut r),
            ),
            b3: store.add(format!("{name}.b3"), group, Mat::zeros((1, out_dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        if g.shape(x).1 != self.in_dim {
            return Err(Error::Invalid(format!(
                "projection input dim {}, expected {}",
                g.shape(x).1,
                self.in_dim
            )));
        }
        let w1 = bind(g, store, self.w1, mode);
        let b1 = bind(g, store, self.b1, mode);
        let w2 = bind(g, store, self.w2, mode);
        let b2 = bind(g, store, self.b2, mode);
        let w3 = bind(g, store, self.w3, mode);
        let b3 = bind(g, store, self.b3, mode);
        let h1 = linear(g, x, w1, b1);
        let a1 = g.gelu(h1);
        let h2 = linear(g, a1, w2, b2);
        let a2 = g.gelu(h2);
        let h3 = linear(g, a2, w3, b3);
        Ok(g.l2_normalize_rows(h3))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Learnable prototype rows `[K, d]`, normalized at use.
pub struct PrototypeBank {
    pub k: usize,
    pub dim: usize,
    w: ParamId,
}

impl PrototypeBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        k: usize,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::rng(seed, "proto-init", &[]);
        PrototypeBank {
            k,
            dim,
            w: store.add(name, group, gauss(k, dim, 1.0 / (dim as f64).sqrt(), &mut r)),
        }
    }

    /// Unit-norm prototype rows as a graph value.
    pub fn normalized(&self, g: &mut Graph, store: &ParamStore, mode: Bind) -> Var {
        let w = bind(g, store, self.w, mode);
        g.l2_normalize_rows(w)
    }

    pub fn param_id(&self) -> ParamId {
        self.w
    }
}

/// Pairwise scorer for the mutual-information estimator: a three-layer
/// ReLU MLP on concatenated feature pairs, scalar output per row.
pub struct Discriminator {
    pub in_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        pair_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::rng(seed, "disc-init", &[]);
        Discriminator {
            in_dim: pair_dim,
            w1: store.add(
                format!("{name}.w1"),
                group,
                gauss(pair_dim, hidden, 1.0 / (pair_dim as f64).sqrt(), &mut r),
            ),
            b1: store.add(format!("{name}.b1"), group, Mat::zeros((1, hidden))),
            w2: store.add(
                format!("{name}.w2"),
                group,
                gauss(hidden, hidden, 1.0 / (hidden as f64).sqrt(), &mut r),
            ),
            b2: store.add(format!("{name}.b2"), group, Mat::zeros((1, hidden))),
            w3: store.add(
                format!("{name}.w3"),
                group,
                gauss(hidden, 1, 1.0 / (hidden as f64).sqrt(), &mut r),
            ),
            b3: store.add(format!("{name}.b3"), group, Mat::zeros((1, 1))),
        }
    }

    /// Scores `[N, pair_dim]` rows into `[N, 1]`.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, pairs: Var, mode: Bind) -> Result<Var> {
        if g.shape(pairs).1 != self.in_dim {
            return Err(Error::Invalid(format!(
                "discriminator input dim {}, expected {}",
                g.shape(pairs).1,
                self.in_dim
            )));
        }
        let w1 = bind(g, store, self.w1, mode);
        let b1 = bind(g, store, self.b1, mode);
        let w2 = bind(g, store, self.w2, mode);
        let b2 = bind(g, store, self.b2, mode);
        let w3 = bind(g, store, self.w3, mode);
        let b3 = bind(g, store, self.b3, mode);
        let h1 = linear(g, pairs, w1, b1);
        let a1 = g.relu(h1);
        let h2 = linear(g, a1, w2, b2);
        let a2 = g.relu(h2);
        Ok(linear(g, a2, w3, b3))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_output_is_unit_norm() {
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "h", ParamGroup::Heads, 16, 8, 3);
        let mut g = Graph::new();
        let mut r = rng::rng(4, "x", &[]);
        let x = g.constant(Mat::from_shape_fn((5, 16), |_| rng::normal(&mut r)));
        let y = head.forward(&mut g, &store, x, Bind::Freeze).unwrap();
        for row in g.value(y).rows() {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn prototype_rows_are_unit_norm_at_use() {
        let mut store = ParamStore::new();
        let bank = PrototypeBank::new(&mut store, "w", ParamGroup::Prototypes, 6, 12, 5);
        // scale the raw parameter arbitrarily; normalization is at use
        store.value_mut(bank.param_id()).mapv_inplace(|x| 7.3 * x);
        let mut g = Graph::new();
        let w = bank.normalized(&mut g, &store, Bind::Freeze);
        for row in g.value(w).rows() {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn discriminator_outputs_finite_scalars() {
        let mut store = ParamStore::new();
        let d = Discriminator::new(&mut store, "d", ParamGroup::Discriminator, 8, 16, 6);
        let mut g = Graph::new();
        let mut r = rng::rng(7, "x", &[]);
        let x = g.constant(Mat::from_shape_fn((9, 8), |_| rng::normal(&mut r)));
        let s = d.score(&mut g, &store, x, Bind::Freeze).unwrap();
        assert_eq!(g.shape(s), (9, 1));
        assert!(g.value(s).iter().all(|x| x.is_finite()));
    }
}
