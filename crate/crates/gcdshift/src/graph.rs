//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything trainable in this crate is a 2-D array. A [`Graph`] is a
//! per-step tape: parameters are bound into it from a [`ParamStore`],
//! ops append nodes, `backward` walks the tape in reverse, and the
//! gradients flow back out keyed by [`ParamId`] so an optimizer can
//! apply them to whichever parameter groups are active.
//!
//! The tape is rebuilt every step. That keeps stop-gradient semantics
//! trivial (insert a value as a constant and it is structurally outside
//! the tape) and makes "frozen" parameters exact: a parameter bound via
//! [`Graph::frozen`] has an identically zero gradient, not a small one.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Handle to a parameter in a [`ParamStore`]. Stable across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// Optimizer grouping. A training phase activates a subset of groups;
/// everything else is left bit-for-bit untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Heads,
    Prototypes,
    Discriminator,
    SpatialPrompt,
    TextPrompt,
    /// Never trained; bound into graphs as constants.
    Frozen,
}

pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

/// Flat, named parameter storage shared by all model components.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() as u32 - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0 as usize].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0 as usize].group
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    /// Total scalar count across a group.
    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    BcastCol(Var),
    BcastRow(Var),
    RowSums(Var),
    ColSums(Var),
    SoftmaxRows(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    XLogX(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Rearranges a flat `[1, n]` pixel row into `[rows, cols]` patch
    /// rows through a fixed index map (`map_id` into `Graph::index_maps`).
    Scatter(Var, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// One step's computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
    index_maps: Vec<Vec<usize>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            bound: Vec::new(),
            index_maps: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0 as usize].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let v = self.value(v);
        (v.nrows(), v.ncols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on non 1x1 value");
        m[[0, 0]]
    }

    /// Insert a value without gradient tracking.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Bind a trainable parameter; its gradient is collected by `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, store.value(id).clone(), true);
        self.bound.push((id, v));
        v
    }

    /// Bind a parameter as a constant. Used for frozen weights and for
    /// stop-gradient paths: the gradient is exactly zero by construction.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Copy a node's current value back in as a constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = self.value(a) / self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        let g = self.ng(a);
        self.push(Op::Neg(a), v, g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let g = self.ng(a);
        self.push(Op::AddScalar(a), v, g)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.ng(a);
        self.push(Op::MulScalar(a, c), v, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} . {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), v, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let g = self.ng(a);
        self.push(Op::Transpose(a), v, g)
    }

    /// Tile a column vector `[R,1]` across `cols` columns.
    pub fn bcast_col(&mut self, a: Var, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "bcast_col wants [R,1]");
        let src = self.value(a);
        let mut v = Mat::zeros((r, cols));
        for i in 0..r {
            let x = src[[i, 0]];
            v.row_mut(i).fill(x);
        }
        let g = self.ng(a);
        self.push(Op::BcastCol(a), v, g)
    }

    /// Tile a row vector `[1,C]` across `rows` rows.
    pub fn bcast_row(&mut self, a: Var, rows: usize) -> Var {
        let (r, _c) = self.shape(a);
        assert_eq!(r, 1, "bcast_row wants [1,C]");
        let src = self.value(a).row(0).to_owned();
        let mut v = Mat::zeros((rows, src.len()));
        for mut row in v.rows_mut() {
            row.assign(&src);
        }
        let g = self.ng(a);
        self.push(Op::BcastRow(a), v, g)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1));
        let v = s.insert_axis(Axis(1));
        let g = self.ng(a);
        self.push(Op::RowSums(a), v, g)
    }

    pub fn col_sums(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(0));
        let v = s.insert_axis(Axis(0));
        let g = self.ng(a);
        self.push(Op::ColSums(a), v, g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let g = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let g = self.ng(a);
        self.push(Op::Exp(a), v, g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let g = self.ng(a);
        self.push(Op::Log(a), v, g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let g = self.ng(a);
        self.push(Op::Sqrt(a), v, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let g = self.ng(a);
        self.push(Op::Relu(a), v, g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let g = self.ng(a);
        self.push(Op::Gelu(a), v, g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus_stable);
        let g = self.ng(a);
        self.push(Op::Softplus(a), v, g)
    }

    /// `x ln x` with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x * x.ln() } else { 0.0 });
        let g = self.ng(a);
        self.push(Op::XLogX(a), v, g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let g = self.ng(a);
        self.push(Op::SliceRows(a, start), v, g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let g = self.ng(a);
        self.push(Op::SliceCols(a, start), v, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let block = self.value(p);
            v.slice_mut(ndarray::s![at..at + block.nrows(), ..])
                .assign(block);
            at += block.nrows();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let block = self.value(p);
            v.slice_mut(ndarray::s![.., at..at + block.ncols()])
                .assign(block);
            at += block.ncols();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    /// Select rows by index (duplicates allowed; backward scatter-adds).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (out, &i) in idx.iter().enumerate() {
            v.row_mut(out).assign(&src.row(i));
        }
        let g = self.ng(a);
        self.push(Op::GatherRows(a, idx.to_vec()), v, g)
    }

    /// Register an index map for [`Graph::scatter`]. `map[out] = in_index`.
    pub fn register_index_map(&mut self, map: Vec<usize>) -> usize {
        self.index_maps.push(map);
        self.index_maps.len() - 1
    }

    /// Rearrange a `[1, n]` row into `[rows, cols]` where output element
    /// `(r, c)` reads input element `map[r*cols + c]`. The map must be a
    /// permutation-like selection (indices may repeat; backward adds).
    pub fn scatter(&mut self, a: Var, map_id: usize, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), 1, "scatter wants a [1,n] input");
        let map = &self.index_maps[map_id];
        assert_eq!(map.len(), rows * cols);
        let flat = src.row(0);
        let mut v = Mat::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                v[[r, c]] = flat[map[r * cols + c]];
            }
        }
        let g = self.ng(a);
        self.push(Op::Scatter(a, map_id), v, g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let g = self.ng(a);
        self.push(Op::SumAll(a), v, g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = Mat::from_elem((1, 1), self.value(a).sum() / n);
        let g = self.ng(a);
        self.push(Op::MeanAll(a), v, g)
    }

    // ---- composites ------------------------------------------------------

    /// Row-wise log-sum-exp, `[R,C] -> [R,1]`, max-shifted for stability.
    /// The shift is inserted as a constant, which leaves gradients exact.
    pub fn lse_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        let maxes = {
            let m = self.value(a);
            let mut out = Mat::zeros((r, 1));
            for i in 0..r {
                out[[i, 0]] = m.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            }
            out
        };
        let m = self.constant(maxes);
        let cols = self.shape(a).1;
        let mb = self.bcast_col(m, cols);
        let shifted = self.sub(a, mb);
        let e = self.exp(shifted);
        let s = self.row_sums(e);
        let l = self.log(s);
        self.add(l, m)
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let sq = self.mul(a, a);
        let n2 = self.row_sums(sq);
        let n2e = self.add_scalar(n2, 1e-24);
        let n = self.sqrt(n2e);
        let nb = self.bcast_col(n, cols);
        self.div(a, nb)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (_, cols) = self.shape(a);
        let lse = self.lse_rows(a);
        let lb = self.bcast_col(lse, cols);
        self.sub(a, lb)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Returns per-parameter gradients
    /// for every parameter bound with [`Graph::param`]; parameters that did
    /// not influence the loss get a zero gradient entry omitted.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Mat)>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid("backward target must be scalar".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0 as usize] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Vec::new();
        for &(id, var) in &self.bound {
            if let Some(g) = grads[var.0 as usize].take() {
                out.push((id, g));
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0 as usize] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g * self.value(*b));
                self.accum(grads, *b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accum(grads, *a, g / bv);
                let num = g * self.value(*a);
                self.accum(grads, *b, -(&num) / &(bv * bv));
            }
            Op::Neg(a) => self.accum(grads, *a, -g),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.accum(grads, *a, g * *c),
            Op::Matmul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Transpose(a) => self.accum(grads, *a, g.t().to_owned()),
            Op::BcastCol(a) => {
                let d = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accum(grads, *a, d);
            }
            Op::BcastRow(a) => {
                let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(grads, *a, d);
            }
            Op::RowSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros((r, c));
                for i in 0..r {
                    d.row_mut(i).fill(g[[i, 0]]);
                }
                self.accum(grads, *a, d);
            }
            Op::ColSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros((r, c));
                for j in 0..c {
                    d.column_mut(j).fill(g[[0, j]]);
                }
                self.accum(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = &gy - &(y * &dot);
                self.accum(grads, *a, d);
            }
            Op::Exp(a) => self.accum(grads, *a, g * &node.value),
            Op::Log(a) => self.accum(grads, *a, g / self.value(*a)),
            Op::Sqrt(a) => {
                let d = g * &node.value.mapv(|y| 0.5 / y);
                self.accum(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g * &node.value.mapv(|y| 1.0 - y * y);
                self.accum(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g * &self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                self.accum(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g * &self.value(*a).mapv(sigmoid_stable);
                self.accum(grads, *a, d);
            }
            Op::XLogX(a) => {
                let d = g * &self
                    .value(*a)
                    .mapv(|x| if x > 0.0 { x.ln() + 1.0 } else { 0.0 });
                self.accum(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros((r, c));
                d.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                    .assign(g);
                self.accum(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros((r, c));
                d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                self.accum(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let d = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    self.accum(grads, p, d);
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    let d = g.slice(ndarray::s![.., at..at + cols]).to_owned();
                    self.accum(grads, p, d);
                    at += cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros((r, c));
                for (out, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(out);
                }
                self.accum(grads, *a, d);
            }
            Op::Scatter(a, map_id) => {
                let (r, c) = self.shape(*a);
                let map = &self.index_maps[*map_id];
                let mut d = Mat::zeros((r, c));
                {
                    let mut flat = d.row_mut(0);
                    let cols = g.ncols();
                    for rr in 0..g.nrows() {
                        for cc in 0..cols {
                            flat[map[rr * cols + cc]] += g[[rr, cc]];
                        }
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accum(grads, *a, Mat::from_elem((r, c), g[[0, 0]]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c) as f64;
                self.accum(grads, *a, Mat::from_elem((r, c), g[[0, 0]] / n));
            }
        }
    }
}

/// Per-parameter gradient accumulator across several backward passes.
pub struct GradAccum {
    grads: Vec<Option<Mat>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn absorb(&mut self, grads: Vec<(ParamId, Mat)>) {
        for (id, g) in grads {
            match &mut self.grads[id.0 as usize] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0 as usize].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// SGD with classical momentum, per-group learning rates, and global-norm
/// gradient clipping over the updated set.
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Option<Mat>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: (0..store.len()).map(|_| None).collect(),
        }
    }

    /// Applies one update. `lr_of` returns `None` for groups that must not
    /// move this step; their parameters and momentum stay bit-identical.
    /// Returns the pre-clip global gradient norm over the active set.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        accum: &GradAccum,
        lr_of: impl Fn(ParamGroup) -> Option<f64>,
        clip: Option<f64>,
    ) -> f64 {
        let active: Vec<(ParamId, f64)> = store
            .ids()
            .filter_map(|id| {
                let lr = lr_of(store.group(id))?;
                accum.get(id)?;
                Some((id, lr))
            })
            .collect();

        let mut norm_sq = 0.0;
        for &(id, _) in &active {
            let g = accum.get(id).unwrap();
            norm_sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        for &(id, lr) in &active {
            let g = accum.get(id).unwrap();
            let slot = &mut self.velocity[id.0 as usize];
            let v = slot.get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, g| *v = self.momentum * *v + g * scale);
            store.value_mut(id).zip_mut_with(v, |p, v| *p -= lr * v);
        }
        norm
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Mat> {
        self.velocity[id.0 as usize].as_ref()
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Mat) {
        self.velocity[id.0 as usize] = Some(v);
    }
}
