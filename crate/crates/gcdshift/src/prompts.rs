//! Learnable prompts and the alternating-phase schedule.
//!
//! Three prompt kinds:
//! - a shared foreground vector added to masked patch embeddings
//!   (mask from the spectral foreground detector),
//! - a pixel-space prompt gated by a patch-periodic boundary mask that
//!   leaves every patch interior untouched,
//! - factorized text prompts: shared context tokens concatenated with a
//!   per-category token block, pushed through the frozen text encoder.

use serde::{Deserialize, Serialize};

use crate::backbone::{Bind, TextEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamGroup, ParamId, ParamStore, Var};
use crate::rng;

fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(store, id),
        Bind::Freeze => g.frozen(store, id),
    }
}

// ---- semantic-aware spatial prompt ---------------------------------------

/// One shared foreground vector `[1, d]`, added to patch embeddings where
/// the mask is set.
pub struct ForegroundPrompt {
    pub dim: usize,
    q_fg: ParamId,
}

impl ForegroundPrompt {
    pub fn new(store: &mut ParamStore, dim: usize, init_zero: bool, seed: u64) -> Self {
        let value = if init_zero {
            Mat::zeros((1, dim))
        } else {
            let mut r = rng::rng(seed, "fg-prompt", &[]);
            Mat::from_shape_fn((1, dim), |_| 0.02 * rng::normal(&mut r))
        };
        ForegroundPrompt {
            dim,
            q_fg: store.add("prompt.q_fg", ParamGroup::SpatialPrompt, value),
        }
    }

    /// `row_j += mask_j * q_fg`.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        mask: &[bool],
        mode: Bind,
    ) -> Result<Var> {
        let (p, d) = g.shape(patches);
        if d != self.dim || mask.len() != p {
            return Err(Error::Invalid(format!(
                "prompt dim {} / mask {} against patches {p}x{d}",
                self.dim,
                mask.len()
            )));
        }
        let q = bind(g, store, self.q_fg, mode);
        let qb = g.bcast_row(q, p);
        let m = g.constant(Mat::from_shape_fn((p, 1), |(i, _)| {
            if mask[i] {
                1.0
            } else {
                0.0
            }
        }));
        let mb = g.bcast_col(m, d);
        let gated = g.mul(qb, mb);
        Ok(g.add(patches, gated))
    }

    pub fn param_id(&self) -> ParamId {
        self.q_fg
    }
}

// ---- boundary spatial prompt ----------------------------------------------

/// Per-patch boundary mask: zeros strictly inside the `p`-pixel border,
/// ones on it. `S x S`, row-major.
pub fn boundary_mask(s: usize, p: usize) -> Result<Vec<u8>> {
    if p > s.div_ceil(2) {
        return Err(Error::Invalid(format!(
            "border width {p} exceeds ceil({s}/2)"
        )));
    }
    let mut m = vec![0u8; s * s];
    for u in 0..s {
        for v in 0..s {
            let interior = u >= p && u < s - p && v >= p && v < s - p;
            m[u * s + v] = if interior { 0 } else { 1 };
        }
    }
    Ok(m)
}

/// Tiles the per-patch mask over the image plane, `[H*W]` row-major.
pub fn tiled_boundary_mask(image_size: usize, patch_size: usize, p: usize) -> Result<Vec<u8>> {
    if image_size % patch_size != 0 {
        return Err(Error::Config("image size not divisible by patch".into()));
    }
    let m = boundary_mask(patch_size, p)?;
    let mut out = vec![0u8; image_size * image_size];
    for row in 0..image_size {
        for col in 0..image_size {
            let u = row % patch_size;
            let v = col % patch_size;
            out[row * image_size + col] = m[u * patch_size + v];
        }
    }
    Ok(out)
}

/// Learnable pixel prompt `[3, H, W]` gated by the tiled boundary mask:
/// `x~ = x + q_s * M`. Patch interiors pass through bit-identical.
pub struct PixelPrompt {
    pub image_size: usize,
    q_s: ParamId,
    mask: Vec<f64>,
}

impl PixelPrompt {
    pub fn new(
        store: &mut ParamStore,
        image_size: usize,
        patch_size: usize,
        border: usize,
        seed: u64,
    ) -> Result<Self> {
        let plane = tiled_boundary_mask(image_size, patch_size, border)?;
        let mut mask = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            mask.extend(plane.iter().map(|&x| x as f64));
        }
        let mut r = rng::rng(seed, "px-prompt", &[]);
        let value = Mat::from_shape_fn((1, 3 * image_size * image_size), |_| {
            0.02 * rng::normal(&mut r)
        });
        Ok(PixelPrompt {
            image_size,
            q_s: store.add("prompt.q_s", ParamGroup::SpatialPrompt, value),
            mask,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, img: Var, mode: Bind) -> Result<Var> {
        let n = 3 * self.image_size * self.image_size;
        if g.shape(img) != (1, n) {
            return Err(Error::Invalid(format!(
                "image shape {:?}, expected [1, {n}]",
                g.shape(img)
            )));
        }
        let q = bind(g, store, self.q_s, mode);
        let m = g.constant(Mat::from_shape_vec((1, n), self.mask.clone()).unwrap());
        let gated = g.mul(q, m);
        Ok(g.add(img, gated))
    }

    pub fn param_id(&self) -> ParamId {
        self.q_s
    }
}

// ---- factorized text prompts ----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextPromptConfig {
    /// Shared context tokens.
    pub n_ctx: usize,
    /// Tokens per category.
    pub tokens_per_category: usize,
    pub init_scale: f64,
}

impl Default for TextPromptConfig {
    fn default() -> Self {
        TextPromptConfig {
            n_ctx: 4,
            tokens_per_category: 1,
            init_scale: 0.02,
        }
    }
}

/// Shared context block plus per-category token block; a category's text
/// embedding encodes `[context; category-tokens]` through the frozen
/// tower and normalizes.
pub struct TextPrompts {
    pub cfg: TextPromptConfig,
    pub k: usize,
    ctx: ParamId,
    cats: ParamId,
}

impl TextPrompts {
    pub fn new(
        store: &mut ParamStore,
        cfg: TextPromptConfig,
        k: usize,
        token_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.n_ctx == 0 || cfg.tokens_per_category == 0 {
            return Err(Error::Config("text prompt blocks must be non-empty".into()));
        }
        let mut r = rng::rng(seed, "text-prompt", &[]);
        let ctx = store.add(
            "tp.ctx",
            ParamGroup::TextPrompt,
            Mat::from_shape_fn((cfg.n_ctx, token_dim), |_| cfg.init_scale * rng::normal(&mut r)),
        );
        let cats = store.add(
            "tp.cats",
            ParamGroup::TextPrompt,
            Mat::from_shape_fn((k * cfg.tokens_per_category, token_dim), |_| {
                cfg.init_scale * rng::normal(&mut r)
            }),
        );
        Ok(TextPrompts { cfg, k, ctx, cats })
    }

    /// Learnable scalar count: `(n_ctx + k * tokens_per_category) * token_dim`.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.ctx).len() + store.value(self.cats).len()
    }

    /// `xi_k`: unit-norm `[1, D]` embedding of category `k`.
    pub fn category_embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: &TextEncoder,
        k: usize,
        mode: Bind,
    ) -> Result<Var> {
        if k >= self.k {
            return Err(Error::Invalid(format!("category {k} out of {}", self.k)));
        }
        let ctx = bind(g, store, self.ctx, mode);
        let cats = bind(g, store, self.cats, mode);
        let gpc = self.cfg.tokens_per_category;
        let gamma = g.slice_rows(cats, k * gpc, (k + 1) * gpc);
        let seq = g.concat_rows(&[ctx, gamma]);
        let emb = text.encode(g, store, seq)?;
        Ok(g.l2_normalize_rows(emb))
    }

    /// The full embedding bank `E`, `[K, D]`, unit rows.
    pub fn bank(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: &TextEncoder,
        mode: Bind,
    ) -> Result<Var> {
        let rows: Vec<Var> = (0..self.k)
            .map(|k| self.category_embedding(g, store, text, k, mode))
            .collect::<Result<_>>()?;
        Ok(g.concat_rows(&rows))
    }

    pub fn ctx_id(&self) -> ParamId {
        self.ctx
    }

    pub fn cats_id(&self) -> ParamId {
        self.cats
    }
}

// ---- alternating-phase schedule --------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Encoder, heads, prototypes, discriminator, text prompts move.
    Model,
    /// Only spatial prompts move.
    Prompt,
}

impl Phase {
    fn other(self) -> Phase {
        match self {
            Phase::Model => Phase::Prompt,
            Phase::Prompt => Phase::Model,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub k: u64,
    pub initial_phase: Phase,
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("alternation period k must be >= 1".into()));
        }
        Ok(())
    }

    /// Phase governing global iteration `b`. The flag toggles whenever
    /// `(b + 1) % k == 0`, checked *before* the step runs, so the very
    /// first span lasts `k - 1` iterations and every later span `k`.
    pub fn phase_at(&self, iteration: u64) -> Phase {
        let toggles = (iteration + 1) / self.k;
        if toggles % 2 == 0 {
            self.initial_phase
        } else {
            self.initial_phase.other()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TextConfig;

    #[test]
    fn semantic_prompt_identity_cases() {
        let mut store = ParamStore::new();
        let fp = ForegroundPrompt::new(&mut store, 4, false, 3);
        let mut g = Graph::new();
        let patches = g.constant(ndarray::array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0]
        ]);

        // all-zero mask: identity
        let same = fp
            .apply(&mut g, &store, patches, &[false, false], Bind::Freeze)
            .unwrap();
        assert_eq!(g.value(same), g.value(patches));

        // all-ones mask: every row shifted by q_fg
        let q = store.value(fp.param_id()).row(0).to_owned();
        let all = fp
            .apply(&mut g, &store, patches, &[true, true], Bind::Freeze)
            .unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let expect = g.value(patches)[[r, c]] + q[c];
                assert!((g.value(all)[[r, c]] - expect).abs() < 1e-12);
            }
        }

        // zero prompt: identity regardless of mask
        store.value_mut(fp.param_id()).fill(0.0);
        let z = fp
            .apply(&mut g, &store, patches, &[true, false], Bind::Freeze)
            .unwrap();
        assert_eq!(g.value(z), g.value(patches));
    }

    #[test]
    fn boundary_mask_counts_match_enumeration() {
        // S=4: p=0 disables the prompt, p=1 leaves a 2x2 interior,
        // p=2 makes the interior condition vacuous
        let m0 = boundary_mask(4, 0).unwrap();
        assert!(m0.iter().all(|&x| x == 0));
        let m1 = boundary_mask(4, 1).unwrap();
        assert_eq!(m1.iter().filter(|&&x| x == 1).count(), 12);
        assert_eq!(m1.iter().filter(|&&x| x == 0).count(), 4);
        for u in 1..3 {
            for v in 1..3 {
                assert_eq!(m1[u * 4 + v], 0);
            }
        }
        let m2 = boundary_mask(4, 2).unwrap();
        assert!(m2.iter().all(|&x| x == 1));
        assert!(boundary_mask(4, 3).is_err());
    }

    #[test]
    fn tiled_mask_is_patch_periodic() {
        let t = tiled_boundary_mask(32, 4, 1).unwrap();
        for row in 0..32 {
            for col in 0..32 {
                assert_eq!(
                    t[row * 32 + col],
                    t[((row + 4) % 32) * 32 + col],
                    "row periodicity"
                );
                assert_eq!(t[row * 32 + col], t[row * 32 + (col + 4) % 32]);
            }
        }
    }

    #[test]
    fn pixel_prompt_leaves_interiors_untouched() {
        let mut store = ParamStore::new();
        let pp = PixelPrompt::new(&mut store, 32, 4, 1, 5).unwrap();
        let mut r = rng::rng(6, "img", &[]);
        use rand::Rng;
        let img = Mat::from_shape_fn((1, 3 * 32 * 32), |_| r.gen_range(0.0..1.0));
        let mut g = Graph::new();
        let iv = g.constant(img.clone());
        let out = pp.apply(&mut g, &store, iv, Bind::Freeze).unwrap();
        let o = g.value(out);
        let mask = tiled_boundary_mask(32, 4, 1).unwrap();
        let mut changed = 0;
        for c in 0..3 {
            for px in 0..32 * 32 {
                let idx = c * 1024 + px;
                if mask[px] == 0 {
                    assert_eq!(o[[0, idx]].to_bits(), img[[0, idx]].to_bits());
                } else if (o[[0, idx]] - img[[0, idx]]).abs() > 0.0 {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "border pixels should move");

        // zero prompt and p=0 mask are identities
        store.value_mut(pp.param_id()).fill(0.0);
        let mut g2 = Graph::new();
        let iv2 = g2.constant(img.clone());
        let same = pp.apply(&mut g2, &store, iv2, Bind::Freeze).unwrap();
        assert_eq!(g2.value(same), &img);

        let mut store3 = ParamStore::new();
        let pp0 = PixelPrompt::new(&mut store3, 32, 4, 0, 5).unwrap();
        let mut g3 = Graph::new();
        let iv3 = g3.constant(img.clone());
        let same3 = pp0.apply(&mut g3, &store3, iv3, Bind::Freeze).unwrap();
        assert_eq!(g3.value(same3), &img);
    }

    #[test]
    fn factorized_text_prompt_wiring_and_parameter_count() {
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, TextConfig::default(), 7).unwrap();
        let tp = TextPrompts::new(&mut store, TextPromptConfig::default(), 10, 64, 8).unwrap();

        // (N + K*g) * D_t against the independent-per-class count
        let count = tp.param_count(&store);
        assert_eq!(count, (4 + 10) * 64);
        let independent = 10 * (4 + 1) * 64;
        assert_eq!(independent, 3200);
        assert!(count < independent);

        // identical category tokens give identical embeddings
        {
            let cats = store.value_mut(tp.cats_id());
            let row0 = cats.row(0).to_owned();
            cats.row_mut(3).assign(&row0);
        }
        let mut g = Graph::new();
        let e0 = tp
            .category_embedding(&mut g, &store, &text, 0, Bind::Freeze)
            .unwrap();
        let e3 = tp
            .category_embedding(&mut g, &store, &text, 3, Bind::Freeze)
            .unwrap();
        assert_eq!(g.value(e0), g.value(e3));

        // gradient reaches the context and ONLY category k's token rows
        let mut g2 = Graph::new();
        let ek = tp
            .category_embedding(&mut g2, &store, &text, 2, Bind::Train)
            .unwrap();
        let loss = g2.sum_all(ek);
        let grads = g2.backward(loss).unwrap();
        let mut saw_ctx = false;
        for (id, grad) in grads {
            if id == tp.ctx_id() {
                saw_ctx = grad.iter().any(|&x| x != 0.0);
            } else if id == tp.cats_id() {
                for (row, grow) in grad.rows().into_iter().enumerate() {
                    let nonzero = grow.iter().any(|&x| x != 0.0);
                    assert_eq!(nonzero, row == 2, "category token row {row}");
                }
            }
        }
        assert!(saw_ctx, "context receives gradient");

        let bank = {
            let mut g3 = Graph::new();
            let b = tp.bank(&mut g3, &store, &text, Bind::Freeze).unwrap();
            g3.value(b).clone()
        };
        assert_eq!(bank.nrows(), 10);
        for row in bank.rows() {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn phase_schedule_follows_pre_use_toggle_convention() {
        let hl = PhaseSchedule {
            k: 20,
            initial_phase: Phase::Prompt,
        };
        for b in 0..19 {
            assert_eq!(hl.phase_at(b), Phase::Prompt, "iteration {b}");
        }
        for b in 19..39 {
            assert_eq!(hl.phase_at(b), Phase::Model, "iteration {b}");
        }
        assert_eq!(hl.phase_at(39), Phase::Prompt);

        let vl = PhaseSchedule {
            k: 20,
            initial_phase: Phase::Model,
        };
        assert_eq!(vl.phase_at(0), Phase::Model);

        // k = 1 alternates strictly from the first check onward
        let fast = PhaseSchedule {
            k: 1,
            initial_phase: Phase::Model,
        };
        assert_eq!(fast.phase_at(0), Phase::Prompt);
        assert_eq!(fast.phase_at(1), Phase::Model);
        assert_eq!(fast.phase_at(2), Phase::Prompt);
    }
}
