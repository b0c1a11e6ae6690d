//! Tiny vision transformer with per-layer CLS taps, final-block CLS
//! attention extraction, and patch-embedding hooks for prompt injection
//! and embedding-space mixing; plus a frozen two-block text encoder
//! standing in for a pretrained text tower.
//!
//! The vision encoder is pre-LN: `x += attn(ln(x)); x += mlp(ln(x))`,
//! with no final layer norm. CLS features are taken raw per block and
//! normalized by consumers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamGroup, ParamId, ParamStore, Var};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Block whose patch-token states feed spectral foreground masks.
    pub tap_layer: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            tap_layer: 1,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.tap_layer > self.depth {
            return Err(Error::Config("depth must be >= 1 and tap within it".into()));
        }
        Ok(())
    }

    /// Number of patches P = (H/S)^2.
    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio) as usize
    }
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct Vit {
    pub cfg: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<BlockParams>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    /// output index -> flat pixel index, row = patch, col = (c, dy, dx)
    patch_map: Vec<usize>,
}

fn gauss_mat(rows: usize, cols: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * rng::normal(r))
}

fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let (rows, cols) = g.shape(x);
    let s = g.row_sums(x);
    let m = g.mul_scalar(s, 1.0 / cols as f64);
    let mb = g.bcast_col(m, cols);
    let xc = g.sub(x, mb);
    let sq = g.mul(xc, xc);
    let vs = g.row_sums(sq);
    let v = g.mul_scalar(vs, 1.0 / cols as f64);
    let ve = g.add_scalar(v, 1e-6);
    let std = g.sqrt(ve);
    let stdb = g.bcast_col(std, cols);
    let xn = g.div(xc, stdb);
    let gb = g.bcast_row(gamma, rows);
    let bb = g.bcast_row(beta, rows);
    let scaled = g.mul(xn, gb);
    g.add(scaled, bb)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let rows = g.shape(x).0;
    let h = g.matmul(x, w);
    let bb = g.bcast_row(b, rows);
    g.add(h, bb)
}

/// How parameters are bound into the current graph.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Trainable this step.
    Train,
    /// Values used, gradients structurally zero.
    Freeze,
}

fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(store, id),
        Bind::Freeze => g.frozen(store, id),
    }
}

pub struct VitEncoded {
    /// CLS state after the embedding and after each block; `depth + 1` entries.
    pub layer_cls: Vec<Var>,
    /// The backbone output feature: final-block CLS through the closing
    /// layer norm, `[1, d]`. Heads and classifiers consume this.
    pub cls_out: Var,
    /// Patch-token states after the configured tap layer, `[P, d]`.
    pub tap_patches: Var,
    /// Head-averaged final-block attention from CLS to patches,
    /// renormalized over patches, `[1, P]`.
    pub attn_cls: Var,
    /// Full token states after the last block, `[P+1, d]`.
    pub final_tokens: Var,
}

impl Vit {
    pub fn new(
        store: &mut ParamStore,
        cfg: VitConfig,
        group: ParamGroup,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.n_patches();
        let s = cfg.patch_size;
        let pdim = 3 * s * s;
        let hidden = cfg.mlp_hidden();
        let mut r = rng::rng(seed, "vit-init", &[]);

        let patch_w = store.add(
            "vit.patch.w",
            group,
            gauss_mat(pdim, d, 1.0 / (pdim as f64).sqrt(), &mut r),
        );
        let patch_b = store.add("vit.patch.b", group, Mat::zeros((1, d)));
        let pos = store.add("vit.pos", group, gauss_mat(p, d, 0.02, &mut r));
        let cls = store.add("vit.cls", group, gauss_mat(1, d, 0.02, &mut r));

        let wstd = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let pfx = format!("vit.block{l}");
            blocks.push(BlockParams {
                ln1_g: store.add(format!("{pfx}.ln1.g"), group, Mat::ones((1, d))),
                ln1_b: store.add(format!("{pfx}.ln1.b"), group, Mat::zeros((1, d))),
                wq: store.add(format!("{pfx}.wq"), group, gauss_mat(d, d, wstd, &mut r)),
                bq: store.add(format!("{pfx}.bq"), group, Mat::zeros((1, d))),
                wk: store.add(format!("{pfx}.wk"), group, gauss_mat(d, d, wstd, &mut r)),
                bk: store.add(format!("{pfx}.bk"), group, Mat::zeros((1, d))),
                wv: store.add(format!("{pfx}.wv"), group, gauss_mat(d, d, wstd, &mut r)),
                bv: store.add(format!("{pfx}.bv"), group, Mat::zeros((1, d))),
                wo: store.add(format!("{pfx}.wo"), group, gauss_mat(d, d, wstd, &mut r)),
                bo: store.add(format!("{pfx}.bo"), group, Mat::zeros((1, d))),
                ln2_g: store.add(format!("{pfx}.ln2.g"), group, Mat::ones((1, d))),
                ln2_b: store.add(format!("{pfx}.ln2.b"), group, Mat::zeros((1, d))),
                w1: store.add(format!("{pfx}.w1"), group, gauss_mat(d, hidden, wstd, &mut r)),
                b1: store.add(format!("{pfx}.b1"), group, Mat::zeros((1, hidden))),
                w2: store.add(
                    format!("{pfx}.w2"),
                    group,
                    gauss_mat(hidden, d, 1.0 / (hidden as f64).sqrt(), &mut r),
                ),
                b2: store.add(format!("{pfx}.b2"), group, Mat::zeros((1, d))),
            });
        }

        let ln_f_g = store.add("vit.ln_f.g", group, Mat::ones((1, d)));
        let ln_f_b = store.add("vit.ln_f.b", group, Mat::zeros((1, d)));

        let grid = cfg.grid();
        let hw = cfg.image_size;
        let mut patch_map = Vec::with_capacity(p * pdim);
        for py in 0..grid {
            for px in 0..grid {
                for c in 0..3 {
                    for dy in 0..s {
                        for dx in 0..s {
                            let row = py * s + dy;
                            let col = px * s + dx;
                            patch_map.push(c * hw * hw + row * hw + col);
                        }
                    }
                }
            }
        }

        Ok(Vit {
            cfg,
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
            ln_f_g,
            ln_f_b,
            patch_map,
        })
    }

    /// Linear patch projection plus learned positional table: `[1, 3*H*W]`
    /// pixels to `[P, d]` embeddings.
    pub fn patchify(&self, g: &mut Graph, store: &ParamStore, img: Var, mode: Bind) -> Result<Var> {
        let expect = 3 * self.cfg.image_size * self.cfg.image_size;
        if g.shape(img) != (1, expect) {
            return Err(Error::Invalid(format!(
                "image shape {:?}, expected [1, {expect}]",
                g.shape(img)
            )));
        }
        let p = self.cfg.n_patches();
        let pdim = 3 * self.cfg.patch_size * self.cfg.patch_size;
        let map_id = g.register_index_map(self.patch_map.clone());
        let patches = g.scatter(img, map_id, p, pdim);
        let w = bind(g, store, self.patch_w, mode);
        let b = bind(g, store, self.patch_b, mode);
        let proj = linear(g, patches, w, b);
        let pos = bind(g, store, self.pos, mode);
        Ok(g.add(proj, pos))
    }

    fn block_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        blk: &BlockParams,
        x: Var,
        mode: Bind,
        want_attn: bool,
    ) -> (Var, Option<Var>) {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;

        let ln1_g = bind(g, store, blk.ln1_g, mode);
        let ln1_b = bind(g, store, blk.ln1_b, mode);
        let xn = layer_norm(g, x, ln1_g, ln1_b);

        let wq = bind(g, store, blk.wq, mode);
        let bq = bind(g, store, blk.bq, mode);
        let wk = bind(g, store, blk.wk, mode);
        let bk = bind(g, store, blk.bk, mode);
        let wv = bind(g, store, blk.wv, mode);
        let bv = bind(g, store, blk.bv, mode);
        let q = linear(g, xn, wq, bq);
        let k = linear(g, xn, wk, bk);
        let v = linear(g, xn, wv, bv);

        let mut head_outs = Vec::with_capacity(heads);
        let mut probs_sum: Option<Var> = None;
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
            let probs = g.softmax_rows(scaled);
            if want_attn {
                probs_sum = Some(match probs_sum {
                    None => probs,
                    Some(acc) => g.add(acc, probs),
                });
            }
            head_outs.push(g.matmul(probs, vh));
        }
        let concat = g.concat_cols(&head_outs);
        let wo = bind(g, store, blk.wo, mode);
        let bo = bind(g, store, blk.bo, mode);
        let attn_out = linear(g, concat, wo, bo);
        let x = g.add(x, attn_out);

        let ln2_g = bind(g, store, blk.ln2_g, mode);
        let ln2_b = bind(g, store, blk.ln2_b, mode);
        let xn2 = layer_norm(g, x, ln2_g, ln2_b);
        let w1 = bind(g, store, blk.w1, mode);
        let b1 = bind(g, store, blk.b1, mode);
        let w2 = bind(g, store, blk.w2, mode);
        let b2 = bind(g, store, blk.b2, mode);
        let h1 = linear(g, xn2, w1, b1);
        let act = g.gelu(h1);
        let h2 = linear(g, act, w2, b2);
        let out = g.add(x, h2);

        let avg = probs_sum.map(|s| g.mul_scalar(s, 1.0 / heads as f64));
        (out, avg)
    }

    /// Runs blocks `from..to` over a full token matrix `[P+1, d]`.
    pub fn encode_tokens_range(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        from: usize,
        to: usize,
        mode: Bind,
    ) -> Result<Var> {
        if from > to || to > self.cfg.depth {
            return Err(Error::Invalid(format!(
                "block range {from}..{to} outside 0..{}",
                self.cfg.depth
            )));
        }
        let mut x = tokens;
        for blk in &self.blocks[from..to] {
            x = self.block_forward(g, store, blk, x, mode, false).0;
        }
        Ok(x)
    }

    /// Full forward from patch embeddings (CLS prepended internally).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        mode: Bind,
    ) -> Result<VitEncoded> {
        let d = self.cfg.embed_dim;
        let p = self.cfg.n_patches();
        if g.shape(patches) != (p, d) {
            return Err(Error::Invalid(format!(
                "patch matrix {:?}, expected [{p}, {d}]",
                g.shape(patches)
            )));
        }
        let cls = bind(g, store, self.cls, mode);
        let mut x = g.concat_rows(&[cls, patches]);
        let t = p + 1;

        let mut layer_cls = Vec::with_capacity(self.cfg.depth + 1);
        layer_cls.push(g.slice_rows(x, 0, 1));
        let mut tap_patches = None;
        if self.cfg.tap_layer == 0 {
            tap_patches = Some(g.slice_rows(x, 1, t));
        }
        let mut final_attn = None;
        for (l, blk) in self.blocks.iter().enumerate() {
            let last = l + 1 == self.cfg.depth;
            let (nx, attn) = self.block_forward(g, store, blk, x, mode, last);
            x = nx;
            layer_cls.push(g.slice_rows(x, 0, 1));
            if l + 1 == self.cfg.tap_layer {
                tap_patches = Some(g.slice_rows(x, 1, t));
            }
            if last {
                final_attn = attn;
            }
        }

        // CLS row of the head-averaged final attention, restricted to
        // patch keys and renormalized so it sums to one over patches.
        let attn = final_attn.expect("depth >= 1");
        let cls_row = g.slice_rows(attn, 0, 1);
        let to_patches = g.slice_cols(cls_row, 1, t);
        let total = g.row_sums(to_patches);
        let tb = g.bcast_col(total, p);
        let attn_cls = g.div(to_patches, tb);

        let lf_g = bind(g, store, self.ln_f_g, mode);
        let lf_b = bind(g, store, self.ln_f_b, mode);
        let cls_raw = g.slice_rows(x, 0, 1);
        let cls_out = layer_norm(g, cls_raw, lf_g, lf_b);

        Ok(VitEncoded {
            layer_cls,
            cls_out,
            tap_patches: tap_patches.expect("tap within depth"),
            attn_cls,
            final_tokens: x,
        })
    }

    /// Convenience: patchify then encode.
    pub fn forward_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img: Var,
        mode: Bind,
    ) -> Result<VitEncoded> {
        let patches = self.patchify(g, store, img, mode)?;
        self.encode(g, store, patches, mode)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.patch_w,
            self.patch_b,
            self.pos,
            self.cls,
            self.ln_f_g,
            self.ln_f_b,
        ];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        ids
    }

    pub fn pos_id(&self) -> ParamId {
        self.pos
    }

    pub fn patch_bias_id(&self) -> ParamId {
        self.patch_b
    }

    pub fn cls_id(&self) -> ParamId {
        self.cls
    }
}

// ---- frozen text encoder ------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Shared vision-language embedding width.
    pub out_dim: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            token_dim: 64,
            depth: 2,
            heads: 4,
            out_dim: 64,
            max_len: 16,
        }
    }
}

/// Two-block transformer with seeded, permanently frozen weights. The
/// output is the final token's state, linearly projected to the shared
/// dimension. Gradients flow to the *input sequence* only.
pub struct TextEncoder {
    pub cfg: TextConfig,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    out_proj: ParamId,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: TextConfig, seed: u64) -> Result<Self> {
        if cfg.token_dim % cfg.heads != 0 {
            return Err(Error::Config("text token_dim must divide heads".into()));
        }
        let d = cfg.token_dim;
        let hidden = 2 * d;
        let mut r = rng::rng(seed, "text-init", &[]);
        let group = ParamGroup::Frozen;
        let wstd = 1.0 / (d as f64).sqrt();
        let pos = store.add("text.pos", group, gauss_mat(cfg.max_len, d, 0.02, &mut r));
        let mut blocks = Vec::new();
        for l in 0..cfg.depth {
            let pfx = format!("text.block{l}");
            blocks.push(BlockParams {
                ln1_g: store.add(format!("{pfx}.ln1.g"), group, Mat::ones((1, d))),
                ln1_b: store.add(format!("{pfx}.ln1.b"), group, Mat::zeros((1, d))),
                wq: store.add(format!("{pfx}.wq"), group, gauss_mat(d, d, wstd, &mut r)),
                bq: store.add(format!("{pfx}.bq"), group, Mat::zeros((1, d))),
                wk: store.add(format!("{pfx}.wk"), group, gauss_mat(d, d, wstd, &mut r)),
                bk: store.add(format!("{pfx}.bk"), group, Mat::zeros((1, d))),
                wv: store.add(format!("{pfx}.wv"), group, gauss_mat(d, d, wstd, &mut r)),
                bv: store.add(format!("{pfx}.bv"), group, Mat::zeros((1, d))),
                wo: store.add(format!("{pfx}.wo"), group, gauss_mat(d, d, wstd, &mut r)),
                bo: store.add(format!("{pfx}.bo"), group, Mat::zeros((1, d))),
                ln2_g: store.add(format!("{pfx}.ln2.g"), group, Mat::ones((1, d))),
                ln2_b: store.add(format!("{pfx}.ln2.b"), group, Mat::zeros((1, d))),
                w1: store.add(format!("{pfx}.w1"), group, gauss_mat(d, hidden, wstd, &mut r)),
                b1: store.add(format!("{pfx}.b1"), group, Mat::zeros((1, hidden))),
                w2: store.add(
                    format!("{pfx}.w2"),
                    group,
                    gauss_mat(hidden, d, 1.0 / (hidden as f64).sqrt(), &mut r),
                ),
                b2: store.add(format!("{pfx}.b2"), group, Mat::zeros((1, d))),
            });
        }
        let out_proj = store.add(
            "text.out_proj",
            group,
            gauss_mat(d, cfg.out_dim, 1.0 / (d as f64).sqrt(), &mut r),
        );
        Ok(TextEncoder {
            cfg,
            pos,
            blocks,
            out_proj,
        })
    }

    /// Encodes a `[L, token_dim]` sequence into `[1, out_dim]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let (len, d) = g.shape(seq);
        if len == 0 {
            return Err(Error::Invalid("empty text sequence".into()));
        }
        if d != self.cfg.token_dim {
            return Err(Error::Invalid(format!(
                "token dim {d}, expected {}",
                self.cfg.token_dim
            )));
        }
        if len > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {len} over max {}",
                self.cfg.max_len
            )));
        }
        let pos_full = g.frozen(store, self.pos);
        let pos = g.slice_rows(pos_full, 0, len);
        let mut x = g.add(seq, pos);

        let heads = self.cfg.heads;
        let dh = d / heads;
        for blk in &self.blocks {
            let ln1_g = g.frozen(store, blk.ln1_g);
            let ln1_b = g.frozen(store, blk.ln1_b);
            let xn = layer_norm(g, x, ln1_g, ln1_b);
            let wq = g.frozen(store, blk.wq);
            let bq = g.frozen(store, blk.bq);
            let wk = g.frozen(store, blk.wk);
            let bk = g.frozen(store, blk.bk);
            let wv = g.frozen(store, blk.wv);
            let bv = g.frozen(store, blk.bv);
            let q = linear(g, xn, wq, bq);
            let k = linear(g, xn, wk, bk);
            let v = linear(g, xn, wv, bv);
            let mut outs = Vec::new();
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
                let kt = g.transpose(kh);
                let sc = g.matmul(qh, kt);
                let scl = g.mul_scalar(sc, 1.0 / (dh as f64).sqrt());
                let pr = g.softmax_rows(scl);
                outs.push(g.matmul(pr, vh));
            }
            let cat = g.concat_cols(&outs);
            let wo = g.frozen(store, blk.wo);
            let bo = g.frozen(store, blk.bo);
            let a = linear(g, cat, wo, bo);
            x = g.add(x, a);
            let ln2_g = g.frozen(store, blk.ln2_g);
            let ln2_b = g.frozen(store, blk.ln2_b);
            let xn2 = layer_norm(g, x, ln2_g, ln2_b);
            let w1 = g.frozen(store, blk.w1);
            let b1 = g.frozen(store, blk.b1);
            let w2 = g.frozen(store, blk.w2);
            let b2 = g.frozen(store, blk.b2);
            let h1 = linear(g, xn2, w1, b1);
            let act = g.gelu(h1);
            let h2 = linear(g, act, w2, b2);
            x = g.add(x, h2);
        }

        let last = g.slice_rows(x, len - 1, len);
        let proj = g.frozen(store, self.out_proj);
        Ok(g.matmul(last, proj))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pos, self.out_proj];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        ids
    }
}
