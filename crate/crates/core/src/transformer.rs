//! Post-norm transformer layers over padded window batches, with shared
//! keys/values per window, masked softmax over padded slots, and
//! sine/cosine positional encodings from within-window coordinates.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::Result;
use crate::tensor::params::{Binder, ParamStore};
use crate::tensor::tape::Var;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Weights of one transformer layer (multi-head self-attention + MLP,
/// layer norm after each residual sum).
pub struct LayerVars<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
    pub ln1_g: Var<'t>,
    pub ln1_b: Var<'t>,
    pub mlp_w1: Var<'t>,
    pub mlp_b1: Var<'t>,
    pub mlp_w2: Var<'t>,
    pub mlp_b2: Var<'t>,
    pub ln2_g: Var<'t>,
    pub ln2_b: Var<'t>,
    pub heads: usize,
}

/// Parameter names under `prefix`: wq bq wk bk wv bv wo bo ln1_g ln1_b
/// mlp_w1 mlp_b1 mlp_w2 mlp_b2 ln2_g ln2_b.
pub fn layer_param_names(prefix: &str) -> Vec<String> {
    [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "mlp_w1", "mlp_b1",
        "mlp_w2", "mlp_b2", "ln2_g", "ln2_b",
    ]
    .iter()
    .map(|s| format!("{prefix}.{s}"))
    .collect()
}

impl<'t> LayerVars<'t> {
    pub fn bind(binder: &Binder<'t, '_>, prefix: &str, heads: usize) -> Result<Self> {
        let b = |name: &str| binder.bind(&format!("{prefix}.{name}"));
        Ok(LayerVars {
            wq: b("wq")?,
            bq: b("bq")?,
            wk: b("wk")?,
            bk: b("bk")?,
            wv: b("wv")?,
            bv: b("bv")?,
            wo: b("wo")?,
            bo: b("bo")?,
            ln1_g: b("ln1_g")?,
            ln1_b: b("ln1_b")?,
            mlp_w1: b("mlp_w1")?,
            mlp_b1: b("mlp_b1")?,
            mlp_w2: b("mlp_w2")?,
            mlp_b2: b("mlp_b2")?,
            ln2_g: b("ln2_g")?,
            ln2_b: b("ln2_b")?,
            heads,
        })
    }
}

/// Attention probabilities captured for offline inspection.
pub struct AttnCapture {
    /// Which layer produced this (e.g. `backbone.s0.st0.l0`).
    pub label: String,
    /// Grid stride of the layout the layer ran on.
    pub stride: usize,
    /// `[windows * heads, L, L]` softmax output.
    pub probs: Tensor,
    pub heads: usize,
    pub seq_len: usize,
    /// Per window, each slot's source-voxel index (-1 padding).
    pub window_sources: Vec<Vec<i64>>,
    /// Per window, each slot's grid coordinate ((-1, -1) padding).
    pub window_voxels: Vec<Vec<(i64, i64)>>,
}

/// Per-call layer context: stochastic-depth decisions (made by the caller
/// per layer per window batch) and the optional attention sink.
pub struct LayerCtx<'a> {
    pub drop_msa: bool,
    pub drop_mlp: bool,
    /// Kept branches are scaled by `1 / survival` at train time; 1.0 in eval.
    pub branch_scale: f64,
    pub label: String,
    pub stride: usize,
    pub attn_sink: Option<&'a RefCell<Vec<AttnCapture>>>,
    /// Slot sources for the capture record (only read when capturing).
    pub window_sources: Vec<Vec<i64>>,
    /// Slot grid coordinates for the capture record.
    pub window_voxels: Vec<Vec<(i64, i64)>>,
}

impl LayerCtx<'_> {
    pub fn eval(label: String) -> Self {
        LayerCtx {
            drop_msa: false,
            drop_mlp: false,
            branch_scale: 1.0,
            label,
            stride: 1,
            attn_sink: None,
            window_sources: Vec::new(),
            window_voxels: Vec::new(),
        }
    }
}

/// Index vector that regroups `[W, L, heads*d]` into `[W*heads, L, d]`.
fn split_heads_idx(w: usize, l: usize, heads: usize, d: usize) -> Rc<Vec<i64>> {
    let mut idx = Vec::with_capacity(w * heads * l * d);
    for wi in 0..w {
        for h in 0..heads {
            for li in 0..l {
                for di in 0..d {
                    idx.push((wi * l * heads * d + li * heads * d + h * d + di) as i64);
                }
            }
        }
    }
    Rc::new(idx)
}

/// Inverse of `split_heads_idx`.
fn merge_heads_idx(w: usize, l: usize, heads: usize, d: usize) -> Rc<Vec<i64>> {
    let mut idx = Vec::with_capacity(w * heads * l * d);
    for wi in 0..w {
        for li in 0..l {
            for h in 0..heads {
                for di in 0..d {
                    idx.push((wi * heads * l * d + h * l * d + li * d + di) as i64);
                }
            }
        }
    }
    Rc::new(idx)
}

/// One post-norm transformer layer over a padded window batch.
///
/// `seq` is `[W, L, C]` with padded slots zeroed; `key_mask` is `[W, L]`
/// slot validity. Padded slots stay exactly zero through the layer: they
/// are masked out of the attention keys and the whole row is re-zeroed
/// after each residual + layer norm.
pub fn transformer_layer<'t>(
    seq: Var<'t>,
    key_mask: &[bool],
    params: &LayerVars<'t>,
    ctx: &LayerCtx<'_>,
) -> Var<'t> {
    let shape = seq.shape();
    let (w, l, c) = (shape[0], shape[1], shape[2]);
    if w == 0 {
        return seq;
    }
    let heads = params.heads;
    debug_assert_eq!(c % heads, 0, "head count must divide channels");
    debug_assert_eq!(key_mask.len(), w * l, "mask length mismatch");
    let d = c / heads;

    let row_mask: Rc<Vec<f64>> =
        Rc::new(key_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());

    // ---- multi-head self-attention ----
    let x = seq;
    let attn_branch = if ctx.drop_msa {
        None
    } else {
        let q = x.matmul(params.wq).add_rows(params.bq);
        let k = x.matmul(params.wk).add_rows(params.bk);
        let v = x.matmul(params.wv).add_rows(params.bv);
        let split = split_heads_idx(w, l, heads, d);
        let qh = q.gather_elems(split.clone(), vec![w * heads, l, d]);
        let kh = k.gather_elems(split.clone(), vec![w * heads, l, d]);
        let vh = v.gather_elems(split, vec![w * heads, l, d]);
        let scores = qh.bmm_nt(kh).mul_scalar(1.0 / (d as f64).sqrt());
        // element mask: key j of window wi must be valid
        let mut mask = Vec::with_capacity(w * heads * l * l);
        for wi in 0..w {
            for _ in 0..heads * l {
                mask.extend(key_mask[wi * l..(wi + 1) * l].iter().copied());
            }
        }
        let probs = scores.masked_softmax(Rc::new(mask));
        if let Some(sink) = ctx.attn_sink {
            sink.borrow_mut().push(AttnCapture {
                label: ctx.label.clone(),
                stride: ctx.stride,
                probs: probs.value(),
                heads,
                seq_len: l,
                window_sources: ctx.window_sources.clone(),
                window_voxels: ctx.window_voxels.clone(),
            });
        }
        let ctx_h = probs.bmm(vh);
        let merged = ctx_h.gather_elems(merge_heads_idx(w, l, heads, d), vec![w, l, c]);
        let out = merged.matmul(params.wo).add_rows(params.bo);
        Some(out.mul_scalar(ctx.branch_scale))
    };
    let x = match attn_branch {
        Some(b) => x.add(b),
        None => x,
    };
    let x = x
        .layer_norm(params.ln1_g, params.ln1_b, LAYER_NORM_EPS)
        .scale_rows(row_mask.clone());

    // ---- MLP ----
    let mlp_branch = if ctx.drop_mlp {
        None
    } else {
        let h = x.matmul(params.mlp_w1).add_rows(params.mlp_b1).gelu();
        let out = h.matmul(params.mlp_w2).add_rows(params.mlp_b2);
        Some(out.mul_scalar(ctx.branch_scale))
    };
    let x = match mlp_branch {
        Some(b) => x.add(b),
        None => x,
    };
    x.layer_norm(params.ln2_g, params.ln2_b, LAYER_NORM_EPS)
        .scale_rows(row_mask)
}

/// How positional encodings index voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    /// Within-window (row, col), recomputed after each shift.
    #[default]
    WindowLocal,
    /// Absolute grid (row, col) at the current scale.
    Global,
}

/// Standard interleaved sine/cosine encoding of a 2D position: the first
/// C/2 channels encode the row, the rest the column.
pub fn positional_encoding_2d(row: f64, col: f64, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; c];
    encode_axis(row, &mut out[..half]);
    encode_axis(col, &mut out[half..]);
    out
}

fn encode_axis(p: f64, out: &mut [f64]) {
    let n = out.len();
    let pairs = n / 2;
    for i in 0..pairs {
        let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / n as f64);
        out[2 * i] = (p * omega).sin();
        out[2 * i + 1] = (p * omega).cos();
    }
    if n % 2 == 1 {
        let omega = 1.0 / 10_000f64.powf(2.0 * pairs as f64 / n as f64);
        out[n - 1] = (p * omega).sin();
    }
}

/// Random init for one layer's parameters under `prefix`.
pub fn init_layer_params(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    c: usize,
    mlp_ratio: usize,
) {
    use rand::Rng as _;
    let s = 0.4 / (c as f64).sqrt();
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{name}"), Tensor::rand_uniform(rng, vec![c, c], s));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.insert(format!("{prefix}.{name}"), Tensor::rand_uniform(rng, vec![c], s));
    }
    store.insert(format!("{prefix}.ln1_g"), Tensor::full(vec![c], 1.0));
    store.insert(format!("{prefix}.ln1_b"), Tensor::zeros(vec![c]));
    store.insert(format!("{prefix}.mlp_w1"), Tensor::rand_uniform(rng, vec![c, mlp_ratio * c], s));
    store.insert(format!("{prefix}.mlp_b1"), Tensor::rand_uniform(rng, vec![mlp_ratio * c], s));
    store.insert(format!("{prefix}.mlp_w2"), Tensor::rand_uniform(rng, vec![mlp_ratio * c, c], s));
    store.insert(format!("{prefix}.mlp_b2"), Tensor::rand_uniform(rng, vec![c], s));
    store.insert(format!("{prefix}.ln2_g"), Tensor::full(vec![c], 1.0));
    store.insert(format!("{prefix}.ln2_b"), Tensor::zeros(vec![c]));
    let _ = rng.gen::<u32>();
}
