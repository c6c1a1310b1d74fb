//! The hierarchical windowed-attention backbone and multi-scale fusion.
//!
//! Each block partitions the sparse BEV into padded window batches, runs
//! transformer layers per bucket, gathers back to sparse, re-partitions
//! once with a half-window shift, and runs more layers. Scales are chained
//! by strided partitions; fusion walks back down the pyramid, upsampling
//! onto each finer occupancy.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::{upsample_parent_indices, SparseLayout};
use crate::tensor::params::Binder;
use crate::tensor::tape::Var;
use crate::transformer::{
    positional_encoding_2d, transformer_layer, AttnCapture, LayerCtx, LayerVars, PeMode,
};
use crate::window::{shifted_partition, Bucket, ShiftSpec, WindowConfig};

/// Sparse features on a tape: layout plus a `[len, C]` feature node.
#[derive(Clone)]
pub struct SparseVar<'t> {
    pub layout: SparseLayout,
    pub feats: Var<'t>,
}

/// Layer counts around the single mid-block shift, plus the stochastic
/// depth survival probability and the extra-shift ablation knob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    /// Layers before the shift (N >= 1).
    pub layers_pre: usize,
    /// Layers after the shift (M >= 0).
    pub layers_post: usize,
    pub survival_prob: f64,
    /// Extra shift/unshift stage pairs of one layer each, appended after
    /// the standard two stages. Off by default.
    pub extra_shifts: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { layers_pre: 2, layers_post: 2, survival_prob: 0.6, extra_shifts: 0 }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers_pre == 0 {
            return Err(Error::Contract("block needs at least one pre-shift layer".into()));
        }
        if !(0.0..=1.0).contains(&self.survival_prob) || self.survival_prob <= 0.0 {
            return Err(Error::Contract("survival probability must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Layer count per stage; stage parity alternates unshifted/shifted.
    pub fn stage_layers(&self) -> Vec<usize> {
        let mut stages = vec![self.layers_pre, self.layers_post];
        for _ in 0..self.extra_shifts {
            stages.push(1);
            stages.push(1);
        }
        stages
    }
}

/// One backbone scale: the striding factor into it, its window geometry,
/// and its block depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleConfig {
    /// Downsampling factor from the previous scale (1 for the first).
    pub factor: usize,
    pub window: WindowConfig,
    pub block: BlockConfig,
}

/// The whole hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub scales: Vec<ScaleConfig>,
    pub heads: usize,
    pub pe_mode: PeMode,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Contract("backbone needs at least one scale".into()));
        }
        if self.scales[0].factor != 1 {
            return Err(Error::Contract("first scale must have factor 1".into()));
        }
        for s in &self.scales[1..] {
            if !matches!(s.factor, 2 | 4 | 8) {
                return Err(Error::Contract(format!("bad stride factor {}", s.factor)));
            }
        }
        for s in &self.scales {
            s.block.validate()?;
        }
        Ok(())
    }

    /// Cumulative strides, e.g. factors [1,2,2,4,2] -> [1,2,4,16,32].
    pub fn strides(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.scales.len());
        let mut s = 1;
        for sc in &self.scales {
            s *= sc.factor;
            out.push(s);
        }
        out
    }
}

/// Forward mode: eval is deterministic; train draws stochastic-depth
/// decisions from the shared RNG.
pub enum Mode<'m> {
    Eval,
    Train { rng: &'m RefCell<ChaCha8Rng> },
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Bound weights for one block: per stage, per layer.
pub struct BlockVars<'t> {
    pub stages: Vec<Vec<LayerVars<'t>>>,
}

impl<'t> BlockVars<'t> {
    pub fn bind(
        binder: &Binder<'t, '_>,
        prefix: &str,
        cfg: &BlockConfig,
        heads: usize,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        for (g, &n) in cfg.stage_layers().iter().enumerate() {
            let mut layers = Vec::with_capacity(n);
            for l in 0..n {
                layers.push(LayerVars::bind(binder, &format!("{prefix}.st{g}.l{l}"), heads)?);
            }
            stages.push(layers);
        }
        Ok(BlockVars { stages })
    }
}

/// The capture sink threaded through forward passes.
pub type AttnSink<'a> = Option<&'a RefCell<Vec<AttnCapture>>>;

/// Positional-encoding constant for one bucket: zeros at padded slots.
fn bucket_pe(bucket: &Bucket, layout: &SparseLayout, pe_mode: PeMode, c: usize) -> Rc<Vec<f64>> {
    let cap = bucket.capacity;
    let mut pe = vec![0.0; bucket.windows.len() * cap * c];
    for (wi, win) in bucket.windows.iter().enumerate() {
        for s in 0..win.n_valid {
            let (row, col) = match pe_mode {
                PeMode::WindowLocal => {
                    let (r, c2) = win.locals[s];
                    (r as f64, c2 as f64)
                }
                PeMode::Global => {
                    let (r, c2) = layout.coords()[win.slots[s] as usize];
                    (r as f64, c2 as f64)
                }
            };
            let enc = positional_encoding_2d(row, col, c);
            pe[(wi * cap + s) * c..(wi * cap + s + 1) * c].copy_from_slice(&enc);
        }
    }
    Rc::new(pe)
}

/// Run every bucket of one partition through `layers`, then gather the
/// results back to the sparse `[V, C]` order.
fn run_partition_stage<'t>(
    layout: &SparseLayout,
    feats: Var<'t>,
    shift: ShiftSpec,
    wcfg: &WindowConfig,
    pe_mode: PeMode,
    layers: &[LayerVars<'t>],
    survival: f64,
    mode: &Mode<'_>,
    label: &str,
    sink: AttnSink<'_>,
) -> Var<'t> {
    let v = layout.len();
    let c = feats.shape()[1];
    if v == 0 || layers.is_empty() {
        return feats;
    }
    let set = shifted_partition(layout, wcfg, shift);

    let mut back: Option<Var<'t>> = None;
    for bucket in &set.buckets {
        if bucket.windows.is_empty() {
            continue;
        }
        let cap = bucket.capacity;
        let nw = bucket.windows.len();
        let mut slot_idx = Vec::with_capacity(nw * cap);
        let mut key_mask = Vec::with_capacity(nw * cap);
        for w in &bucket.windows {
            slot_idx.extend_from_slice(&w.slots);
            key_mask.extend(w.slots.iter().map(|&s| s >= 0));
        }
        let mut seq = feats
            .gather_rows(Rc::new(slot_idx), vec![nw, cap, c])
            .add_const(bucket_pe(bucket, layout, pe_mode, c));

        for (li, layer) in layers.iter().enumerate() {
            let (drop_msa, drop_mlp, scale) = match mode {
                Mode::Eval => (false, false, 1.0),
                Mode::Train { rng } => {
                    let mut r = rng.borrow_mut();
                    (
                        !r.gen_bool(survival),
                        !r.gen_bool(survival),
                        1.0 / survival,
                    )
                }
            };
            let mut ctx = LayerCtx::eval(format!("{label}.l{li}"));
            ctx.drop_msa = drop_msa;
            ctx.drop_mlp = drop_mlp;
            ctx.branch_scale = if mode.is_train() { scale } else { 1.0 };
            ctx.stride = layout.stride;
            ctx.attn_sink = sink;
            if sink.is_some() {
                ctx.window_sources = bucket.windows.iter().map(|w| w.slots.clone()).collect();
                ctx.window_voxels = bucket
                    .windows
                    .iter()
                    .map(|w| {
                        w.slots
                            .iter()
                            .map(|&s| {
                                if s < 0 {
                                    (-1, -1)
                                } else {
                                    let (r, c) = layout.coords()[s as usize];
                                    (r as i64, c as i64)
                                }
                            })
                            .collect()
                    })
                    .collect();
            }
            seq = transformer_layer(seq, &key_mask, layer, &ctx);
        }

        // route each voxel's slot back to its sparse row
        let mut inv = vec![-1i64; v];
        for (wi, w) in bucket.windows.iter().enumerate() {
            for (s, &src) in w.slots.iter().enumerate() {
                if src >= 0 {
                    inv[src as usize] = (wi * cap + s) as i64;
                }
            }
        }
        let gathered = seq.gather_rows(Rc::new(inv), vec![v, c]);
        back = Some(match back {
            Some(acc) => acc.add(gathered),
            None => gathered,
        });
    }
    back.unwrap_or(feats)
}

/// One block: N layers on the unshifted partition, a single half-window
/// shift, M layers on the shifted partition (plus any extra stage pairs).
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t>(
    input: &SparseVar<'t>,
    cfg: &BlockConfig,
    wcfg: &WindowConfig,
    pe_mode: PeMode,
    vars: &BlockVars<'t>,
    mode: &Mode<'_>,
    label: &str,
    sink: AttnSink<'_>,
) -> SparseVar<'t> {
    let mut feats = input.feats;
    for (g, layers) in vars.stages.iter().enumerate() {
        let shift = if g % 2 == 0 { ShiftSpec::default() } else { ShiftSpec::half_window(wcfg) };
        feats = run_partition_stage(
            &input.layout,
            feats,
            shift,
            wcfg,
            pe_mode,
            layers,
            cfg.survival_prob,
            mode,
            &format!("{label}.st{g}"),
            sink,
        );
    }
    SparseVar { layout: input.layout.clone(), feats }
}

/// Bound weights for the whole backbone.
pub struct BackboneVars<'t> {
    pub blocks: Vec<BlockVars<'t>>,
}

impl<'t> BackboneVars<'t> {
    pub fn bind(binder: &Binder<'t, '_>, cfg: &BackboneConfig, prefix: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for (i, sc) in cfg.scales.iter().enumerate() {
            blocks.push(BlockVars::bind(binder, &format!("{prefix}.s{i}"), &sc.block, cfg.heads)?);
        }
        Ok(BackboneVars { blocks })
    }
}

/// Run all scales: block at stride 1, then strided partition + block per
/// later scale. Returns one sparse map per scale.
pub fn backbone_forward<'t>(
    bev0: SparseVar<'t>,
    cfg: &BackboneConfig,
    vars: &BackboneVars<'t>,
    mode: &Mode<'_>,
    sink: AttnSink<'_>,
) -> Result<Vec<SparseVar<'t>>> {
    cfg.validate()?;
    let mut pyramid: Vec<SparseVar<'t>> = Vec::with_capacity(cfg.scales.len());
    for (i, sc) in cfg.scales.iter().enumerate() {
        let input = if i == 0 {
            bev0.clone()
        } else {
            let prev = &pyramid[i - 1];
            let (layout, sources) = crate::window::strided_plan(&prev.layout, sc.factor)?;
            let c = prev.feats.shape()[1];
            let n = layout.len();
            let feats = prev.feats.gather_rows(Rc::new(sources), vec![n, c]);
            SparseVar { layout, feats }
        };
        let out = block_forward(
            &input,
            &sc.block,
            &sc.window,
            cfg.pe_mode,
            &vars.blocks[i],
            mode,
            &format!("backbone.s{i}"),
            sink,
        );
        pyramid.push(out);
    }
    Ok(pyramid)
}

/// Weights for one fusion step (everything below the top scale).
pub struct FusionStepVars<'t> {
    pub proj_w: Var<'t>,
    pub proj_b: Var<'t>,
    pub block: BlockVars<'t>,
}

pub struct FusionVars<'t> {
    pub steps: Vec<FusionStepVars<'t>>,
}

/// Fusion block depth: a 1-layer block (one layer each side of the shift).
pub fn fusion_block_config(survival_prob: f64) -> BlockConfig {
    BlockConfig { layers_pre: 1, layers_post: 1, survival_prob, extra_shifts: 0 }
}

impl<'t> FusionVars<'t> {
    /// Binds `num_scales - 1` fusion steps (`fuse.s0 .. fuse.s{n-2}`).
    pub fn bind(binder: &Binder<'t, '_>, cfg: &BackboneConfig, prefix: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for i in 0..cfg.scales.len().saturating_sub(1) {
            let block_cfg = fusion_block_config(cfg.scales[i].block.survival_prob);
            steps.push(FusionStepVars {
                proj_w: binder.bind(&format!("{prefix}.s{i}.proj_w"))?,
                proj_b: binder.bind(&format!("{prefix}.s{i}.proj_b"))?,
                block: BlockVars::bind(binder, &format!("{prefix}.s{i}"), &block_cfg, cfg.heads)?,
            });
        }
        Ok(FusionVars { steps })
    }
}

/// Top-down fusion: the coarsest scale passes through; every finer scale
/// gets its coarser neighbor upsampled onto its own occupancy,
/// concatenated, projected back to C channels, and refined by a 1-layer
/// block. Output occupancy equals the input occupancy at every scale.
#[allow(clippy::too_many_arguments)]
pub fn fuse_pyramid<'t>(
    pyramid: &[SparseVar<'t>],
    cfg: &BackboneConfig,
    vars: &FusionVars<'t>,
    mode: &Mode<'_>,
    sink: AttnSink<'_>,
) -> Result<Vec<SparseVar<'t>>> {
    if pyramid.is_empty() {
        return Err(Error::Contract("empty pyramid".into()));
    }
    let n = pyramid.len();
    let mut fused: Vec<Option<SparseVar<'t>>> = vec![None; n];
    fused[n - 1] = Some(pyramid[n - 1].clone());
    for i in (0..n - 1).rev() {
        let coarser = fused[i + 1].as_ref().unwrap();
        let fine = &pyramid[i];
        let c = fine.feats.shape()[1];
        let v = fine.layout.len();
        let parents = upsample_parent_indices(&coarser.layout, &fine.layout)?;
        let up = coarser.feats.gather_rows(Rc::new(parents), vec![v, c]);
        let cat = fine.feats.concat_cols(up);
        let step = &vars.steps[i];
        let projected = cat.matmul(step.proj_w).add_rows(step.proj_b);
        let block_cfg = fusion_block_config(cfg.scales[i].block.survival_prob);
        let refined = block_forward(
            &SparseVar { layout: fine.layout.clone(), feats: projected },
            &block_cfg,
            &cfg.scales[i].window,
            cfg.pe_mode,
            &step.block,
            mode,
            &format!("fuse.s{i}"),
            sink,
        );
        fused[i] = Some(refined);
    }
    Ok(fused.into_iter().map(Option::unwrap).collect())
}
