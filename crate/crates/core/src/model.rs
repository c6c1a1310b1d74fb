//! The full detector: embedding, backbone, fusion, per-class heads, loss
//! assembly, and decoding, all over one tape per scene.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_forward, block_forward, fuse_pyramid, fusion_block_config, AttnSink, BackboneConfig,
    BackboneVars, BlockConfig, BlockVars, FusionVars, Mode, ScaleConfig, SparseVar,
};
use crate::boxes::BoxParams;
use crate::error::{Error, Result};
use crate::head::{
    assign_targets, bin_heading_loss, heatmap_focal_loss, iou_loss_term, seg_focal_loss,
    total_loss, voxel_diffuse_vars, ClassTargets, Detection, HeadConfig, HeadOutput, LossConfig,
};
use crate::scene::{PointCloudScene, CLASS_NAMES};
use crate::sparse::GridGeometry;
use crate::tensor::params::{Binder, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{init_layer_params, PeMode};
use crate::voxelize::{dynamic_voxelize, embed_and_pool_vars, EmbedVars, POINT_FEATURES};
use crate::window::WindowConfig;

/// Everything needed to build and run the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub voxel_size: f64,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub num_classes: usize,
    /// Feed point offsets to the voxel center (vs absolute coordinates).
    pub center_offsets: bool,
    /// Groundtruth boxes with fewer interior points are ignored.
    pub min_box_points: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: C=32, 4 heads, five scales with strides
    /// 1/2/4/16/32, 10x10 windows, N=M=2 per block.
    pub fn desk_default() -> Self {
        let window = WindowConfig::default();
        let block = BlockConfig::default();
        let scales = [1usize, 2, 2, 4, 2]
            .iter()
            .map(|&factor| ScaleConfig { factor, window, block })
            .collect();
        ModelConfig {
            channels: 32,
            heads: 4,
            mlp_ratio: 2,
            voxel_size: 0.32,
            backbone: BackboneConfig { scales, heads: 4, pe_mode: PeMode::WindowLocal },
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            num_classes: 2,
            center_offsets: true,
            min_box_points: 5,
        }
    }

    /// Shrink to `n` scales (keeping the leading factors) and `c` channels.
    pub fn reduced(mut self, n_scales: usize, c: usize, heads: usize) -> Self {
        self.backbone.scales.truncate(n_scales.max(1));
        self.channels = c;
        self.heads = heads;
        self.backbone.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate(self.num_classes)?;
        if self.channels % self.heads != 0 {
            return Err(Error::Contract(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.backbone.heads != self.heads {
            return Err(Error::Contract("backbone head count differs from model".into()));
        }
        Ok(())
    }

    /// Output width of the per-class head MLP: heatmap logit, six box
    /// parameters, bin logits, bin residuals.
    pub fn head_out_width(&self) -> usize {
        1 + 6 + 2 * self.loss.heading_bins
    }
}

/// The detector: config plus named parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    n_in: usize,
    n_out: usize,
) {
    let s = 1.0 / (n_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::rand_uniform(rng, vec![n_in, n_out], s));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![n_out]));
}

impl Model {
    /// Fresh model with seeded random init.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;

        // embedding net: 6 -> C -> C
        for (i, n_in) in [POINT_FEATURES, c].iter().enumerate() {
            let p = format!("embed.l{i}");
            init_linear(&mut store, &mut rng, &p, *n_in, c);
            store.insert(format!("{p}.ln_g"), Tensor::full(vec![c], 1.0));
            store.insert(format!("{p}.ln_b"), Tensor::zeros(vec![c]));
        }

        // backbone blocks
        for (si, sc) in cfg.backbone.scales.iter().enumerate() {
            for (g, &n) in sc.block.stage_layers().iter().enumerate() {
                for l in 0..n {
                    init_layer_params(
                        &mut store,
                        &mut rng,
                        &format!("backbone.s{si}.st{g}.l{l}"),
                        c,
                        cfg.mlp_ratio,
                    );
                }
            }
        }

        // fusion steps below the top scale
        for si in 0..cfg.backbone.scales.len().saturating_sub(1) {
            let s = 1.0 / (2.0 * c as f64).sqrt();
            store.insert(format!("fuse.s{si}.proj_w"), Tensor::rand_uniform(&mut rng, vec![2 * c, c], s));
            store.insert(format!("fuse.s{si}.proj_b"), Tensor::zeros(vec![c]));
            let bc = fusion_block_config(cfg.backbone.scales[si].block.survival_prob);
            for (g, &n) in bc.stage_layers().iter().enumerate() {
                for l in 0..n {
                    init_layer_params(
                        &mut store,
                        &mut rng,
                        &format!("fuse.s{si}.st{g}.l{l}"),
                        c,
                        cfg.mlp_ratio,
                    );
                }
            }
        }

        // per-class heads
        for class in 0..cfg.num_classes {
            let name = CLASS_NAMES[class];
            init_linear(&mut store, &mut rng, &format!("head.{name}.seg"), c, 1);
            let bc = fusion_block_config(cfg.backbone.scales[0].block.survival_prob);
            for (g, &n) in bc.stage_layers().iter().enumerate() {
                for l in 0..n {
                    init_layer_params(
                        &mut store,
                        &mut rng,
                        &format!("head.{name}.refine.st{g}.l{l}"),
                        c,
                        cfg.mlp_ratio,
                    );
                }
            }
            init_linear(&mut store, &mut rng, &format!("head.{name}.out.l0"), c, c);
            init_linear(&mut store, &mut rng, &format!("head.{name}.out.l1"), c, cfg.head_out_width());
            // start the heatmap pessimistic and the extents positive
            let b1 = store.get_mut(&format!("head.{name}.out.l1.b"))?;
            b1.values_mut()[0] = -2.0;
            for i in 4..7 {
                b1.values_mut()[i] = 1.0;
            }
        }

        Ok(Model { cfg, params: store })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }
}

/// Per-class forward products on the tape.
pub struct ClassForward<'t> {
    pub class: usize,
    /// Occupancy the segmentation scores live on (the fused scale).
    pub seg: SparseVar<'t>,
    pub seg_scores: Var<'t>,
    /// Occupancy after diffusion; head outputs live here.
    pub diffused: SparseVar<'t>,
    pub heatmap: Var<'t>,
    pub box_params: Var<'t>,
    pub bin_logits: Var<'t>,
    pub bin_residuals: Var<'t>,
}

/// Whole-scene forward products.
pub struct SceneForward<'t> {
    pub geom: GridGeometry,
    pub pyramid: Vec<SparseVar<'t>>,
    pub fused: Vec<SparseVar<'t>>,
    pub classes: Vec<ClassForward<'t>>,
}

/// Per-class loss parts (seg, heatmap, box) as plain numbers.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub per_class: Vec<(f64, f64, f64)>,
    pub total: f64,
}

impl Model {
    /// Run the pipeline on one scene. `sink` captures attention scores.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        scene: &PointCloudScene,
        mode: &Mode<'_>,
        sink: AttnSink<'_>,
    ) -> Result<SceneForward<'t>> {
        let binder = Binder::new(tape, &self.params);
        self.forward_bound(&binder, scene, mode, sink)
    }

    /// Forward with an externally owned binder (training reads the bound
    /// leaves back out to route gradients).
    pub fn forward_bound<'t>(
        &self,
        binder: &Binder<'t, '_>,
        scene: &PointCloudScene,
        mode: &Mode<'_>,
        sink: AttnSink<'_>,
    ) -> Result<SceneForward<'t>> {
        let tape = binder.tape();
        let assign = dynamic_voxelize(scene, self.cfg.voxel_size)?;
        let geom = assign.geom;
        let embed = EmbedVars::bind(binder, "embed")?;
        let feats = embed_and_pool_vars(tape, &assign, scene, &embed, self.cfg.center_offsets);
        let bev0 = SparseVar { layout: assign.layout.clone(), feats };

        let bvars = BackboneVars::bind(binder, &self.cfg.backbone, "backbone")?;
        let pyramid = backbone_forward(bev0, &self.cfg.backbone, &bvars, mode, sink)?;
        let fvars = FusionVars::bind(binder, &self.cfg.backbone, "fuse")?;
        let fused = fuse_pyramid(&pyramid, &self.cfg.backbone, &fvars, mode, sink)?;

        let mut classes = Vec::with_capacity(self.cfg.num_classes);
        for class in 0..self.cfg.num_classes {
            let name = CLASS_NAMES[class];
            let scale = self.cfg.head.class_scale[class];
            let seg_in = &fused[scale];
            let v = seg_in.layout.len();
            let seg_w = binder.bind(&format!("head.{name}.seg.w"))?;
            let seg_b = binder.bind(&format!("head.{name}.seg.b"))?;
            let seg_scores = seg_in
                .feats
                .matmul(seg_w)
                .add_rows(seg_b)
                .sigmoid()
                .reshape(vec![v.max(1).min(v)]);
            let seg_scores = if v == 0 { tape.constant(Tensor::zeros(vec![0])) } else { seg_scores };

            let (dl, dfeats, _dscores) = voxel_diffuse_vars(
                &seg_in.layout,
                seg_in.feats,
                seg_scores,
                self.cfg.head.diffusion_k[class],
                self.cfg.head.fg_cutoff,
            )?;

            let refine_cfg = fusion_block_config(self.cfg.backbone.scales[scale].block.survival_prob);
            let refine_vars = BlockVars::bind(
                binder,
                &format!("head.{name}.refine"),
                &refine_cfg,
                self.cfg.heads,
            )?;
            let refined = block_forward(
                &SparseVar { layout: dl.clone(), feats: dfeats },
                &refine_cfg,
                &self.cfg.backbone.scales[scale].window,
                self.cfg.backbone.pe_mode,
                &refine_vars,
                mode,
                &format!("head.{name}.refine"),
                sink,
            );

            // per-voxel output MLP
            let w1 = binder.bind(&format!("head.{name}.out.l0.w"))?;
            let b1 = binder.bind(&format!("head.{name}.out.l0.b"))?;
            let w2 = binder.bind(&format!("head.{name}.out.l1.w"))?;
            let b2 = binder.bind(&format!("head.{name}.out.l1.b"))?;
            let hidden = refined.feats.matmul(w1).add_rows(b1).gelu();
            let out = hidden.matmul(w2).add_rows(b2);
            let vd = refined.layout.len();
            let width = self.cfg.head_out_width();
            let bins = self.cfg.loss.heading_bins;
            let col_block = |start: usize, len: usize| -> Var<'t> {
                let idx: Rc<Vec<i64>> = Rc::new(
                    (0..vd as i64)
                        .flat_map(|r| {
                            (0..len as i64).map(move |j| r * width as i64 + start as i64 + j)
                        })
                        .collect(),
                );
                out.gather_elems(idx, vec![vd, len])
            };
            let heatmap = col_block(0, 1).sigmoid().reshape(vec![vd]);
            let box_params = col_block(1, 6);
            let bin_logits = col_block(7, bins);
            let bin_residuals = col_block(7 + bins, bins);

            classes.push(ClassForward {
                class,
                seg: seg_in.clone(),
                seg_scores,
                diffused: SparseVar { layout: dl, feats: refined.feats },
                heatmap,
                box_params,
                bin_logits,
                bin_residuals,
            });
        }

        Ok(SceneForward { geom, pyramid, fused, classes })
    }

    /// Forward plus the full training loss.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        scene: &PointCloudScene,
        mode: &Mode<'_>,
    ) -> Result<(Var<'t>, LossParts)> {
        let binder = Binder::new(tape, &self.params);
        self.loss_bound(&binder, scene, mode)
    }

    /// Loss with an externally owned binder.
    pub fn loss_bound<'t>(
        &self,
        binder: &Binder<'t, '_>,
        scene: &PointCloudScene,
        mode: &Mode<'_>,
    ) -> Result<(Var<'t>, LossParts)> {
        let tape = binder.tape();
        let fwd = self.forward_bound(binder, scene, mode, None)?;
        let mut per_class_vars = Vec::new();
        let mut per_class_vals = Vec::new();
        for cf in &fwd.classes {
            let seg_targets = assign_targets(
                scene,
                &fwd.geom,
                &cf.seg.layout,
                cf.class,
                &self.cfg.head,
                &self.cfg.loss,
                self.cfg.min_box_points,
            );
            let seg = seg_focal_loss(tape, cf.seg_scores, &seg_targets.fg, self.cfg.loss.prob_clamp);

            let head_targets = assign_targets(
                scene,
                &fwd.geom,
                &cf.diffused.layout,
                cf.class,
                &self.cfg.head,
                &self.cfg.loss,
                self.cfg.min_box_points,
            );
            let hm = heatmap_focal_loss(
                tape,
                cf.heatmap,
                &head_targets.heatmap,
                head_targets.n_boxes,
                &self.cfg.loss,
            );
            let bx = self.box_loss(tape, cf, &head_targets, &fwd.geom)?;
            per_class_vals.push((seg.item(), hm.item(), bx.item()));
            per_class_vars.push((seg, hm, bx));
        }
        let total = total_loss(tape, &per_class_vars, &self.cfg.loss);
        let parts = LossParts { per_class: per_class_vals, total: total.item() };
        Ok((total, parts))
    }

    /// Box regression loss: mean over active voxels of smooth-L1 on the
    /// six box parameters, the heading bin loss, and the IoU term.
    fn box_loss<'t>(
        &self,
        tape: &'t Tape,
        cf: &ClassForward<'t>,
        targets: &ClassTargets,
        geom: &GridGeometry,
    ) -> Result<Var<'t>> {
        let active: Vec<usize> = (0..targets.active.len())
            .filter(|&i| targets.active[i] && targets.reg[i].is_some())
            .collect();
        if active.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let a = active.len();
        let bins = self.cfg.loss.heading_bins;

        // smooth-L1 over (dx, dy, dz, l, w, h)
        let rows: Rc<Vec<i64>> = Rc::new(active.iter().map(|&i| i as i64).collect());
        let pred_boxes = cf.box_params.gather_rows(rows.clone(), vec![a, 6]);
        let mut tvals = Vec::with_capacity(a * 6);
        for &i in &active {
            let t = targets.reg[i].unwrap();
            tvals.extend_from_slice(&[t.dx, t.dy, t.dz, t.l, t.w, t.h]);
        }
        let target_boxes = tape.constant(Tensor::new(vec![a, 6], tvals)?);
        let smooth = pred_boxes.sub(target_boxes).huber(self.cfg.loss.smooth_l1_delta).sum();

        // heading bin loss
        let logit_rows = cf.bin_logits.gather_rows(rows.clone(), vec![a, bins]);
        let res_rows = cf.bin_residuals.gather_rows(rows.clone(), vec![a, bins]);
        let gt_bins: Vec<(usize, f64)> = active
            .iter()
            .map(|&i| {
                let t = targets.reg[i].unwrap();
                (t.bin, t.residual)
            })
            .collect();
        let heading = bin_heading_loss(logit_rows, res_rows, &gt_bins, &self.cfg.loss).sum();

        // IoU on decoded absolute boxes
        let mut iou_acc = tape.scalar(0.0);
        let box_vals = cf.box_params.value();
        let logit_vals = cf.bin_logits.value();
        for (ai, &i) in active.iter().enumerate() {
            let t = targets.reg[i].unwrap();
            let (r, c) = cf.diffused.layout.coords()[i];
            let (wx, wy) = geom.center_of(r, c, cf.diffused.layout.stride);
            let pick = |col: usize| -> Var<'t> {
                cf.box_params.gather_elems(Rc::new(vec![(i * 6 + col) as i64]), vec![1])
            };
            // decoded heading: argmax bin (by value) + its residual
            let lrow = &logit_vals.values()[i * bins..(i + 1) * bins];
            let best_bin = lrow
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            let res = cf
                .bin_residuals
                .gather_elems(Rc::new(vec![(i * bins + best_bin) as i64]), vec![1]);
            let width = 2.0 * std::f64::consts::PI / bins as f64;
            let center = (best_bin as f64 + 0.5) * width - std::f64::consts::PI;
            let yaw = res.mul_scalar(width * 0.5).add_scalar(center);
            let pred = BoxParams {
                cx: pick(0).add_scalar(wx),
                cy: pick(1).add_scalar(wy),
                cz: pick(2),
                l: pick(3),
                w: pick(4),
                h: pick(5),
                yaw,
            };
            let gt = crate::boxes::Box3D::new(
                wx + t.dx,
                wy + t.dy,
                t.dz,
                t.l,
                t.w,
                t.h,
                t.yaw,
            );
            iou_acc = iou_acc.add(iou_loss_term(&pred, &gt, self.cfg.loss.iou_loss));
            let _ = (ai, &box_vals);
        }

        Ok(smooth.add(heading).add(iou_acc).mul_scalar(1.0 / a as f64))
    }

    /// Decode detections for one scene (deterministic eval path).
    pub fn predict(&self, scene: &PointCloudScene) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, scene, &Mode::Eval, None)?;
        let mut dets = Vec::new();
        for cf in &fwd.classes {
            let out = HeadOutput {
                heatmap: cf.heatmap.value().into_values(),
                box_params: cf.box_params.value(),
                bin_logits: cf.bin_logits.value(),
                bin_residuals: cf.bin_residuals.value(),
            };
            dets.extend(crate::head::decode(
                &cf.diffused.layout,
                &fwd.geom,
                &out,
                cf.class,
                &self.cfg.head,
                self.cfg.loss.heading_bins,
            ));
        }
        Ok(dets)
    }
}
