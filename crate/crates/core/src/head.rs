//! Detection head: foreground segmentation, voxel diffusion, groundtruth
//! assignment, the center-style heatmap/box losses, and NMS-free decoding.

use std::rc::Rc;

use crate::boxes::{rotated_iou_3d_generic, wrap_angle, Box3D, BoxParams};
use crate::error::{Error, Result};
use crate::scene::PointCloudScene;
use crate::sparse::{GridGeometry, SparseBev, SparseLayout};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Head thresholds and per-class knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Foreground segmentation cutoff (gamma).
    pub fg_cutoff: f64,
    /// Odd diffusion window per class.
    pub diffusion_k: Vec<usize>,
    /// Regression-loss gate on the groundtruth heatmap (delta_1).
    pub delta1: f64,
    /// Decode score cutoff (delta_2).
    pub delta2: f64,
    /// Per-class cap on regression targets, by descending heatmap value.
    pub target_caps: Vec<usize>,
    /// Fused scale feeding each class head.
    pub class_scale: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fg_cutoff: 0.05,
            diffusion_k: vec![5, 5],
            delta1: 0.2,
            delta2: 0.1,
            target_caps: vec![1024, 800],
            class_scale: vec![0, 0],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.fg_cutoff) || self.fg_cutoff <= 0.0 {
            return Err(Error::Contract("fg cutoff must be in (0, 1)".into()));
        }
        if self.diffusion_k.len() != num_classes
            || self.target_caps.len() != num_classes
            || self.class_scale.len() != num_classes
        {
            return Err(Error::Contract("per-class head config length mismatch".into()));
        }
        if self.diffusion_k.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Contract("diffusion window must be odd".into()));
        }
        if !(self.delta2 <= self.delta1 && self.delta1 <= 1.0 && self.delta2 >= 0.0) {
            return Err(Error::Contract("need 0 <= delta2 <= delta1 <= 1".into()));
        }
        Ok(())
    }
}

/// Which IoU enters the box-regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouLossKind {
    /// 1 - rotated IoU with z-interval overlap.
    #[default]
    Rotated3d,
    /// Distance-IoU: adds a normalized center-distance penalty.
    Distance,
}

/// Loss constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Indicator split of the heatmap focal loss (positives are h > 1-eps).
    pub focal_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Heatmap focal weights within the total loss.
    pub lambda_seg: f64,
    pub lambda_hm: f64,
    pub smooth_l1_delta: f64,
    pub heading_bins: usize,
    /// Min-overlap for the Gaussian radius construction.
    pub gaussian_overlap: f64,
    /// Probability clamp inside logs.
    pub prob_clamp: f64,
    pub iou_loss: IouLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_eps: 1e-3,
            alpha: 2.0,
            beta: 4.0,
            lambda_seg: 200.0,
            lambda_hm: 10.0,
            smooth_l1_delta: 1.0,
            heading_bins: 12,
            gaussian_overlap: 0.7,
            prob_clamp: 1e-7,
            iou_loss: IouLossKind::Rotated3d,
        }
    }
}

/// A decoded detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub b: Box3D,
}

impl Detection {
    /// `class,score,cx,cy,cz,l,w,h,heading`
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            crate::scene::CLASS_NAMES[self.class],
            self.score,
            self.b.cx,
            self.b.cy,
            self.b.cz,
            self.b.l,
            self.b.w,
            self.b.h,
            self.b.yaw
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != 9 {
            return Err(Error::Parse(format!("expected 9 fields, got: {line}")));
        }
        let num = |i: usize| -> Result<f64> {
            vals[i].trim().parse().map_err(|_| Error::Parse(format!("bad number: {line}")))
        };
        Ok(Detection {
            class: crate::scene::class_id(vals[0].trim())?,
            score: num(1)?,
            b: Box3D::new(num(2)?, num(3)?, num(4)?, num(5)?, num(6)?, num(7)?, num(8)?),
        })
    }
}

// ---------------------------------------------------------------------------
// groundtruth assignment
// ---------------------------------------------------------------------------

/// Regression target at one voxel: center offsets relative to the voxel
/// center, raw extents and heading, plus the heading-bin encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTarget {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub bin: usize,
    /// Within-bin residual normalized by the half bin width.
    pub residual: f64,
}

/// Per-voxel targets for one class on one occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub fg: Vec<bool>,
    pub heatmap: Vec<f64>,
    pub reg: Vec<Option<RegTarget>>,
    /// Regression-active flags: heatmap above delta_1, capped per class.
    pub active: Vec<bool>,
    /// Number of groundtruth boxes of this class that survived the
    /// min-points filter.
    pub n_boxes: usize,
}

/// Heading-bin encoding over uniform bins in [-pi, pi).
pub fn heading_to_bin(theta: f64, bins: usize) -> (usize, f64) {
    let width = 2.0 * std::f64::consts::PI / bins as f64;
    let shifted = wrap_angle(theta) + std::f64::consts::PI;
    let idx = ((shifted / width) as usize).min(bins - 1);
    let center = (idx as f64 + 0.5) * width - std::f64::consts::PI;
    let residual = ((wrap_angle(theta) - center) / (width * 0.5)).clamp(-1.0, 1.0);
    (idx, residual)
}

pub fn bin_to_heading(bin: usize, residual: f64, bins: usize) -> f64 {
    let width = 2.0 * std::f64::consts::PI / bins as f64;
    let center = (bin as f64 + 0.5) * width - std::f64::consts::PI;
    wrap_angle(center + residual * width * 0.5)
}

/// CenterNet-style Gaussian radius for a box footprint (in voxels) at a
/// given min overlap. The de-facto standard three-case construction.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let sq1 = (b1 * b1 - 4.0 * c1).max(0.0).sqrt();
    let r1 = (b1 + sq1) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let sq2 = (b2 * b2 - 16.0 * c2).max(0.0).sqrt();
    let r2 = (b2 + sq2) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (b3 + sq3) / 2.0;
    r1.min(r2).min(r3)
}

/// Assign per-voxel targets for `class` on the given occupancy.
///
/// Foreground labels come from point-in-rotated-rectangle tests of voxel
/// centers; the heatmap is a per-box Gaussian splat centered on the box's
/// covering voxel (so a voxel containing the center gets exactly 1),
/// evaluated only at occupied voxels and max-combined across boxes.
/// Boxes with fewer than `min_points` interior points are ignored.
pub fn assign_targets(
    scene: &PointCloudScene,
    geom: &GridGeometry,
    layout: &SparseLayout,
    class: usize,
    head_cfg: &HeadConfig,
    loss_cfg: &LossConfig,
    min_points: usize,
) -> ClassTargets {
    let stride = layout.stride;
    let boxes: Vec<&Box3D> = scene
        .boxes
        .iter()
        .filter(|gt| gt.class == class && scene.points_inside(&gt.b) >= min_points)
        .map(|gt| &gt.b)
        .collect();
    let v = layout.len();
    let mut fg = vec![false; v];
    let mut heatmap = vec![0.0; v];
    let mut reg: Vec<Option<RegTarget>> = vec![None; v];

    // per-box quantized centers and sigmas, in this layout's voxel units
    let vx = geom.voxel_size * stride as f64;
    let centers_sigmas: Vec<((f64, f64), f64)> = boxes
        .iter()
        .map(|b| {
            let crow = ((b.cy - geom.origin_y) / vx).floor();
            let ccol = ((b.cx - geom.origin_x) / vx).floor();
            let radius = gaussian_radius(b.w / vx, b.l / vx, loss_cfg.gaussian_overlap);
            let sigma = (radius / 3.0).max(1.0);
            ((crow, ccol), sigma)
        })
        .collect();

    for (i, &(r, c)) in layout.coords().iter().enumerate() {
        let (wx, wy) = geom.center_of(r, c, stride);
        let mut best_h = 0.0;
        let mut best_box: Option<usize> = None;
        for (bi, b) in boxes.iter().enumerate() {
            if b.contains_bev(wx, wy) {
                fg[i] = true;
            }
            let ((crow, ccol), sigma) = centers_sigmas[bi];
            let d2 = (r as f64 - crow).powi(2) + (c as f64 - ccol).powi(2);
            let h = (-d2 / (2.0 * sigma * sigma)).exp();
            if h > best_h {
                best_h = h;
                best_box = Some(bi);
            }
        }
        heatmap[i] = best_h;
        if let Some(bi) = best_box {
            let b = boxes[bi];
            let (bin, residual) = heading_to_bin(b.yaw, loss_cfg.heading_bins);
            reg[i] = Some(RegTarget {
                dx: b.cx - wx,
                dy: b.cy - wy,
                dz: b.cz,
                l: b.l,
                w: b.w,
                h: b.h,
                yaw: b.yaw,
                bin,
                residual,
            });
        }
    }

    // activate h > delta1, keeping at most the per-class cap by descending h
    let mut order: Vec<usize> = (0..v).filter(|&i| heatmap[i] > head_cfg.delta1).collect();
    order.sort_by(|&a, &b| heatmap[b].partial_cmp(&heatmap[a]).unwrap().then(a.cmp(&b)));
    order.truncate(head_cfg.target_caps[class]);
    let mut active = vec![false; v];
    for &i in &order {
        active[i] = true;
    }

    ClassTargets { fg, heatmap, reg, active, n_boxes: boxes.len() }
}

// ---------------------------------------------------------------------------
// voxel diffusion
// ---------------------------------------------------------------------------

/// The union of k x k neighborhoods of the kept coordinates, clipped to
/// the grid.
pub fn diffusion_occupancy(
    kept: &[(u32, u32)],
    rows: usize,
    cols: usize,
    k: usize,
) -> Vec<(u32, u32)> {
    let half = (k / 2) as i64;
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &(r, c) in kept {
        for dr in -half..=half {
            for dc in -half..=half {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                    out.push((nr as u32, nc as u32));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Differentiable voxel diffusion over tape features.
///
/// Keeps voxels with `score > gamma`, scatters their features (plus the
/// score as an extra channel) to the dense grid, max-pools k x k, and
/// re-sparsifies on the neighborhood union. Returns the new layout, its
/// features, and the diffused scores.
pub fn voxel_diffuse_vars<'t>(
    layout: &SparseLayout,
    feats: Var<'t>,
    scores: Var<'t>,
    k: usize,
    gamma: f64,
) -> Result<(SparseLayout, Var<'t>, Var<'t>)> {
    if k % 2 == 0 {
        return Err(Error::Contract("diffusion window must be odd".into()));
    }
    let c = feats.shape()[1];
    let score_vals = scores.value();
    let kept_idx: Vec<usize> =
        (0..layout.len()).filter(|&i| score_vals.values()[i] > gamma).collect();
    let (rows, cols) = (layout.rows, layout.cols);
    if kept_idx.is_empty() {
        let empty = SparseLayout::empty(rows, cols, layout.stride);
        let t = feats.tape();
        return Ok((
            empty,
            t.constant(Tensor::zeros(vec![0, c])),
            t.constant(Tensor::zeros(vec![0, 1])),
        ));
    }
    let kept_coords: Vec<(u32, u32)> = kept_idx.iter().map(|&i| layout.coords()[i]).collect();

    // stack [feats | score] and scatter the kept rows to the dense grid
    let scored = feats.concat_cols(scores.reshape(vec![layout.len(), 1]));
    let mut dense_idx = vec![-1i64; rows * cols];
    for (slot, &vi) in kept_idx.iter().enumerate() {
        dense_idx[layout.flat(layout.coords()[vi])] = slot as i64;
    }
    let kept_rows: Rc<Vec<i64>> = Rc::new(kept_idx.iter().map(|&i| i as i64).collect());
    let kept = scored.gather_rows(kept_rows, vec![kept_idx.len(), c + 1]);
    let dense = kept.gather_rows(Rc::new(dense_idx), vec![rows, cols, c + 1]);
    let pooled = dense.max_pool2d(rows, cols, c + 1, k, 0.0);

    let union = diffusion_occupancy(&kept_coords, rows, cols, k);
    let out_layout = SparseLayout::new(rows, cols, layout.stride, union.clone())?;
    let union_rows: Rc<Vec<i64>> =
        Rc::new(union.iter().map(|&coord| out_layout.flat(coord) as i64).collect());
    let sparse = pooled.gather_rows(union_rows, vec![union.len(), c + 1]);

    // split features and score channel
    let feat_idx: Rc<Vec<i64>> = Rc::new(
        (0..union.len() as i64)
            .flat_map(|r| (0..c as i64).map(move |j| r * (c as i64 + 1) + j))
            .collect(),
    );
    let score_idx: Rc<Vec<i64>> =
        Rc::new((0..union.len() as i64).map(|r| r * (c as i64 + 1) + c as i64).collect());
    let out_feats = sparse.gather_elems(feat_idx, vec![union.len(), c]);
    let out_scores = sparse.gather_elems(score_idx, vec![union.len(), 1]);
    Ok((out_layout, out_feats, out_scores))
}

/// Plain voxel diffusion (runs a throwaway tape over the same path).
pub fn voxel_diffuse(
    bev: &SparseBev,
    scores: &[f64],
    k: usize,
    gamma: f64,
) -> Result<(SparseBev, Vec<f64>)> {
    let tape = Tape::new();
    let feats = tape.constant(bev.feats.clone());
    let s = tape.constant(Tensor::new(vec![bev.layout.len()], scores.to_vec())?);
    let (layout, f, sc) = voxel_diffuse_vars(&bev.layout, feats, s, k, gamma)?;
    let out_scores = sc.value().into_values();
    Ok((SparseBev::new(layout, f.value())?, out_scores))
}

// ---------------------------------------------------------------------------
// losses (autodiff graphs)
// ---------------------------------------------------------------------------

/// Two-class focal loss, mean over all valid voxels. Zero when empty.
pub fn seg_focal_loss<'t>(tape: &'t Tape, scores: Var<'t>, labels: &[bool], clamp: f64) -> Var<'t> {
    let v = labels.len();
    if v == 0 {
        return tape.scalar(0.0);
    }
    let p = scores.clamp(clamp, 1.0 - clamp);
    let pos: Rc<Vec<f64>> =
        Rc::new(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
    let neg: Rc<Vec<f64>> =
        Rc::new(labels.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect());
    let one_minus = p.neg().add_scalar(1.0);
    // positives: (1-p)^2 ln p, negatives: p^2 ln(1-p)
    let pos_term = one_minus.powi(2).mul(p.ln()).mul_const(pos);
    let neg_term = p.powi(2).mul(one_minus.ln()).mul_const(neg);
    pos_term.add(neg_term).sum().mul_scalar(-1.0 / v as f64)
}

/// Penalty-reduced focal loss on the heatmap, summed over voxels and
/// divided by the class box count. Zero when the class has no boxes.
pub fn heatmap_focal_loss<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    target: &[f64],
    n_boxes: usize,
    cfg: &LossConfig,
) -> Var<'t> {
    if n_boxes == 0 || target.is_empty() {
        return tape.scalar(0.0);
    }
    let h = pred.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let pos: Rc<Vec<f64>> = Rc::new(
        target.iter().map(|&t| if t > 1.0 - cfg.focal_eps { 1.0 } else { 0.0 }).collect(),
    );
    // negative weight (1 - h_gt)^beta, zeroed on positives
    let negw: Rc<Vec<f64>> = Rc::new(
        target
            .iter()
            .map(|&t| if t > 1.0 - cfg.focal_eps { 0.0 } else { (1.0 - t).powf(cfg.beta) })
            .collect(),
    );
    let alpha = cfg.alpha as i32;
    let one_minus = h.neg().add_scalar(1.0);
    let pos_term = one_minus.powi(alpha).mul(h.ln()).mul_const(pos);
    let neg_term = h.powi(alpha).mul(one_minus.ln()).mul_const(negw);
    pos_term.add(neg_term).sum().mul_scalar(-1.0 / n_boxes as f64)
}

/// Heading bin loss per active voxel: cross-entropy over the bin logits
/// plus smooth-L1 on the true bin's normalized residual. Returns `[A]`.
pub fn bin_heading_loss<'t>(
    bin_logits: Var<'t>,
    bin_residuals: Var<'t>,
    gt: &[(usize, f64)],
    cfg: &LossConfig,
) -> Var<'t> {
    let a = gt.len();
    let bins = cfg.heading_bins;
    let logp = bin_logits.log_softmax();
    let pick: Rc<Vec<i64>> =
        Rc::new(gt.iter().enumerate().map(|(i, &(b, _))| (i * bins + b) as i64).collect());
    let ce = logp.gather_elems(pick.clone(), vec![a]).neg();
    let picked_res = bin_residuals.gather_elems(pick, vec![a]);
    let gt_res = bin_logits
        .tape()
        .constant(Tensor::new(vec![a], gt.iter().map(|&(_, r)| r).collect()).unwrap());
    let res_loss = picked_res.sub(gt_res).huber(cfg.smooth_l1_delta);
    ce.add(res_loss)
}

/// Decoded predicted box at one voxel as tape scalars (for the IoU term).
pub struct PredBoxVars<'t> {
    pub params: BoxParams<Var<'t>>,
}

/// IoU loss for one (pred, gt) pair: `1 - IoU`.
pub fn iou_loss_term<'t>(pred: &BoxParams<Var<'t>>, gt: &Box3D, kind: IouLossKind) -> Var<'t> {
    let tape = pred.cx.tape();
    let g = BoxParams {
        cx: tape.scalar(gt.cx),
        cy: tape.scalar(gt.cy),
        cz: tape.scalar(gt.cz),
        l: tape.scalar(gt.l),
        w: tape.scalar(gt.w),
        h: tape.scalar(gt.h),
        yaw: tape.scalar(gt.yaw),
    };
    let iou = rotated_iou_3d_generic(pred, &g);
    let one = tape.scalar(1.0);
    let base = one.sub(iou);
    match kind {
        IouLossKind::Rotated3d => base,
        IouLossKind::Distance => {
            // add squared center distance over the squared enclosing diagonal
            let dx = pred.cx.sub(g.cx);
            let dy = pred.cy.sub(g.cy);
            let d2 = dx.mul(dx).add(dy.mul(dy));
            let span = pred.l.max2(pred.w).max2(g.l).max2(g.w);
            let diag2 = d2.add(span.mul(span)).add_scalar(1e-9);
            base.add(d2.div(diag2))
        }
    }
}

/// Eq-style total loss: sum over classes of
/// `lambda_seg * L_seg + lambda_hm * L_hm + L_box`.
pub fn total_loss<'t>(
    tape: &'t Tape,
    per_class: &[(Var<'t>, Var<'t>, Var<'t>)],
    cfg: &LossConfig,
) -> Var<'t> {
    let mut acc = tape.scalar(0.0);
    for &(seg, hm, bx) in per_class {
        acc = acc
            .add(seg.mul_scalar(cfg.lambda_seg))
            .add(hm.mul_scalar(cfg.lambda_hm))
            .add(bx);
    }
    acc
}

// ---------------------------------------------------------------------------
// decoding
// ---------------------------------------------------------------------------

/// Raw per-voxel head outputs for one class, plain tensors.
pub struct HeadOutput {
    pub heatmap: Vec<f64>,
    /// `[V, 6]` rows: dx, dy, dz, l, w, h.
    pub box_params: Tensor,
    /// `[V, bins]`.
    pub bin_logits: Tensor,
    /// `[V, bins]`.
    pub bin_residuals: Tensor,
}

/// NMS-free decode: drop voxels below `delta2`, keep 3x3 local maxima of
/// the heatmap (with row-major-first tie ownership on plateaus), and emit
/// one detection per kept voxel.
pub fn decode(
    layout: &SparseLayout,
    geom: &GridGeometry,
    out: &HeadOutput,
    class: usize,
    head_cfg: &HeadConfig,
    bins: usize,
) -> Vec<Detection> {
    let v = layout.len();
    debug_assert_eq!(out.heatmap.len(), v);
    let (rows, cols) = (layout.rows, layout.cols);
    let mut dense = vec![0.0f64; rows * cols];
    for (i, &coord) in layout.coords().iter().enumerate() {
        dense[layout.flat(coord)] = out.heatmap[i];
    }
    let mut dets = Vec::new();
    for (i, &(r, c)) in layout.coords().iter().enumerate() {
        let h = out.heatmap[i];
        if h < head_cfg.delta2 {
            continue;
        }
        // 3x3 local maximum with earlier-cell tie ownership
        let mut keep = true;
        'scan: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr as usize >= rows || nc as usize >= cols {
                    continue;
                }
                let other = dense[nr as usize * cols + nc as usize];
                if other > h {
                    keep = false;
                    break 'scan;
                }
                let earlier = (nr, nc) < (r as i64, c as i64);
                if other == h && earlier {
                    keep = false;
                    break 'scan;
                }
            }
        }
        if !keep {
            continue;
        }
        let (wx, wy) = geom.center_of(r, c, layout.stride);
        let row = &out.box_params.values()[i * 6..(i + 1) * 6];
        let logits = &out.bin_logits.values()[i * bins..(i + 1) * bins];
        let best_bin = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(bi, _)| bi)
            .unwrap();
        let residual = out.bin_residuals.values()[i * bins + best_bin];
        let yaw = bin_to_heading(best_bin, residual, bins);
        dets.push(Detection {
            class,
            score: h,
            b: Box3D::new(wx + row[0], wy + row[1], row[2], row[3], row[4], row[5], yaw),
        });
    }
    dets
}
