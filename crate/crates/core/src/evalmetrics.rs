//! Detection evaluation: greedy score-ordered matching at rotated-BEV IoU
//! thresholds, 101-point interpolated AP, and precision/recall curves.

use std::fmt::Write as _;

use crate::boxes::rotated_bev_iou;
use crate::head::Detection;
use crate::scene::{GtBox, CLASS_NAMES};

/// One class at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub class: usize,
    pub iou_threshold: f64,
    pub ap: f64,
    pub recall: f64,
    pub precision: f64,
    /// (recall, precision) points in descending-score order.
    pub pr_curve: Vec<(f64, f64)>,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub entries: Vec<ClassEval>,
}

impl EvalReport {
    pub fn get(&self, class: usize, iou: f64) -> Option<&ClassEval> {
        self.entries
            .iter()
            .find(|e| e.class == class && (e.iou_threshold - iou).abs() < 1e-9)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "class={} iou={:.2} ap={:.4} recall={:.4} precision={:.4} gt={} det={}",
                CLASS_NAMES[e.class],
                e.iou_threshold,
                e.ap,
                e.recall,
                e.precision,
                e.n_gt,
                e.n_det
            );
        }
        s
    }
}

/// Greedy matching for one class and threshold across scenes: detections
/// in descending score order claim the best still-unmatched groundtruth
/// of the same scene with IoU at or above the threshold.
fn match_class(
    detections: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class: usize,
    iou_threshold: f64,
) -> (Vec<bool>, usize, usize) {
    let mut flat: Vec<(usize, &Detection)> = Vec::new();
    for (si, dets) in detections.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class == class) {
            flat.push((si, d));
        }
    }
    flat.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });

    let mut matched: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| g.iter().map(|_| false).collect())
        .collect();
    let n_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|gt| gt.class == class).count())
        .sum();

    let mut tp_flags = Vec::with_capacity(flat.len());
    for (si, det) in &flat {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[*si].iter().enumerate() {
            if gt.class != class || matched[*si][gi] {
                continue;
            }
            let iou = rotated_bev_iou(&det.b, &gt.b);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*si][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    (tp_flags, n_gt, flat.len())
}

/// 101-point interpolated average precision from score-ordered TP flags.
fn ap_101(tp_flags: &[bool], n_gt: usize) -> (f64, Vec<(f64, f64)>) {
    if n_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut curve = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        curve.push((recall, precision));
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    (ap / 101.0, curve)
}

/// Evaluate detections against groundtruth across scenes.
pub fn evaluate(
    detections: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> EvalReport {
    assert_eq!(detections.len(), gts.len(), "scene count mismatch");
    let mut entries = Vec::new();
    for class in 0..num_classes {
        for &iou in iou_thresholds {
            let (tp_flags, n_gt, n_det) = match_class(detections, gts, class, iou);
            let (ap, pr_curve) = ap_101(&tp_flags, n_gt);
            let tp = tp_flags.iter().filter(|&&t| t).count();
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            let precision = if n_det == 0 { 0.0 } else { tp as f64 / n_det as f64 };
            entries.push(ClassEval {
                class,
                iou_threshold: iou,
                ap,
                recall,
                precision,
                pr_curve,
                n_gt,
                n_det,
            });
        }
    }
    EvalReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Box3D;

    fn gt_at(x: f64, y: f64, class: usize) -> GtBox {
        GtBox { b: Box3D::new(x, y, 0.5, 4.0, 2.0, 1.5, 0.2), class }
    }

    fn det_at(x: f64, y: f64, class: usize, score: f64) -> Detection {
        Detection { class, score, b: Box3D::new(x, y, 0.5, 4.0, 2.0, 1.5, 0.2) }
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let gts = vec![vec![gt_at(0.0, 0.0, 0), gt_at(10.0, 0.0, 0)]];
        let dets = vec![vec![det_at(0.0, 0.0, 0, 0.9), det_at(10.0, 0.0, 0, 0.8)]];
        let report = evaluate(&dets, &gts, 2, &[0.5]);
        let e = report.get(0, 0.5).unwrap();
        assert_eq!(e.ap, 1.0);
        assert_eq!(e.recall, 1.0);
    }

    #[test]
    fn no_detections_give_ap_zero() {
        let gts = vec![vec![gt_at(0.0, 0.0, 0)]];
        let dets = vec![vec![]];
        let report = evaluate(&dets, &gts, 2, &[0.5]);
        assert_eq!(report.get(0, 0.5).unwrap().ap, 0.0);
    }

    #[test]
    fn matches_bruteforce_pr_oracle() {
        // mixed case: 3 gts, 4 detections (one duplicate, one false positive)
        let gts = vec![vec![gt_at(0.0, 0.0, 0), gt_at(10.0, 0.0, 0), gt_at(20.0, 0.0, 0)]];
        let dets = vec![vec![
            det_at(0.1, 0.0, 0, 0.95),  // tp
            det_at(0.2, 0.0, 0, 0.90),  // duplicate -> fp
            det_at(10.0, 0.1, 0, 0.85), // tp
            det_at(40.0, 0.0, 0, 0.80), // fp
        ]];
        let report = evaluate(&dets, &gts, 2, &[0.5]);
        let e = report.get(0, 0.5).unwrap();
        // hand PR: tp flags [1, 0, 1, 0], n_gt 3
        // curve: r 1/3 p 1; r 1/3 p 1/2; r 2/3 p 2/3; r 2/3 p 1/2
        // 101-pt: r in [0, 1/3] -> max p 1.0 (34 pts), r in (1/3, 2/3] -> 2/3 (33 pts), else 0
        let want = (34.0 * 1.0 + 33.0 * (2.0 / 3.0)) / 101.0;
        assert!((e.ap - want).abs() < 1e-12, "ap {} want {want}", e.ap);
        assert!((e.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((e.precision - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adding_a_true_positive_never_lowers_ap() {
        let gts = vec![vec![gt_at(0.0, 0.0, 0), gt_at(10.0, 0.0, 0), gt_at(20.0, 0.0, 0)]];
        let base_dets = vec![vec![det_at(0.0, 0.0, 0, 0.9), det_at(40.0, 0.0, 0, 0.5)]];
        let base = evaluate(&base_dets, &gts, 2, &[0.5]).get(0, 0.5).unwrap().ap;
        for score in [0.95, 0.7, 0.3] {
            let mut dets = base_dets.clone();
            dets[0].push(det_at(10.0, 0.0, 0, score));
            let ap = evaluate(&dets, &gts, 2, &[0.5]).get(0, 0.5).unwrap().ap;
            assert!(ap >= base - 1e-12, "score {score}: {ap} < {base}");
        }
    }

    #[test]
    fn classes_do_not_cross_match() {
        let gts = vec![vec![gt_at(0.0, 0.0, 0)]];
        let dets = vec![vec![det_at(0.0, 0.0, 1, 0.9)]];
        let report = evaluate(&dets, &gts, 2, &[0.5]);
        assert_eq!(report.get(0, 0.5).unwrap().recall, 0.0);
        assert_eq!(report.get(1, 0.5).unwrap().n_gt, 0);
    }
}
