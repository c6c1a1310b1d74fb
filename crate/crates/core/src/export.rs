//! Attention-score export: run a scene through the model with the capture
//! sink enabled and emit per-layer rows for offline plotting.

use std::cell::RefCell;
use std::fmt::Write as _;

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::PointCloudScene;
use crate::transformer::AttnCapture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuerySelector {
    /// Only query voxels whose center lies inside a groundtruth box.
    #[default]
    Foreground,
    All,
}

/// CSV of `layer,stride,query_row,query_col,key_row,key_col,score`, one
/// row per (query voxel, key voxel) pair, scores averaged over heads so
/// each query's rows sum to 1. `layer_filter` keeps only layers whose
/// label contains the substring; an unmatched filter is an error.
pub fn export_attention(
    model: &Model,
    scene: &PointCloudScene,
    selector: QuerySelector,
    layer_filter: Option<&str>,
) -> Result<String> {
    let sink = RefCell::new(Vec::<AttnCapture>::new());
    let tape = crate::tensor::tape::Tape::new();
    let fwd = model.forward(&tape, scene, &Mode::Eval, Some(&sink))?;
    let geom = fwd.geom;
    let captures = sink.into_inner();

    let kept: Vec<&AttnCapture> = captures
        .iter()
        .filter(|c| layer_filter.is_none_or(|f| c.label.contains(f)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Contract(match layer_filter {
            Some(f) => format!("no layer matches '{f}'"),
            None => "no attention layers ran (empty scene?)".into(),
        }));
    }

    let is_fg = |r: i64, c: i64, stride: usize| -> bool {
        let (wx, wy) = geom.center_of(r as u32, c as u32, stride);
        scene.boxes.iter().any(|gt| gt.b.contains_bev(wx, wy))
    };

    let mut out = String::from("layer,stride,query_row,query_col,key_row,key_col,score\n");
    let mut any_query = false;
    for cap in kept {
        let l = cap.seq_len;
        let heads = cap.heads;
        for (wi, voxels) in cap.window_voxels.iter().enumerate() {
            for (qi, &(qr, qc)) in voxels.iter().enumerate() {
                if qr < 0 {
                    continue;
                }
                if selector == QuerySelector::Foreground && !is_fg(qr, qc, cap.stride) {
                    continue;
                }
                any_query = true;
                for (ki, &(kr, kc)) in voxels.iter().enumerate() {
                    if kr < 0 {
                        continue;
                    }
                    let mut score = 0.0;
                    for h in 0..heads {
                        let row = (wi * heads + h) * l + qi;
                        score += cap.probs.values()[row * l + ki];
                    }
                    score /= heads as f64;
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        cap.label, cap.stride, qr, qc, kr, kc, score
                    );
                }
            }
        }
    }
    if !any_query {
        return Err(Error::Contract("no query voxels matched the selector".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::synth::{gen_scene, SceneSpec};
    use std::collections::BTreeMap;

    fn setup() -> (Model, PointCloudScene) {
        let cfg = ModelConfig::desk_default().reduced(2, 8, 2);
        let model = Model::new(cfg, 3).unwrap();
        let spec = SceneSpec { extent_side: 12.8, boxes_min: 1, boxes_max: 2, ..Default::default() };
        (model, gen_scene(&spec, 5).unwrap())
    }

    #[test]
    fn rows_sum_to_one_per_query() {
        let (model, scene) = setup();
        let csv = export_attention(&model, &scene, QuerySelector::All, Some("backbone.s0.st0.l0"))
            .unwrap();
        let mut sums: BTreeMap<(String, i64, i64), f64> = BTreeMap::new();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let key = (f[0].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap());
            *sums.entry(key).or_insert(0.0) += f[6].parse::<f64>().unwrap();
        }
        assert!(!sums.is_empty());
        for (k, s) in sums {
            assert!((s - 1.0).abs() < 1e-9, "{k:?} sums to {s}");
        }
    }

    #[test]
    fn singleton_window_scores_one_to_itself() {
        // a single isolated voxel's window has one valid slot: its only
        // attention row is the self-score 1.0
        let (model, scene) = setup();
        let csv = export_attention(&model, &scene, QuerySelector::All, None).unwrap();
        // find any row where query == key and confirm at least the format
        let mut self_rows = 0;
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f[2] == f[4] && f[3] == f[5] {
                self_rows += 1;
            }
        }
        assert!(self_rows > 0);
    }

    #[test]
    fn unknown_layer_filter_errors() {
        let (model, scene) = setup();
        assert!(export_attention(&model, &scene, QuerySelector::All, Some("nosuch")).is_err());
    }

    #[test]
    fn scores_match_offline_recompute() {
        // recompute the first backbone layer's attention for one window
        // from the raw parameters and the embedding output
        use crate::sparse::SparseLayout;
        use crate::tensor::params::Binder;
        use crate::tensor::tape::Tape;
        use crate::transformer::positional_encoding_2d;
        use crate::voxelize::{dynamic_voxelize, embed_and_pool_vars, EmbedVars};
        use crate::window::{window_partition, WindowConfig};

        let (model, scene) = setup();
        let csv = export_attention(&model, &scene, QuerySelector::All, Some("backbone.s0.st0.l0"))
            .unwrap();

        // offline: embed, partition, Q/K by hand for every window
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.params);
        let assign = dynamic_voxelize(&scene, model.cfg.voxel_size).unwrap();
        let embed = EmbedVars::bind(&binder, "embed").unwrap();
        let feats = embed_and_pool_vars(&tape, &assign, &scene, &embed, true).value();
        let layout: &SparseLayout = &assign.layout;
        let cfg = WindowConfig::default();
        let set = window_partition(layout, &cfg);
        let c = model.cfg.channels;
        let heads = model.cfg.heads;
        let d = c / heads;
        let wq = model.params.get("backbone.s0.st0.l0.wq").unwrap();
        let bq = model.params.get("backbone.s0.st0.l0.bq").unwrap();
        let wk = model.params.get("backbone.s0.st0.l0.wk").unwrap();
        let bk = model.params.get("backbone.s0.st0.l0.bk").unwrap();

        // parse exported scores into a map
        let mut exported: BTreeMap<(i64, i64, i64, i64), f64> = BTreeMap::new();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            exported.insert(
                (
                    f[2].parse().unwrap(),
                    f[3].parse().unwrap(),
                    f[4].parse().unwrap(),
                    f[5].parse().unwrap(),
                ),
                f[6].parse().unwrap(),
            );
        }

        let matvec = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
            let n = b.len();
            let mut out = b.to_vec();
            for i in 0..v.len() {
                for j in 0..n {
                    out[j] += v[i] * w[i * n + j];
                }
            }
            out
        };

        let mut checked = 0;
        for bucket in &set.buckets {
            for win in &bucket.windows {
                let valid: Vec<usize> = (0..win.slots.len()).filter(|&s| win.slots[s] >= 0).collect();
                // token inputs: embedding + positional encoding
                let toks: Vec<Vec<f64>> = valid
                    .iter()
                    .map(|&s| {
                        let src = win.slots[s] as usize;
                        let mut t = feats.values()[src * c..(src + 1) * c].to_vec();
                        let (lr, lc) = win.locals[s];
                        let pe = positional_encoding_2d(lr as f64, lc as f64, c);
                        for (a, b) in t.iter_mut().zip(&pe) {
                            *a += b;
                        }
                        t
                    })
                    .collect();
                let qs: Vec<Vec<f64>> =
                    toks.iter().map(|t| matvec(wq.values(), bq.values(), t)).collect();
                let ks: Vec<Vec<f64>> =
                    toks.iter().map(|t| matvec(wk.values(), bk.values(), t)).collect();
                for (qi, &qs_slot) in valid.iter().enumerate() {
                    let (qr, qc) = layout.coords()[win.slots[qs_slot] as usize];
                    let mut mean_probs = vec![0.0; valid.len()];
                    for h in 0..heads {
                        let scores: Vec<f64> = (0..valid.len())
                            .map(|ki| {
                                let mut s = 0.0;
                                for t in 0..d {
                                    s += qs[qi][h * d + t] * ks[ki][h * d + t];
                                }
                                s / (d as f64).sqrt()
                            })
                            .collect();
                        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|&s| (s - hi).exp()).sum();
                        for (ki, &s) in scores.iter().enumerate() {
                            mean_probs[ki] += (s - hi).exp() / z;
                        }
                    }
                    for (ki, &ks_slot) in valid.iter().enumerate() {
                        let (kr, kc) = layout.coords()[win.slots[ks_slot] as usize];
                        let want = mean_probs[ki] / heads as f64;
                        let got = exported
                            [&(qr as i64, qc as i64, kr as i64, kc as i64)];
                        assert!((got - want).abs() < 1e-9, "({qr},{qc})->({kr},{kc})");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 10);
    }
}
