//! Flat `key=value` run configuration covering the model, the synthetic
//! scene generator, the augmentations, training, and evaluation. Every
//! default is the documented constant; a config file only overrides.

use crate::backbone::{BackboneConfig, BlockConfig, ScaleConfig};
use crate::error::{Error, Result};
use crate::head::IouLossKind;
use crate::model::ModelConfig;
use crate::synth::{AugmentConfig, SceneSpec};
use crate::train::TrainConfig;
use crate::transformer::PeMode;
use crate::window::WindowConfig;

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub augment: AugmentConfig,
    pub use_augment: bool,
    pub train: TrainConfig,
    pub eval_ious: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            scene: SceneSpec::default(),
            augment: AugmentConfig::default(),
            use_augment: true,
            train: TrainConfig::default(),
            eval_ious: vec![0.5, 0.7],
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Parse(format!("bad list entry '{s}' for {key}")))
        })
        .collect()
}

impl RunConfig {
    /// Parse `key=value` lines ('#' comments, blank lines ignored) on top
    /// of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Parse(format!("bad number '{v}'")))
        };
        let u = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Parse(format!("bad integer '{v}'")))
        };
        let b = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Parse(format!("bad bool '{v}'"))),
            }
        };
        match key {
            "channels" => self.model.channels = u(v)?,
            "heads" => {
                self.model.heads = u(v)?;
                self.model.backbone.heads = self.model.heads;
            }
            "mlp_ratio" => self.model.mlp_ratio = u(v)?,
            "voxel_size" => self.model.voxel_size = f(v)?,
            "scale_factors" => {
                let factors: Vec<usize> = parse_list(v, key)?;
                let window = self.model.backbone.scales.first().map(|s| s.window).unwrap_or_default();
                let block = self.model.backbone.scales.first().map(|s| s.block).unwrap_or_default();
                self.model.backbone.scales = factors
                    .into_iter()
                    .map(|factor| ScaleConfig { factor, window, block })
                    .collect();
            }
            "window" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Parse("window must be HxW".into()))?;
                let wc = WindowConfig::new(
                    u(h.trim())?,
                    u(w.trim())?,
                    self.model
                        .backbone
                        .scales
                        .first()
                        .map(|s| s.window.max_buckets)
                        .unwrap_or(6),
                )?;
                for s in &mut self.model.backbone.scales {
                    s.window = wc;
                }
            }
            "max_buckets" => {
                let m = u(v)?;
                for s in &mut self.model.backbone.scales {
                    s.window.max_buckets = m;
                }
            }
            "layers_pre" | "layers_post" | "survival_prob" | "extra_shifts" => {
                let apply = |bc: &mut BlockConfig, key: &str, v: &str| -> Result<()> {
                    match key {
                        "layers_pre" => bc.layers_pre = u(v)?,
                        "layers_post" => bc.layers_post = u(v)?,
                        "survival_prob" => bc.survival_prob = f(v)?,
                        "extra_shifts" => bc.extra_shifts = u(v)?,
                        _ => unreachable!(),
                    }
                    Ok(())
                };
                for s in &mut self.model.backbone.scales {
                    apply(&mut s.block, key, v)?;
                }
            }
            "pe_mode" => {
                self.model.backbone.pe_mode = match v {
                    "window" => PeMode::WindowLocal,
                    "global" => PeMode::Global,
                    _ => return Err(Error::Parse(format!("bad pe_mode '{v}'"))),
                }
            }
            "fg_cutoff" => self.model.head.fg_cutoff = f(v)?,
            "diffusion_k" => self.model.head.diffusion_k = parse_list(v, key)?,
            "delta1" => self.model.head.delta1 = f(v)?,
            "delta2" => self.model.head.delta2 = f(v)?,
            "target_caps" => self.model.head.target_caps = parse_list(v, key)?,
            "class_scale" => self.model.head.class_scale = parse_list(v, key)?,
            "focal_eps" => self.model.loss.focal_eps = f(v)?,
            "alpha" => self.model.loss.alpha = f(v)?,
            "beta" => self.model.loss.beta = f(v)?,
            "lambda_seg" => self.model.loss.lambda_seg = f(v)?,
            "lambda_hm" => self.model.loss.lambda_hm = f(v)?,
            "smooth_l1_delta" => self.model.loss.smooth_l1_delta = f(v)?,
            "heading_bins" => self.model.loss.heading_bins = u(v)?,
            "gaussian_overlap" => self.model.loss.gaussian_overlap = f(v)?,
            "iou_loss" => {
                self.model.loss.iou_loss = match v {
                    "rotated" => IouLossKind::Rotated3d,
                    "distance" => IouLossKind::Distance,
                    _ => return Err(Error::Parse(format!("bad iou_loss '{v}'"))),
                }
            }
            "center_offsets" => self.model.center_offsets = b(v)?,
            "min_box_points" => self.model.min_box_points = u(v)?,
            "extent_side" => self.scene.extent_side = f(v)?,
            "vehicle_fraction" => self.scene.vehicle_fraction = f(v)?,
            "boxes_min" => self.scene.boxes_min = u(v)?,
            "boxes_max" => self.scene.boxes_max = u(v)?,
            "points_per_box_min" => self.scene.points_per_box_min = u(v)?,
            "points_per_box_max" => self.scene.points_per_box_max = u(v)?,
            "clutter_density" => self.scene.clutter_density = f(v)?,
            "frames" => self.scene.frames = u(v)?,
            "rotation_prob" => self.augment.rotation_prob = f(v)?,
            "flip_prob" => self.augment.flip_prob = f(v)?,
            "scale_min" => self.augment.scale_min = f(v)?,
            "scale_max" => self.augment.scale_max = f(v)?,
            "point_drop_prob" => self.augment.point_drop_prob = f(v)?,
            "augment" => self.use_augment = b(v)?,
            "steps" => self.train.steps = u(v)?,
            "base_lr" => self.train.base_lr = f(v)?,
            "warmup_lr" => self.train.warmup_lr = f(v)?,
            "warmup_steps" => self.train.warmup_steps = u(v)?,
            "train_seed" => self.train.seed = v.parse().map_err(|_| Error::Parse("bad seed".into()))?,
            "log_every" => self.train.log_every = u(v)?,
            "eval_ious" => self.eval_ious = parse_list(v, key)?,
            _ => return Err(Error::Parse(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

/// Backbone config section used when reading a `BackboneConfig` directly.
pub fn backbone_of(model: &ModelConfig) -> &BackboneConfig {
    &model.backbone
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_documented_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.voxel_size, 0.32);
        assert_eq!(cfg.model.head.fg_cutoff, 0.05);
        assert_eq!(cfg.model.head.delta1, 0.2);
        assert_eq!(cfg.model.head.delta2, 0.1);
        assert_eq!(cfg.model.head.target_caps, vec![1024, 800]);
        assert_eq!(cfg.model.loss.lambda_seg, 200.0);
        assert_eq!(cfg.model.loss.lambda_hm, 10.0);
        assert_eq!(cfg.model.loss.alpha, 2.0);
        assert_eq!(cfg.model.loss.beta, 4.0);
        assert_eq!(cfg.model.loss.focal_eps, 1e-3);
        assert_eq!(cfg.augment.rotation_prob, 0.74);
        assert_eq!(cfg.augment.flip_prob, 0.5);
        assert_eq!(cfg.augment.point_drop_prob, 0.05);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.train.warmup_lr, 5e-4);
        assert_eq!(cfg.model.backbone.strides(), vec![1, 2, 4, 16, 32]);
    }

    #[test]
    fn parse_overrides_and_unknown_keys() {
        let cfg = RunConfig::parse(
            "# comment\nchannels=16\nheads=2\nscale_factors=1,2\nwindow=8x8\nsteps=7\n",
        )
        .unwrap();
        assert_eq!(cfg.model.channels, 16);
        assert_eq!(cfg.model.backbone.scales.len(), 2);
        assert_eq!(cfg.model.backbone.scales[1].window.h, 8);
        assert_eq!(cfg.train.steps, 7);
        assert!(RunConfig::parse("nope=1\n").is_err());
        assert!(RunConfig::parse("channels\n").is_err());
    }

    #[test]
    fn validation_runs_on_parse() {
        // heads must divide channels
        assert!(RunConfig::parse("channels=10\nheads=4\n").is_err());
    }
}
