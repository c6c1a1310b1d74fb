//! Synthetic scene generation and the training-time augmentations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{wrap_angle, Box3D};
use crate::error::{Error, Result};
use crate::scene::{Extent, GtBox, Point, PointCloudScene};

/// Knobs for the synthetic scene generator. Generation is a pure function
/// of the spec plus a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub extent_side: f64,
    /// Probability that a box is a vehicle (vs pedestrian).
    pub vehicle_fraction: f64,
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub points_per_box_min: usize,
    pub points_per_box_max: usize,
    /// Background clutter points per square meter.
    pub clutter_density: f64,
    pub frames: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent_side: 20.48,
            vehicle_fraction: 0.5,
            boxes_min: 2,
            boxes_max: 4,
            points_per_box_min: 60,
            points_per_box_max: 120,
            clutter_density: 0.05,
            frames: 1,
        }
    }
}

fn vehicle_dims(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (
        rng.gen_range(3.8..5.0),
        rng.gen_range(1.7..2.1),
        rng.gen_range(1.4..1.8),
    )
}

fn pedestrian_dims(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(1.6..1.9),
    )
}

/// Sample a point on the box surface (sides plus roof), as a LiDAR would
/// see: mostly the vertical faces, some roof returns.
fn surface_point(rng: &mut ChaCha8Rng, b: &Box3D) -> (f64, f64, f64) {
    let (hl, hw) = (b.l * 0.5, b.w * 0.5);
    // local frame point
    let (lx, ly, lz) = match rng.gen_range(0..5) {
        0 => (hl, rng.gen_range(-hw..hw), rng.gen_range(-0.5..0.5) * b.h),
        1 => (-hl, rng.gen_range(-hw..hw), rng.gen_range(-0.5..0.5) * b.h),
        2 => (rng.gen_range(-hl..hl), hw, rng.gen_range(-0.5..0.5) * b.h),
        3 => (rng.gen_range(-hl..hl), -hw, rng.gen_range(-0.5..0.5) * b.h),
        // roof: interior in BEV, which is what lets object centers own points
        _ => (rng.gen_range(-hl..hl) * 0.9, rng.gen_range(-hw..hw) * 0.9, 0.5 * b.h),
    };
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    (
        b.cx + lx * c - ly * s,
        b.cy + lx * s + ly * c,
        b.cz + lz,
    )
}

/// Generate one scene: non-overlapping boxes with surface point clouds
/// plus sparse ground clutter. Every box is guaranteed at least 5
/// interior points (the assignment filter's threshold).
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloudScene> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = Extent::square(0.0, 0.0, spec.extent_side);
    let n_boxes = rng.gen_range(spec.boxes_min..=spec.boxes_max);

    let mut boxes: Vec<GtBox> = Vec::new();
    let margin = 3.0;
    let mut attempts = 0;
    while boxes.len() < n_boxes {
        attempts += 1;
        if attempts > 200 {
            return Err(Error::Numeric(format!(
                "could not place {n_boxes} boxes in a {:.1} m extent",
                spec.extent_side
            )));
        }
        let class = if rng.gen_bool(spec.vehicle_fraction) { 0 } else { 1 };
        let (l, w, h) = if class == 0 { vehicle_dims(&mut rng) } else { pedestrian_dims(&mut rng) };
        let b = Box3D::new(
            rng.gen_range(margin..spec.extent_side - margin),
            rng.gen_range(margin..spec.extent_side - margin),
            rng.gen_range(0.5..1.0),
            l,
            w,
            h,
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        // reject overlaps (with a little clearance)
        let clear = boxes.iter().all(|gt| {
            let d = ((gt.b.cx - b.cx).powi(2) + (gt.b.cy - b.cy).powi(2)).sqrt();
            d > (gt.b.l.max(gt.b.w) + b.l.max(b.w)) * 0.5 + 0.8
        });
        if clear {
            boxes.push(GtBox { b, class });
        }
    }

    let frame_offsets: Vec<f64> = (0..spec.frames)
        .map(|i| -0.1 * (spec.frames - 1 - i) as f64)
        .collect();
    let mut frames: Vec<Vec<Point>> = vec![Vec::new(); spec.frames];
    for (fi, frame) in frames.iter_mut().enumerate() {
        let t = frame_offsets[fi];
        for gt in &boxes {
            let n = rng.gen_range(spec.points_per_box_min..=spec.points_per_box_max);
            for _ in 0..n {
                let (x, y, z) = surface_point(&mut rng, &gt.b);
                frame.push(Point {
                    x,
                    y,
                    z,
                    intensity: rng.gen_range(0.2..1.0),
                    elongation: rng.gen_range(0.0..0.3),
                    time_offset: t,
                });
            }
        }
        let n_clutter =
            (spec.clutter_density * spec.extent_side * spec.extent_side).round() as usize;
        for _ in 0..n_clutter {
            frame.push(Point {
                x: rng.gen_range(0.0..spec.extent_side),
                y: rng.gen_range(0.0..spec.extent_side),
                z: rng.gen_range(-0.2..0.2),
                intensity: rng.gen_range(0.0..0.4),
                elongation: rng.gen_range(0.0..0.2),
                time_offset: t,
            });
        }
    }

    let scene = PointCloudScene::new(extent, frames, boxes)?;
    for gt in &scene.boxes {
        if scene.points_inside(&gt.b) < 5 {
            return Err(Error::Numeric("generated box has fewer than 5 interior points".into()));
        }
    }
    Ok(scene)
}

/// The training augmentations: global yaw rotation, y-axis flip, global
/// scaling, i.i.d. point dropping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub rotation_prob: f64,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub point_drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_prob: 0.74,
            flip_prob: 0.5,
            scale_min: 0.95,
            scale_max: 1.05,
            point_drop_prob: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_prob: 0.0,
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            point_drop_prob: 0.0,
        }
    }
}

/// Apply the augmentations consistently to points and boxes. Rotation and
/// scaling are about the extent center so the scene stays in frame.
pub fn augment(scene: &PointCloudScene, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> PointCloudScene {
    let cx = scene.extent.min_x + scene.extent.width * 0.5;
    let cy = scene.extent.min_y + scene.extent.height * 0.5;

    let rotate = rng.gen_bool(cfg.rotation_prob);
    let yaw = if rotate {
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
    } else {
        0.0
    };
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    let scale = if cfg.scale_min < cfg.scale_max {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let (rc, rs) = (yaw.cos(), yaw.sin());
    let is_identity = !rotate && !flip && scale == 1.0;

    let map_xy = |x: f64, y: f64| -> (f64, f64) {
        if is_identity {
            return (x, y);
        }
        let (dx, dy) = (x - cx, y - cy);
        // rotate about the center
        let (nx, mut ny) = (dx * rc - dy * rs, dx * rs + dy * rc);
        // flip: mirror the y values so headings negate
        if flip {
            ny = -ny;
        }
        (cx + nx * scale, cy + ny * scale)
    };

    let frames = scene
        .frames
        .iter()
        .map(|frame| {
            frame
                .iter()
                .filter(|_| !(cfg.point_drop_prob > 0.0 && rng.gen_bool(cfg.point_drop_prob)))
                .map(|p| {
                    let (x, y) = map_xy(p.x, p.y);
                    Point { x, y, z: p.z * scale, ..*p }
                })
                .collect()
        })
        .collect();

    let boxes = scene
        .boxes
        .iter()
        .map(|gt| {
            let (bx, by) = map_xy(gt.b.cx, gt.b.cy);
            let mut heading = gt.b.yaw + yaw;
            if flip {
                heading = -heading;
            }
            GtBox {
                b: Box3D::new(
                    bx,
                    by,
                    gt.b.cz * scale,
                    gt.b.l * scale,
                    gt.b.w * scale,
                    gt.b.h * scale,
                    wrap_angle(heading),
                ),
                class: gt.class,
            }
        })
        .collect();

    PointCloudScene { extent: scene.extent, frames, boxes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn clutter_only_scene() {
        let spec = SceneSpec { boxes_min: 0, boxes_max: 0, ..Default::default() };
        let scene = gen_scene(&spec, 1).unwrap();
        assert!(scene.boxes.is_empty());
        assert!(scene.num_points() > 0);
    }

    #[test]
    fn seeded_generation_is_bit_reproducible() {
        let spec = SceneSpec::default();
        let a = gen_scene(&spec, 42).unwrap();
        let b = gen_scene(&spec, 42).unwrap();
        assert_eq!(a.points_to_string(), b.points_to_string());
        assert_eq!(a.boxes_to_string(), b.boxes_to_string());
        let c = gen_scene(&spec, 43).unwrap();
        assert_ne!(a.points_to_string(), c.points_to_string());
    }

    #[test]
    fn every_box_passes_interior_count_oracle() {
        let spec = SceneSpec::default();
        for seed in 0..10 {
            let scene = gen_scene(&spec, seed).unwrap();
            for gt in &scene.boxes {
                let inside = scene
                    .all_points()
                    .filter(|p| gt.b.contains(p.x, p.y, p.z))
                    .count();
                assert!(inside >= 5, "seed {seed}: box with {inside} interior points");
            }
        }
    }

    #[test]
    fn zero_prob_augment_is_identity() {
        let scene = gen_scene(&SceneSpec::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&scene, &AugmentConfig::identity(), &mut rng);
        assert_eq!(out, scene);
    }

    #[test]
    fn double_flip_is_identity() {
        let scene = gen_scene(&SceneSpec::default(), 4).unwrap();
        let cfg = AugmentConfig {
            rotation_prob: 0.0,
            flip_prob: 1.0,
            scale_min: 1.0,
            scale_max: 1.0,
            point_drop_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&scene, &cfg, &mut rng);
        let twice = augment(&once, &cfg, &mut rng);
        for (a, b) in scene.all_points().zip(twice.all_points()) {
            assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
        }
        for (a, b) in scene.boxes.iter().zip(&twice.boxes) {
            assert!((a.b.cx - b.b.cx).abs() < 1e-12);
            assert!(wrap_angle(a.b.yaw - b.b.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_points_inside_their_boxes() {
        // containment oracle: surface points near a box stay with it
        let spec = SceneSpec { clutter_density: 0.0, ..Default::default() };
        let scene = gen_scene(&spec, 5).unwrap();
        let cfg = AugmentConfig {
            rotation_prob: 1.0,
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            point_drop_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = augment(&scene, &cfg, &mut rng);
        // count points inside any (slightly inflated, to absorb boundary
        // rounding) box before and after: rigid motion preserves containment
        let count = |s: &PointCloudScene| {
            let grow = |b: &Box3D| Box3D::new(b.cx, b.cy, b.cz, b.l + 1e-9, b.w + 1e-9, b.h + 1e-9, b.yaw);
            s.all_points()
                .filter(|p| s.boxes.iter().any(|gt| grow(&gt.b).contains(p.x, p.y, p.z)))
                .count()
        };
        assert_eq!(count(&scene), count(&out));
    }

    #[test]
    fn drop_probability_thins_points() {
        let spec = SceneSpec { clutter_density: 2.0, boxes_min: 0, boxes_max: 0, ..Default::default() };
        let scene = gen_scene(&spec, 6).unwrap();
        let n0 = scene.num_points();
        let cfg = AugmentConfig {
            rotation_prob: 0.0,
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            point_drop_prob: 0.05,
        };
        // over 100 seeds the retained fraction should straddle 0.95
        let mut total = 0usize;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += augment(&scene, &cfg, &mut rng).num_points();
        }
        let mean_frac = total as f64 / (100.0 * n0 as f64);
        let sigma = (0.05f64 * 0.95 / (100.0 * n0 as f64)).sqrt();
        assert!(
            (mean_frac - 0.95).abs() < 3.0 * sigma,
            "mean retained {mean_frac}, sigma {sigma}"
        );
    }
}
