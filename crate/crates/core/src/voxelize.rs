//! Dynamic voxelization and the per-point embedding net.
//!
//! Points are binned into BEV pillars by x/y only (z never partitions,
//! voxels are unbounded vertically) with no per-voxel point cap. Each
//! point is embedded by two (linear + layer-norm + GELU) layers and the
//! voxel feature is the elementwise max over its points.

use crate::error::Result;
use crate::scene::{Point, PointCloudScene};
use crate::sparse::{GridGeometry, SparseBev, SparseLayout};
use crate::tensor::params::{Binder, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input features per point fed to the embedding net: x/y offsets to the
/// voxel center, z, normalized intensity and elongation, time offset.
pub const POINT_FEATURES: usize = 6;

/// Replace raw intensity and elongation with their tanh.
pub fn normalize_point_features(p: Point) -> Point {
    Point { intensity: p.intensity.tanh(), elongation: p.elongation.tanh(), ..p }
}

/// Point-to-voxel assignment: per-voxel contiguous point groups plus a
/// count of points dropped for falling outside the extent.
#[derive(Debug, Clone)]
pub struct VoxelAssignment {
    pub geom: GridGeometry,
    pub layout: SparseLayout,
    /// Point indices (into the flattened scene order) grouped by voxel.
    pub point_order: Vec<usize>,
    /// Range of `point_order` for each occupied voxel, aligned with
    /// `layout.coords()`.
    pub segments: Vec<(usize, usize)>,
    pub dropped: usize,
}

impl VoxelAssignment {
    /// Voxel of each flattened point (None when dropped).
    pub fn voxel_of_points(&self) -> Vec<Option<(u32, u32)>> {
        let mut out = vec![None; self.dropped + self.point_order.len()];
        for (vi, &(start, end)) in self.segments.iter().enumerate() {
            for &pi in &self.point_order[start..end] {
                out[pi] = Some(self.layout.coords()[vi]);
            }
        }
        out
    }
}

/// Bin every point of the scene into BEV voxels of the given size.
/// Out-of-extent points are dropped and counted.
pub fn dynamic_voxelize(scene: &PointCloudScene, voxel_size: f64) -> Result<VoxelAssignment> {
    let geom = GridGeometry::from_extent(scene.extent, voxel_size)?;
    let mut dropped = 0usize;
    let mut assigned: Vec<((u32, u32), usize)> = Vec::with_capacity(scene.num_points());
    for (pi, p) in scene.all_points().enumerate() {
        match geom.voxel_of(p.x, p.y) {
            Some(v) => assigned.push((v, pi)),
            None => dropped += 1,
        }
    }
    assigned.sort_unstable();
    let mut coords = Vec::new();
    let mut point_order = Vec::with_capacity(assigned.len());
    let mut segments = Vec::new();
    let mut start = 0usize;
    for (i, &(v, pi)) in assigned.iter().enumerate() {
        if coords.last() != Some(&v) {
            if !coords.is_empty() {
                segments.push((start, i));
            }
            coords.push(v);
            start = i;
        }
        point_order.push(pi);
    }
    if !coords.is_empty() {
        segments.push((start, assigned.len()));
    }
    let layout = SparseLayout::new(geom.rows, geom.cols, 1, coords)?;
    Ok(VoxelAssignment { geom, layout, point_order, segments, dropped })
}

/// The `[n_assigned, 6]` embedding-net inputs in assignment order.
/// `center_offsets = false` switches to absolute x/y coordinates.
pub fn point_inputs(assign: &VoxelAssignment, scene: &PointCloudScene, center_offsets: bool) -> Tensor {
    let points: Vec<&Point> = scene.all_points().collect();
    let mut vals = Vec::with_capacity(assign.point_order.len() * POINT_FEATURES);
    for (vi, &(start, end)) in assign.segments.iter().enumerate() {
        let (r, c) = assign.layout.coords()[vi];
        let (cx, cy) = assign.geom.center_of(r, c, 1);
        for &pi in &assign.point_order[start..end] {
            let p = normalize_point_features(*points[pi]);
            if center_offsets {
                vals.push(p.x - cx);
                vals.push(p.y - cy);
            } else {
                vals.push(p.x);
                vals.push(p.y);
            }
            vals.push(p.z);
            vals.push(p.intensity);
            vals.push(p.elongation);
            vals.push(p.time_offset);
        }
    }
    Tensor::new(vec![assign.point_order.len(), POINT_FEATURES], vals).unwrap()
}

/// One embedding layer: linear, layer norm, GELU.
pub struct EmbedLayerVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
    pub ln_g: Var<'t>,
    pub ln_b: Var<'t>,
}

impl<'t> EmbedLayerVars<'t> {
    pub fn bind(binder: &Binder<'t, '_>, prefix: &str) -> Result<Self> {
        Ok(EmbedLayerVars {
            w: binder.bind(&format!("{prefix}.w"))?,
            b: binder.bind(&format!("{prefix}.b"))?,
            ln_g: binder.bind(&format!("{prefix}.ln_g"))?,
            ln_b: binder.bind(&format!("{prefix}.ln_b"))?,
        })
    }

    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        x.matmul(self.w)
            .add_rows(self.b)
            .layer_norm(self.ln_g, self.ln_b, crate::transformer::LAYER_NORM_EPS)
            .gelu()
    }
}

/// The two-layer embedding net.
pub struct EmbedVars<'t> {
    pub l0: EmbedLayerVars<'t>,
    pub l1: EmbedLayerVars<'t>,
}

impl<'t> EmbedVars<'t> {
    pub fn bind(binder: &Binder<'t, '_>, prefix: &str) -> Result<Self> {
        Ok(EmbedVars {
            l0: EmbedLayerVars::bind(binder, &format!("{prefix}.l0"))?,
            l1: EmbedLayerVars::bind(binder, &format!("{prefix}.l1"))?,
        })
    }
}

/// Embed all assigned points and max-pool per voxel: `[num_voxels, C]`.
pub fn embed_and_pool_vars<'t>(
    tape: &'t Tape,
    assign: &VoxelAssignment,
    scene: &PointCloudScene,
    params: &EmbedVars<'t>,
    center_offsets: bool,
) -> Var<'t> {
    let inputs = tape.constant(point_inputs(assign, scene, center_offsets));
    let h = params.l0.forward(inputs);
    let h = params.l1.forward(h);
    h.segment_max(&assign.segments)
}

/// Standalone embed-and-pool over plain tensors (runs a throwaway tape).
pub fn embed_and_pool(
    assign: &VoxelAssignment,
    scene: &PointCloudScene,
    store: &ParamStore,
    prefix: &str,
) -> Result<SparseBev> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let vars = EmbedVars::bind(&binder, prefix)?;
    let pooled = embed_and_pool_vars(&tape, assign, scene, &vars, true);
    SparseBev::new(assign.layout.clone(), pooled.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Extent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> Point {
        Point { x, y, z, intensity: 0.4, elongation: 0.2, time_offset: 0.0 }
    }

    fn scene_of(points: Vec<Point>, side: f64) -> PointCloudScene {
        PointCloudScene::new(Extent::square(0.0, 0.0, side), vec![points], vec![]).unwrap()
    }

    #[test]
    fn tanh_normalization_values() {
        let p = normalize_point_features(pt(0.0, 0.0, 0.0));
        assert_eq!(p.intensity, 0.4f64.tanh());
        let z = normalize_point_features(Point { intensity: 0.0, ..pt(0.0, 0.0, 0.0) });
        assert_eq!(z.intensity, 0.0);
        let big = normalize_point_features(Point { intensity: 1e6, ..pt(0.0, 0.0, 0.0) });
        assert!((big.intensity - 1.0).abs() < 1e-12);
        let half = normalize_point_features(Point { intensity: 0.5, ..pt(0.0, 0.0, 0.0) });
        assert!((half.intensity - 0.46211715726).abs() < 1e-9);
    }

    #[test]
    fn nearby_points_share_a_voxel() {
        let scene = scene_of(vec![pt(1.00, 0.5, 0.0), pt(1.10, 0.5, 0.0)], 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        assert_eq!(assign.layout.len(), 1);
        assert_eq!(assign.segments, vec![(0, 2)]);
    }

    #[test]
    fn z_never_partitions() {
        let scene = scene_of(vec![pt(1.0, 1.0, 0.0), pt(1.0, 1.0, 10.0)], 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        assert_eq!(assign.layout.len(), 1);
    }

    #[test]
    fn out_of_extent_points_are_dropped_and_counted() {
        let scene = scene_of(vec![pt(1.0, 1.0, 0.0), pt(-5.0, 1.0, 0.0), pt(1.0, 99.0, 0.0)], 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        assert_eq!(assign.dropped, 2);
        assert_eq!(assign.point_order.len(), 1);
    }

    #[test]
    fn rebinning_oracle_partitions_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<Point> = (0..1000)
            .map(|_| pt(rng.gen_range(0.0..10.24), rng.gen_range(0.0..10.24), rng.gen_range(-2.0..2.0)))
            .collect();
        let scene = scene_of(points.clone(), 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        let voxel_of = assign.voxel_of_points();
        // every point maps to exactly one voxel; re-bin independently
        let mut seen = vec![false; 1000];
        for (vi, &(start, end)) in assign.segments.iter().enumerate() {
            for &pi in &assign.point_order[start..end] {
                assert!(!seen[pi]);
                seen[pi] = true;
                let p = &points[pi];
                let expect = (
                    (p.y / 0.32).floor() as u32,
                    (p.x / 0.32).floor() as u32,
                );
                assert_eq!(assign.layout.coords()[vi], expect);
                assert_eq!(voxel_of[pi], Some(expect));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn random_embed_store(rng: &mut ChaCha8Rng, c: usize) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("embed.l0.w", Tensor::rand_uniform(rng, vec![POINT_FEATURES, c], 0.5));
        store.insert("embed.l0.b", Tensor::rand_uniform(rng, vec![c], 0.5));
        store.insert("embed.l0.ln_g", Tensor::full(vec![c], 1.0));
        store.insert("embed.l0.ln_b", Tensor::zeros(vec![c]));
        store.insert("embed.l1.w", Tensor::rand_uniform(rng, vec![c, c], 0.5));
        store.insert("embed.l1.b", Tensor::rand_uniform(rng, vec![c], 0.5));
        store.insert("embed.l1.ln_g", Tensor::full(vec![c], 1.0));
        store.insert("embed.l1.ln_b", Tensor::zeros(vec![c]));
        store
    }

    #[test]
    fn empty_scene_embeds_to_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let store = random_embed_store(&mut rng, 8);
        let scene = scene_of(vec![], 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        let bev = embed_and_pool(&assign, &scene, &store, "embed").unwrap();
        assert_eq!(bev.layout.len(), 0);
        assert_eq!(bev.feats.shape(), &[0, 8]);
    }

    #[test]
    fn singleton_and_duplicate_points_pool_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let store = random_embed_store(&mut rng, 8);
        let one = scene_of(vec![pt(1.0, 1.0, 0.3)], 10.24);
        let two = scene_of(vec![pt(1.0, 1.0, 0.3), pt(1.0, 1.0, 0.3)], 10.24);
        let a1 = dynamic_voxelize(&one, 0.32).unwrap();
        let a2 = dynamic_voxelize(&two, 0.32).unwrap();
        let b1 = embed_and_pool(&a1, &one, &store, "embed").unwrap();
        let b2 = embed_and_pool(&a2, &two, &store, "embed").unwrap();
        assert_eq!(b1.feats, b2.feats);
    }

    #[test]
    fn pool_matches_bruteforce_max_of_individual_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let store = random_embed_store(&mut rng, 8);
        let points: Vec<Point> = (0..5)
            .map(|_| {
                Point {
                    x: rng.gen_range(0.64..0.96),
                    y: rng.gen_range(0.32..0.64),
                    z: rng.gen_range(-1.0..1.0),
                    intensity: rng.gen_range(0.0..1.0),
                    elongation: rng.gen_range(0.0..1.0),
                    time_offset: 0.0,
                }
            })
            .collect();
        let scene = scene_of(points.clone(), 10.24);
        let assign = dynamic_voxelize(&scene, 0.32).unwrap();
        assert_eq!(assign.layout.len(), 1, "all 5 points must share a voxel");
        let pooled = embed_and_pool(&assign, &scene, &store, "embed").unwrap();

        // brute force: embed each point alone, take the elementwise max
        let mut best = vec![f64::NEG_INFINITY; 8];
        for p in points {
            let solo = scene_of(vec![p], 10.24);
            let a = dynamic_voxelize(&solo, 0.32).unwrap();
            let e = embed_and_pool(&a, &solo, &store, "embed").unwrap();
            for (bi, &v) in best.iter_mut().zip(e.feats.values()) {
                *bi = bi.max(v);
            }
        }
        for (got, want) in pooled.feats.values().iter().zip(&best) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn permutation_of_points_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let store = random_embed_store(&mut rng, 8);
        let mut points: Vec<Point> = (0..12)
            .map(|_| pt(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let scene = scene_of(points.clone(), 10.24);
        let a = dynamic_voxelize(&scene, 0.32).unwrap();
        let base = embed_and_pool(&a, &scene, &store, "embed").unwrap();

        points.reverse();
        let scene2 = scene_of(points, 10.24);
        let a2 = dynamic_voxelize(&scene2, 0.32).unwrap();
        let permuted = embed_and_pool(&a2, &scene2, &store, "embed").unwrap();
        assert_eq!(base.layout.coords(), permuted.layout.coords());
        assert!(base
            .feats
            .values()
            .iter()
            .zip(permuted.feats.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn whole_voxel_translation_shifts_coords_and_keeps_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let store = random_embed_store(&mut rng, 8);
        let points: Vec<Point> = (0..10)
            .map(|_| pt(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let scene = scene_of(points.clone(), 10.24);
        let a = dynamic_voxelize(&scene, 0.32).unwrap();
        let base = embed_and_pool(&a, &scene, &store, "embed").unwrap();

        // translate scene AND extent by 2 voxels in x, 1 in y
        let (dx, dy) = (2.0 * 0.32, 0.32);
        let moved: Vec<Point> = points
            .iter()
            .map(|p| Point { x: p.x + dx, y: p.y + dy, ..*p })
            .collect();
        let scene2 = PointCloudScene::new(Extent::square(0.0, 0.0, 10.24), vec![moved], vec![]).unwrap();
        let a2 = dynamic_voxelize(&scene2, 0.32).unwrap();
        let shifted = embed_and_pool(&a2, &scene2, &store, "embed").unwrap();

        for (i, &(r, c)) in base.layout.coords().iter().enumerate() {
            assert_eq!(shifted.layout.coords()[i], (r + 1, c + 2));
        }
        for (x, y) in base.feats.values().iter().zip(shifted.feats.values()) {
            assert!((x - y).abs() < 1e-12, "features changed under voxel-aligned translation");
        }
    }
}
