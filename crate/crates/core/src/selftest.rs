//! The `selftest` command: quick oracle suites over the core operations,
//! one pass/fail line each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{rotated_bev_iou, Box3D};
use crate::error::{Error, Result};
use crate::head::{voxel_diffuse, HeadOutput};
use crate::sparse::{SparseBev, SparseLayout};
use crate::tensor::fd::{finite_difference_gradient, max_rel_error};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::window::{shifted_partition, window_partition, ShiftSpec, WindowConfig};

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn random_layout(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> SparseLayout {
    let mut coords = Vec::new();
    for r in 0..rows as u32 {
        for c in 0..cols as u32 {
            if rng.gen_bool(p) {
                coords.push((r, c));
            }
        }
    }
    SparseLayout::new(rows, cols, 1, coords).unwrap()
}

fn check_partition_bijection(rng: &mut ChaCha8Rng) -> Check {
    for _ in 0..100 {
        let rows = rng.gen_range(1..48);
        let cols = rng.gen_range(1..48);
        let layout = random_layout(rng, rows, cols, 0.2);
        let cfg = WindowConfig::default();
        let set = window_partition(&layout, &cfg);
        let mut seen = vec![false; layout.len()];
        for b in &set.buckets {
            for w in &b.windows {
                for &s in &w.slots {
                    if s >= 0 {
                        if seen[s as usize] {
                            return Check {
                                name: "partition-bijection",
                                passed: false,
                                detail: "duplicate slot".into(),
                            };
                        }
                        seen[s as usize] = true;
                    }
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Check {
                name: "partition-bijection",
                passed: false,
                detail: "omitted voxel".into(),
            };
        }
    }
    Check { name: "partition-bijection", passed: true, detail: "100 random occupancies".into() }
}

fn check_shift_equivalence(rng: &mut ChaCha8Rng) -> Check {
    // the 8x8 / 4x4 construction: 4 windows before, 5 after
    let layout =
        SparseLayout::new(8, 8, 1, vec![(0, 0), (1, 5), (5, 1), (5, 5), (7, 7)]).unwrap();
    let cfg = WindowConfig::new(4, 4, 3).unwrap();
    let before = window_partition(&layout, &cfg).num_windows();
    let after = shifted_partition(&layout, &cfg, ShiftSpec::half_window(&cfg)).num_windows();
    if before != 4 || after != 5 {
        return Check {
            name: "shift-equivalence",
            passed: false,
            detail: format!("expected 4 -> 5 windows, got {before} -> {after}"),
        };
    }
    for _ in 0..100 {
        let layout = random_layout(rng, 24, 24, 0.25);
        let cfg = WindowConfig::new(5, 5, 4).unwrap();
        let shift = ShiftSpec::half_window(&cfg);
        let a = shifted_partition(&layout, &cfg, shift);
        let moved: Vec<(u32, u32)> = layout
            .coords()
            .iter()
            .map(|&(r, c)| (r + shift.dr as u32, c + shift.dc as u32))
            .collect();
        let moved_layout = SparseLayout::new(27, 27, 1, moved).unwrap();
        let b = window_partition(&moved_layout, &cfg);
        if a.buckets != b.buckets {
            return Check {
                name: "shift-equivalence",
                passed: false,
                detail: "shifted partition differs from offset-then-partition".into(),
            };
        }
    }
    Check { name: "shift-equivalence", passed: true, detail: "4->5 case + 100 random".into() }
}

fn check_voxel_diffusion(rng: &mut ChaCha8Rng) -> Check {
    let layout = SparseLayout::new(12, 12, 1, vec![(2, 2), (6, 4)]).unwrap();
    let bev = SparseBev::new(layout, Tensor::full(vec![2, 2], 1.0)).unwrap();
    match voxel_diffuse(&bev, &[0.5, 0.9], 5, 0.05) {
        Ok((out, _)) if out.layout.len() == 47 => {}
        Ok((out, _)) => {
            return Check {
                name: "voxel-diffusion",
                passed: false,
                detail: format!("two-voxel case gave {} voxels, want 47", out.layout.len()),
            }
        }
        Err(e) => {
            return Check { name: "voxel-diffusion", passed: false, detail: e.to_string() }
        }
    }
    for k in [1usize, 3, 5, 9] {
        for _ in 0..12 {
            let layout = random_layout(rng, 14, 14, 0.15);
            if layout.is_empty() {
                continue;
            }
            let n = layout.len();
            let feats = Tensor::rand_uniform(rng, vec![n, 2], 1.0);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let coords = layout.coords().to_vec();
            let bev = SparseBev::new(layout, feats).unwrap();
            let (out, _) = voxel_diffuse(&bev, &scores, k, 0.3).unwrap();
            let kept: Vec<(u32, u32)> = coords
                .iter()
                .zip(&scores)
                .filter(|(_, &s)| s > 0.3)
                .map(|(&c, _)| c)
                .collect();
            let expect = crate::head::diffusion_occupancy(&kept, 14, 14, k);
            if out.layout.coords() != expect.as_slice() {
                return Check {
                    name: "voxel-diffusion",
                    passed: false,
                    detail: format!("occupancy mismatch at k={k}"),
                };
            }
        }
    }
    Check { name: "voxel-diffusion", passed: true, detail: "47-voxel case + union oracle".into() }
}

fn check_rotated_iou(rng: &mut ChaCha8Rng) -> Check {
    for _ in 0..20 {
        let a = Box3D::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            0.0,
            rng.gen_range(1.0..4.0),
            rng.gen_range(1.0..3.0),
            1.0,
            rng.gen_range(-3.0..3.0),
        );
        let b = Box3D::new(
            a.cx + rng.gen_range(-1.5..1.5),
            a.cy + rng.gen_range(-1.5..1.5),
            0.0,
            rng.gen_range(1.0..4.0),
            rng.gen_range(1.0..3.0),
            1.0,
            rng.gen_range(-3.0..3.0),
        );
        let exact = rotated_bev_iou(&a, &b);
        // stratified Monte-Carlo over the union bounding box
        let (ax0, ay0, ax1, ay1) = a.bev_aabb();
        let (bx0, by0, bx1, by1) = b.bev_aabb();
        let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
        let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
        let n = 900;
        let (mut both, mut any) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                let x = x0 + (x1 - x0) * ((i as f64 + rng.gen::<f64>()) / n as f64);
                let y = y0 + (y1 - y0) * ((j as f64 + rng.gen::<f64>()) / n as f64);
                let ia = a.contains_bev(x, y);
                let ib = b.contains_bev(x, y);
                both += (ia && ib) as u64;
                any += (ia || ib) as u64;
            }
        }
        let mc = if any == 0 { 0.0 } else { both as f64 / any as f64 };
        if (exact - mc).abs() > 2e-3 {
            return Check {
                name: "rotated-iou",
                passed: false,
                detail: format!("exact {exact} vs Monte-Carlo {mc}"),
            };
        }
        if rotated_bev_iou(&a, &a) != 1.0 || rotated_bev_iou(&a, &b) != rotated_bev_iou(&b, &a) {
            return Check {
                name: "rotated-iou",
                passed: false,
                detail: "symmetry or self-IoU violated".into(),
            };
        }
    }
    Check { name: "rotated-iou", passed: true, detail: "20 Monte-Carlo pairs".into() }
}

fn check_gradients(rng: &mut ChaCha8Rng) -> Check {
    let x0 = Tensor::rand_uniform(rng, vec![3, 4], 1.5);
    let w = Tensor::rand_uniform(rng, vec![4, 4], 0.7);
    fn build<'t>(t: &'t Tape, x: crate::tensor::tape::Var<'t>, w: &Tensor) -> crate::tensor::tape::Var<'t> {
        let wv = t.constant(w.clone());
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        x.matmul(wv).gelu().layer_norm(g, b, 1e-6).powi(2).sum()
    }
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = build(&tape, x, &w);
    let analytic = match tape.backward(loss) {
        Ok(g) => g.get_or_zeros(x),
        Err(e) => return Check { name: "gradient-check", passed: false, detail: e.to_string() },
    };
    let numeric = finite_difference_gradient(
        |t| {
            let tape = Tape::new();
            let x = tape.leaf(t.clone());
            build(&tape, x, &w).item()
        },
        &x0,
        1e-6,
    );
    let err = max_rel_error(&analytic, numeric.values(), 1e-3);
    Check {
        name: "gradient-check",
        passed: err <= 1e-5,
        detail: format!("max rel err {err:.2e}"),
    }
}

fn check_decode(rng: &mut ChaCha8Rng) -> Check {
    use crate::head::decode;
    use crate::sparse::GridGeometry;
    let geom = GridGeometry { origin_x: 0.0, origin_y: 0.0, voxel_size: 0.32, rows: 12, cols: 12 };
    for _ in 0..50 {
        let layout = random_layout(rng, 12, 12, 0.4);
        if layout.is_empty() {
            continue;
        }
        let n = layout.len();
        let heatmap: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
        let out = HeadOutput {
            heatmap: heatmap.clone(),
            box_params: Tensor::zeros(vec![n, 6]),
            bin_logits: Tensor::zeros(vec![n, 12]),
            bin_residuals: Tensor::zeros(vec![n, 12]),
        };
        let dets = decode(&layout, &geom, &out, 0, &crate::head::HeadConfig::default(), 12);
        // brute-force scan
        let mut dense = vec![0.0f64; 144];
        for (i, &(r, c)) in layout.coords().iter().enumerate() {
            dense[r as usize * 12 + c as usize] = heatmap[i];
        }
        let mut expect = 0usize;
        for (i, &(r, c)) in layout.coords().iter().enumerate() {
            let h = heatmap[i];
            if h < 0.1 {
                continue;
            }
            let mut keep = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= 12 || nc >= 12 {
                        continue;
                    }
                    let o = dense[nr as usize * 12 + nc as usize];
                    if o > h || (o == h && (nr, nc) < (r as i64, c as i64)) {
                        keep = false;
                    }
                }
            }
            expect += keep as usize;
        }
        if dets.len() != expect {
            return Check {
                name: "decode-oracle",
                passed: false,
                detail: format!("{} detections, oracle {expect}", dets.len()),
            };
        }
    }
    Check { name: "decode-oracle", passed: true, detail: "50 random heatmaps".into() }
}

/// Run every suite, print one line per check, and error (numeric failure)
/// if any failed.
pub fn run_selftest() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdecade);
    let checks = vec![
        check_partition_bijection(&mut rng),
        check_shift_equivalence(&mut rng),
        check_voxel_diffusion(&mut rng),
        check_rotated_iou(&mut rng),
        check_gradients(&mut rng),
        check_decode(&mut rng),
    ];
    let mut ok = true;
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric("selftest failed".into()))
    }
}
