//! Non-overlapping window partition with occupancy bucketing, the shifted
//! variant, and the strided (downsampling) partition.
//!
//! Windows are fixed H x W tiles of the BEV grid. Occupied voxels of a
//! window are flattened row-major into one sequence; windows are grouped
//! into buckets by occupancy so attention can run on rectangular batches,
//! padding each window to its bucket capacity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sparse::{SparseBev, SparseLayout};
use crate::tensor::Tensor;

/// Window geometry and the bucket cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub h: usize,
    pub w: usize,
    pub max_buckets: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { h: 10, w: 10, max_buckets: 6 }
    }
}

impl WindowConfig {
    pub fn new(h: usize, w: usize, max_buckets: usize) -> Result<Self> {
        if h == 0 || w == 0 || max_buckets == 0 {
            return Err(Error::Contract("window dims and bucket count must be >= 1".into()));
        }
        Ok(WindowConfig { h, w, max_buckets })
    }

    /// Strictly decreasing capacities `ceil(H*W / 2^i)`, stopping at the
    /// bucket cap or once a capacity would drop below 4.
    pub fn bucket_capacities(&self) -> Vec<usize> {
        let hw = self.h * self.w;
        let mut caps = Vec::new();
        for i in 0..self.max_buckets {
            let cap = hw.div_ceil(1 << i);
            if i > 0 && cap < 4 {
                break;
            }
            if caps.last() == Some(&cap) {
                break; // tiny windows: stop once ceil stops shrinking
            }
            caps.push(cap);
        }
        caps
    }
}

/// Offset added to voxel coordinates before re-partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShiftSpec {
    pub dr: usize,
    pub dc: usize,
}

impl ShiftSpec {
    /// Half the window size in each axis, the standard shift.
    pub fn half_window(cfg: &WindowConfig) -> Self {
        ShiftSpec { dr: cfg.h / 2, dc: cfg.w / 2 }
    }
}

/// One window: its window coordinate, padded slot -> source-voxel indices
/// (-1 for padding), and each valid slot's within-window position.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEntry {
    pub win: (u32, u32),
    /// Length equals the bucket capacity; entries index into the source
    /// layout's coords, -1 marks padding.
    pub slots: Vec<i64>,
    /// Within-window (row, col) of each slot; (0, 0) for padding.
    pub locals: Vec<(u16, u16)>,
    pub n_valid: usize,
}

/// All windows of one capacity, sorted by window coordinate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bucket {
    pub capacity: usize,
    pub windows: Vec<WindowEntry>,
}

/// The partition result: one bucket per capacity (possibly with no
/// windows). Every occupied voxel appears in exactly one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketedWindowSet {
    pub cfg: WindowConfig,
    pub shift: ShiftSpec,
    pub buckets: Vec<Bucket>,
}

impl BucketedWindowSet {
    pub fn num_windows(&self) -> usize {
        self.buckets.iter().map(|b| b.windows.len()).sum()
    }

    pub fn num_valid_slots(&self) -> usize {
        self.buckets
            .iter()
            .flat_map(|b| b.windows.iter())
            .map(|w| w.n_valid)
            .sum()
    }

    /// One line per window: `bucket,window_row,window_col,n_valid`.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for (bi, bucket) in self.buckets.iter().enumerate() {
            for w in &bucket.windows {
                let _ = writeln!(s, "{},{},{},{}", bi, w.win.0, w.win.1, w.n_valid);
            }
        }
        s
    }
}

/// Partition occupied voxels into non-overlapping H x W windows and group
/// the windows into occupancy buckets. The window of voxel `(r, c)` is
/// `(r / H, c / W)`; slot order within a window is row-major.
pub fn window_partition(layout: &SparseLayout, cfg: &WindowConfig) -> BucketedWindowSet {
    shifted_partition(layout, cfg, ShiftSpec::default())
}

/// Same partition applied to coordinates offset by `shift`; slot indices
/// still reference the unshifted layout.
pub fn shifted_partition(
    layout: &SparseLayout,
    cfg: &WindowConfig,
    shift: ShiftSpec,
) -> BucketedWindowSet {
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, &(r, c)) in layout.coords().iter().enumerate() {
        let sr = r as usize + shift.dr;
        let sc = c as usize + shift.dc;
        let win = ((sr / cfg.h) as u32, (sc / cfg.w) as u32);
        groups.entry(win).or_default().push(i);
    }

    let caps = cfg.bucket_capacities();
    let mut buckets: Vec<Bucket> = caps
        .iter()
        .map(|&capacity| Bucket { capacity, windows: Vec::new() })
        .collect();

    for (win, members) in groups {
        let n = members.len();
        // smallest capacity that still holds n (capacities are decreasing)
        let bi = caps
            .iter()
            .rposition(|&cap| cap >= n)
            .expect("window occupancy exceeds window size");
        let cap = caps[bi];
        let mut slots = vec![-1i64; cap];
        let mut locals = vec![(0u16, 0u16); cap];
        for (s, &src) in members.iter().enumerate() {
            let (r, c) = layout.coords()[src];
            slots[s] = src as i64;
            locals[s] = (
                ((r as usize + shift.dr) % cfg.h) as u16,
                ((c as usize + shift.dc) % cfg.w) as u16,
            );
        }
        buckets[bi].windows.push(WindowEntry { win, slots, locals, n_valid: n });
    }

    BucketedWindowSet { cfg: *cfg, shift, buckets }
}

/// Downsample by an integer factor: each `f x f` cell with at least one
/// occupied voxel emits one voxel carrying the feature of the occupied
/// voxel nearest the cell center (ties broken toward the smallest
/// row-major coordinate). Returns the output layout plus, per output
/// voxel, the index of its source voxel.
pub fn strided_plan(layout: &SparseLayout, factor: usize) -> Result<(SparseLayout, Vec<i64>)> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::Contract(format!("stride factor must be 2, 4, or 8, got {factor}")));
    }
    let f = factor as u32;
    // cell -> (best source index, best squared distance)
    let mut best: BTreeMap<(u32, u32), (usize, f64)> = BTreeMap::new();
    for (i, &(r, c)) in layout.coords().iter().enumerate() {
        let cell = (r / f, c / f);
        let center_r = (cell.0 * f) as f64 + (factor as f64 - 1.0) / 2.0;
        let center_c = (cell.1 * f) as f64 + (factor as f64 - 1.0) / 2.0;
        let d = (r as f64 - center_r).powi(2) + (c as f64 - center_c).powi(2);
        // coords iterate in row-major order, so strict improvement keeps
        // the smallest row-major coordinate among equidistant candidates
        match best.get(&cell) {
            Some(&(_, bd)) if bd <= d => {}
            _ => {
                best.insert(cell, (i, d));
            }
        }
    }
    let coords: Vec<(u32, u32)> = best.keys().copied().collect();
    let sources: Vec<i64> = best.values().map(|&(i, _)| i as i64).collect();
    let out = SparseLayout::new(
        layout.rows.div_ceil(factor),
        layout.cols.div_ceil(factor),
        layout.stride * factor,
        coords,
    )?;
    Ok((out, sources))
}

/// Strided partition over features: copies (never pools) the selected
/// source voxel's feature row.
pub fn strided_partition(bev: &SparseBev, factor: usize) -> Result<SparseBev> {
    let (layout, sources) = strided_plan(&bev.layout, factor)?;
    let c = bev.channels();
    let mut out = vec![0.0; sources.len() * c];
    for (o, &src) in sources.iter().enumerate() {
        let s = src as usize * c;
        out[o * c..(o + 1) * c].copy_from_slice(&bev.feats.values()[s..s + c]);
    }
    SparseBev::new(layout, Tensor::new(vec![sources.len(), c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout_of(coords: Vec<(u32, u32)>, rows: usize, cols: usize) -> SparseLayout {
        SparseLayout::new(rows, cols, 1, coords).unwrap()
    }

    #[test]
    fn default_bucket_capacities() {
        let cfg = WindowConfig::default();
        assert_eq!(cfg.bucket_capacities(), vec![100, 50, 25, 13, 7, 4]);
    }

    #[test]
    fn tiny_window_capacities_stay_valid() {
        let cfg = WindowConfig::new(2, 2, 6).unwrap();
        assert_eq!(cfg.bucket_capacities(), vec![4]);
        let cfg = WindowConfig::new(4, 4, 6).unwrap();
        assert_eq!(cfg.bucket_capacities(), vec![16, 8, 4]);
    }

    #[test]
    fn empty_input_has_zero_windows() {
        let layout = SparseLayout::empty(8, 8, 1);
        let set = window_partition(&layout, &WindowConfig::default());
        assert_eq!(set.num_windows(), 0);
    }

    #[test]
    fn single_voxel_goes_to_smallest_bucket() {
        let layout = layout_of(vec![(3, 7)], 20, 20);
        let cfg = WindowConfig::default();
        let set = window_partition(&layout, &cfg);
        assert_eq!(set.num_windows(), 1);
        let last = set.buckets.last().unwrap();
        assert_eq!(last.capacity, 4);
        assert_eq!(last.windows.len(), 1);
        let w = &last.windows[0];
        assert_eq!(w.win, (0, 0));
        assert_eq!(w.n_valid, 1);
        assert_eq!(w.slots[0], 0);
        assert_eq!(w.locals[0], (3, 7));
    }

    /// The 8x8 grid / 4x4 window construction: 4 non-empty windows before
    /// the shift, 5 after.
    #[test]
    fn four_windows_become_five_after_shift() {
        let coords = vec![(0, 0), (1, 5), (5, 1), (5, 5), (7, 7)];
        let layout = layout_of(coords, 8, 8);
        let cfg = WindowConfig::new(4, 4, 3).unwrap();
        let unshifted = window_partition(&layout, &cfg);
        assert_eq!(unshifted.num_windows(), 4);
        let shifted = shifted_partition(&layout, &cfg, ShiftSpec::half_window(&cfg));
        assert_eq!(shifted.num_windows(), 5);
    }

    #[test]
    fn partition_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..40);
            let mut coords = Vec::new();
            for r in 0..rows as u32 {
                for c in 0..cols as u32 {
                    if rng.gen_bool(0.2) {
                        coords.push((r, c));
                    }
                }
            }
            let n = coords.len();
            let layout = layout_of(coords, rows, cols);
            let cfg = WindowConfig::new(rng.gen_range(2..8), rng.gen_range(2..8), 4).unwrap();
            let set = window_partition(&layout, &cfg);
            let mut seen = vec![false; n];
            for b in &set.buckets {
                for w in &b.windows {
                    for &s in &w.slots {
                        if s >= 0 {
                            assert!(!seen[s as usize], "voxel appears twice");
                            seen[s as usize] = true;
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&s| s), "voxel omitted");
        }
    }

    #[test]
    fn buckets_are_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..30 {
            let mut coords = Vec::new();
            for r in 0..30u32 {
                for c in 0..30u32 {
                    if rng.gen_bool(0.35) {
                        coords.push((r, c));
                    }
                }
            }
            let layout = layout_of(coords, 30, 30);
            let cfg = WindowConfig::default();
            let caps = cfg.bucket_capacities();
            let set = window_partition(&layout, &cfg);
            for (bi, b) in set.buckets.iter().enumerate() {
                for w in &b.windows {
                    assert!(w.n_valid <= b.capacity);
                    // no smaller bucket could hold it
                    if bi + 1 < caps.len() {
                        assert!(w.n_valid > caps[bi + 1], "window not in tightest bucket");
                    }
                }
            }
        }
    }

    #[test]
    fn shifted_equals_partition_of_offset_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let mut coords = Vec::new();
            for r in 0..20u32 {
                for c in 0..20u32 {
                    if rng.gen_bool(0.25) {
                        coords.push((r, c));
                    }
                }
            }
            let layout = layout_of(coords.clone(), 20, 20);
            let cfg = WindowConfig::new(5, 5, 4).unwrap();
            let shift = ShiftSpec::half_window(&cfg);
            let a = shifted_partition(&layout, &cfg, shift);

            let moved: Vec<(u32, u32)> = coords
                .iter()
                .map(|&(r, c)| (r + shift.dr as u32, c + shift.dc as u32))
                .collect();
            let moved_layout = SparseLayout::new(23, 23, 1, moved).unwrap();
            let b = window_partition(&moved_layout, &cfg);

            // window-for-window equality (source indices agree because both
            // layouts sort the same point set in the same order)
            assert_eq!(a.num_windows(), b.num_windows());
            for (ba, bb) in a.buckets.iter().zip(&b.buckets) {
                assert_eq!(ba.capacity, bb.capacity);
                assert_eq!(ba.windows.len(), bb.windows.len());
                for (wa, wb) in ba.windows.iter().zip(&bb.windows) {
                    assert_eq!(wa.win, wb.win);
                    assert_eq!(wa.slots, wb.slots);
                    assert_eq!(wa.locals, wb.locals);
                }
            }
        }
    }

    #[test]
    fn strided_rejects_bad_factor() {
        let layout = layout_of(vec![(0, 0)], 4, 4);
        assert!(strided_plan(&layout, 3).is_err());
        assert!(strided_plan(&layout, 1).is_err());
    }

    #[test]
    fn strided_single_voxel_copies_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let layout = layout_of(vec![(13, 2)], 16, 16);
        let feats = Tensor::rand_uniform(&mut rng, vec![1, 5], 1.0);
        let bev = SparseBev::new(layout, feats.clone()).unwrap();
        let out = strided_partition(&bev, 4).unwrap();
        assert_eq!(out.layout.coords(), &[(3, 0)]);
        assert_eq!(out.feats, feats);
        assert_eq!(out.layout.stride, 4);
    }

    #[test]
    fn strided_16_grid_matches_caption_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut coords = Vec::new();
        for r in 0..16u32 {
            for c in 0..16u32 {
                if rng.gen_bool(0.3) {
                    coords.push((r, c));
                }
            }
        }
        let layout = layout_of(coords, 16, 16);
        let (out, _) = strided_plan(&layout, 4).unwrap();
        assert!(out.rows == 4 && out.cols == 4);
        assert!(out.len() <= 16);
    }

    #[test]
    fn strided_matches_exhaustive_argmin_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..40 {
            let rows = rng.gen_range(2..24);
            let cols = rng.gen_range(2..24);
            let mut coords = Vec::new();
            for r in 0..rows as u32 {
                for c in 0..cols as u32 {
                    if rng.gen_bool(0.3) {
                        coords.push((r, c));
                    }
                }
            }
            let layout = layout_of(coords.clone(), rows, cols);
            let (out, srcs) = strided_plan(&layout, 2).unwrap();

            // exhaustive per-cell argmin with documented tie-break
            let mut expect: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for cell_r in 0..rows.div_ceil(2) as u32 {
                for cell_c in 0..cols.div_ceil(2) as u32 {
                    let mut best: Option<(f64, usize)> = None;
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        if r / 2 != cell_r || c / 2 != cell_c {
                            continue;
                        }
                        let d = (r as f64 - (cell_r * 2) as f64 - 0.5).powi(2)
                            + (c as f64 - (cell_c * 2) as f64 - 0.5).powi(2);
                        best = match best {
                            None => Some((d, i)),
                            Some((bd, bi)) => {
                                if d < bd || (d == bd && coords[i] < coords[bi]) {
                                    Some((d, i))
                                } else {
                                    Some((bd, bi))
                                }
                            }
                        };
                    }
                    if let Some((_, i)) = best {
                        expect.insert((cell_r, cell_c), i);
                    }
                }
            }
            assert_eq!(out.len(), expect.len());
            for (o, (&cell, &src)) in expect.iter().enumerate() {
                assert_eq!(out.coords()[o], cell);
                assert_eq!(srcs[o], src as i64);
            }
        }
    }

    #[test]
    fn singletons_per_cell_are_preserved_exactly() {
        // one voxel per 2x2 cell: every feature must pass through unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let coords: Vec<(u32, u32)> = (0..6u32)
            .flat_map(|cr| (0..6u32).map(move |cc| (cr * 2 + 1, cc * 2)))
            .collect();
        let layout = layout_of(coords, 12, 12);
        let feats = Tensor::rand_uniform(&mut rng, vec![36, 3], 1.0);
        let bev = SparseBev::new(layout, feats.clone()).unwrap();
        let out = strided_partition(&bev, 2).unwrap();
        assert_eq!(out.feats, feats);
    }

    #[test]
    fn debug_dump_format() {
        let layout = layout_of(vec![(0, 0), (0, 1), (9, 9)], 10, 10);
        let set = window_partition(&layout, &WindowConfig::new(5, 5, 2).unwrap());
        let dump = set.debug_dump();
        for line in dump.lines() {
            assert_eq!(line.split(',').count(), 4);
        }
        assert_eq!(dump.lines().count(), 2);
    }
}
