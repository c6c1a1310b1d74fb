//! Sparse BEV grids: occupied coordinates plus per-voxel features, with
//! scatter/gather against dense grids, dense max pooling, and sparse
//! upsampling between scales.

use crate::error::{Error, Result};
use crate::scene::Extent;
use crate::tensor::Tensor;

/// World mapping of the base (stride-1) BEV grid. Row indexes y, column
/// indexes x, origin at the extent's minimum corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub origin_x: f64,
    pub origin_y: f64,
    pub voxel_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn from_extent(extent: Extent, voxel_size: f64) -> Result<Self> {
        if voxel_size <= 0.0 {
            return Err(Error::Contract("voxel_size must be positive".into()));
        }
        Ok(GridGeometry {
            origin_x: extent.min_x,
            origin_y: extent.min_y,
            voxel_size,
            rows: (extent.height / voxel_size).ceil() as usize,
            cols: (extent.width / voxel_size).ceil() as usize,
        })
    }

    /// Voxel of a world point, or None when outside the grid.
    pub fn voxel_of(&self, x: f64, y: f64) -> Option<(u32, u32)> {
        let col = ((x - self.origin_x) / self.voxel_size).floor();
        let row = ((y - self.origin_y) / self.voxel_size).floor();
        if row < 0.0 || col < 0.0 || row >= self.rows as f64 || col >= self.cols as f64 {
            return None;
        }
        Some((row as u32, col as u32))
    }

    /// World center of a voxel at a given stride (stride 1 = base cells).
    pub fn center_of(&self, row: u32, col: u32, stride: usize) -> (f64, f64) {
        let s = self.voxel_size * stride as f64;
        (
            self.origin_x + (col as f64 + 0.5) * s,
            self.origin_y + (row as f64 + 0.5) * s,
        )
    }
}

/// Occupied coordinates of one scale, sorted row-major and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayout {
    pub rows: usize,
    pub cols: usize,
    /// Downsampling factor relative to the base grid.
    pub stride: usize,
    coords: Vec<(u32, u32)>,
}

impl SparseLayout {
    pub fn new(rows: usize, cols: usize, stride: usize, mut coords: Vec<(u32, u32)>) -> Result<Self> {
        coords.sort_unstable();
        for pair in coords.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Contract(format!("duplicate coordinate {:?}", pair[0])));
            }
        }
        if let Some(&(r, c)) = coords.last() {
            if r as usize >= rows || coords.iter().any(|&(_, c2)| c2 as usize >= cols) {
                return Err(Error::Contract(format!(
                    "coordinate ({r},{c}) outside {rows}x{cols} grid"
                )));
            }
        }
        Ok(SparseLayout { rows, cols, stride, coords })
    }

    pub fn empty(rows: usize, cols: usize, stride: usize) -> Self {
        SparseLayout { rows, cols, stride, coords: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    /// Index of a coordinate in the sorted order, if occupied.
    pub fn index_of(&self, coord: (u32, u32)) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    pub fn flat(&self, coord: (u32, u32)) -> usize {
        coord.0 as usize * self.cols + coord.1 as usize
    }
}

/// Sparse BEV feature map: layout plus a `[len, channels]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBev {
    pub layout: SparseLayout,
    pub feats: Tensor,
}

impl SparseBev {
    pub fn new(layout: SparseLayout, feats: Tensor) -> Result<Self> {
        let expected = layout.len();
        if feats.shape().len() != 2 || feats.shape()[0] != expected {
            return Err(Error::Shape(format!(
                "features {:?} do not match {} occupied voxels",
                feats.shape(),
                expected
            )));
        }
        Ok(SparseBev { layout, feats })
    }

    pub fn empty(rows: usize, cols: usize, stride: usize, channels: usize) -> Self {
        SparseBev {
            layout: SparseLayout::empty(rows, cols, stride),
            feats: Tensor::zeros(vec![0, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }
}

/// Scatter sparse features onto a dense `[rows, cols, channels]` grid with
/// a fill value everywhere else.
pub fn scatter_to_dense(bev: &SparseBev, fill: f64) -> Tensor {
    let c = bev.channels();
    let (rows, cols) = (bev.layout.rows, bev.layout.cols);
    let mut out = vec![fill; rows * cols * c];
    for (i, &coord) in bev.layout.coords().iter().enumerate() {
        let base = bev.layout.flat(coord) * c;
        out[base..base + c].copy_from_slice(&bev.feats.values()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![rows, cols, c], out).unwrap()
}

/// Read the features at the layout's occupied coordinates back out of a
/// dense `[rows, cols, channels]` grid.
pub fn gather_from_dense(dense: &Tensor, layout: &SparseLayout) -> Result<Tensor> {
    let shape = dense.shape();
    if shape.len() != 3 || shape[0] != layout.rows || shape[1] != layout.cols {
        return Err(Error::Shape(format!(
            "dense grid {:?} does not match {}x{} layout",
            shape, layout.rows, layout.cols
        )));
    }
    let c = shape[2];
    let mut out = vec![0.0; layout.len() * c];
    for (i, &coord) in layout.coords().iter().enumerate() {
        let base = layout.flat(coord) * c;
        out[i * c..(i + 1) * c].copy_from_slice(&dense.values()[base..base + c]);
    }
    Tensor::new(vec![layout.len(), c], out)
}

/// Per-channel k x k sliding max with same-size output; positions outside
/// the grid contribute `fill`. k must be odd.
pub fn dense_max_pool(grid: &Tensor, k: usize, fill: f64) -> Result<Tensor> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Contract(format!("pool window must be odd, got {k}")));
    }
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [rows, cols, ch], got {shape:?}")));
    }
    let (rows, cols, ch) = (shape[0], shape[1], shape[2]);
    let half = (k / 2) as i64;
    let v = grid.values();
    let mut out = vec![fill; v.len()];
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            // windows clipped by the border treat the missing cells as fill
            let clipped = r - half < 0
                || r + half >= rows as i64
                || c - half < 0
                || c + half >= cols as i64;
            for ci in 0..ch {
                let mut best = if clipped { fill } else { f64::NEG_INFINITY };
                for dr in -half..=half {
                    let nr = r + dr;
                    if nr < 0 || nr >= rows as i64 {
                        continue;
                    }
                    for dc in -half..=half {
                        let nc = c + dc;
                        if nc < 0 || nc >= cols as i64 {
                            continue;
                        }
                        let val = v[(nr as usize * cols + nc as usize) * ch + ci];
                        if val > best {
                            best = val;
                        }
                    }
                }
                out[(r as usize * cols + c as usize) * ch + ci] = best;
            }
        }
    }
    Tensor::new(vec![rows, cols, ch], out)
}

/// For every fine-template voxel, the index of its covering coarse voxel
/// (-1 when the coarse cell is empty). Errors unless the coarse stride is
/// an integer multiple of the fine stride.
pub fn upsample_parent_indices(coarse: &SparseLayout, fine: &SparseLayout) -> Result<Vec<i64>> {
    if coarse.stride == 0 || fine.stride == 0 || coarse.stride % fine.stride != 0 {
        return Err(Error::Contract(format!(
            "coarse stride {} is not a multiple of fine stride {}",
            coarse.stride, fine.stride
        )));
    }
    let f = (coarse.stride / fine.stride) as u32;
    Ok(fine
        .coords()
        .iter()
        .map(|&(r, c)| coarse.index_of((r / f, c / f)).map_or(-1, |i| i as i64))
        .collect())
}

/// Duplicate coarse features onto the fine template's occupancy; fine
/// voxels whose covering coarse cell is empty receive zeros. The output
/// coordinate set is exactly the fine template's.
pub fn sparse_upsample(coarse: &SparseBev, fine_template: &SparseBev) -> Result<SparseBev> {
    let parents = upsample_parent_indices(&coarse.layout, &fine_template.layout)?;
    let c = coarse.channels();
    let mut out = vec![0.0; parents.len() * c];
    for (i, &p) in parents.iter().enumerate() {
        if p >= 0 {
            let s = p as usize * c;
            out[i * c..(i + 1) * c].copy_from_slice(&coarse.feats.values()[s..s + c]);
        }
    }
    SparseBev::new(fine_template.layout.clone(), Tensor::new(vec![parents.len(), c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bev_from(coords: Vec<(u32, u32)>, rows: usize, cols: usize, c: usize, seed: u64) -> SparseBev {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = SparseLayout::new(rows, cols, 1, coords).unwrap();
        let feats = Tensor::rand_uniform(&mut rng, vec![layout.len(), c], 1.0);
        SparseBev::new(layout, feats).unwrap()
    }

    #[test]
    fn layout_rejects_duplicates_and_out_of_range() {
        assert!(SparseLayout::new(4, 4, 1, vec![(0, 0), (0, 0)]).is_err());
        assert!(SparseLayout::new(4, 4, 1, vec![(4, 0)]).is_err());
        assert!(SparseLayout::new(4, 4, 1, vec![(0, 7)]).is_err());
    }

    #[test]
    fn scatter_empty_is_all_fill() {
        let bev = SparseBev::empty(3, 3, 1, 2);
        let dense = scatter_to_dense(&bev, 0.5);
        assert!(dense.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scatter_single_voxel() {
        let bev = bev_from(vec![(2, 3)], 4, 5, 3, 1);
        let dense = scatter_to_dense(&bev, 0.0);
        for r in 0..4u32 {
            for c in 0..5u32 {
                let base = (r as usize * 5 + c as usize) * 3;
                let any = dense.values()[base..base + 3].iter().any(|&v| v != 0.0);
                assert_eq!(any, (r, c) == (2, 3));
            }
        }
    }

    #[test]
    fn scatter_gather_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut coords = Vec::new();
        for r in 0..8u32 {
            for c in 0..8u32 {
                if rng.gen_bool(0.3) {
                    coords.push((r, c));
                }
            }
        }
        let bev = bev_from(coords, 8, 8, 4, 3);
        let dense = scatter_to_dense(&bev, 0.0);
        let back = gather_from_dense(&dense, &bev.layout).unwrap();
        assert_eq!(back, bev.feats);
    }

    #[test]
    fn max_pool_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Tensor::rand_uniform(&mut rng, vec![5, 6, 2], 1.0);
        assert_eq!(dense_max_pool(&grid, 1, 0.0).unwrap(), grid);
    }

    #[test]
    fn max_pool_rejects_even_k() {
        let grid = Tensor::zeros(vec![3, 3, 1]);
        assert!(dense_max_pool(&grid, 2, 0.0).is_err());
    }

    #[test]
    fn max_pool_single_cell_spreads_block() {
        let mut grid = Tensor::zeros(vec![9, 9, 1]);
        grid.values_mut()[4 * 9 + 4] = 2.0;
        let pooled = dense_max_pool(&grid, 5, 0.0).unwrap();
        for r in 0..9usize {
            for c in 0..9usize {
                let expect = if (2..=6).contains(&r) && (2..=6).contains(&c) { 2.0 } else { 0.0 };
                assert_eq!(pooled.values()[r * 9 + c], expect, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn max_pool_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols, ch) = (7, 6, 3);
        let grid = Tensor::rand_uniform(&mut rng, vec![rows, cols, ch], 1.0);
        let k = 3usize;
        let pooled = dense_max_pool(&grid, k, -10.0).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                for ci in 0..ch {
                    let mut best = -10.0f64;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                                continue;
                            }
                            best = best.max(grid.values()[(nr as usize * cols + nc as usize) * ch + ci]);
                        }
                    }
                    assert_eq!(pooled.values()[(r * cols + c) * ch + ci], best);
                }
            }
        }
    }

    #[test]
    fn upsample_empty_template_is_empty() {
        let coarse = bev_from(vec![(0, 0)], 2, 2, 3, 6);
        let mut coarse = coarse;
        coarse.layout.stride = 2;
        let fine = SparseBev::empty(4, 4, 1, 3);
        let up = sparse_upsample(&coarse, &fine).unwrap();
        assert!(up.layout.is_empty());
    }

    #[test]
    fn upsample_copies_parent_feature() {
        let mut coarse = bev_from(vec![(0, 0), (1, 1)], 2, 2, 2, 7);
        coarse.layout.stride = 2;
        let fine = bev_from(vec![(3, 2)], 4, 4, 2, 8);
        let up = sparse_upsample(&coarse, &fine).unwrap();
        // (3,2) / 2 = (1,1) -> second coarse voxel
        assert_eq!(up.feats.values(), &coarse.feats.values()[2..4]);
        assert_eq!(up.layout.coords(), fine.layout.coords());
    }

    #[test]
    fn upsample_requires_stride_multiple() {
        let mut coarse = bev_from(vec![(0, 0)], 2, 2, 1, 9);
        coarse.layout.stride = 3;
        let mut fine = SparseBev::empty(4, 4, 1, 1);
        fine.layout.stride = 2;
        assert!(sparse_upsample(&coarse, &fine).is_err());
    }

    #[test]
    fn upsample_matches_dense_nearest_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let mut ccoords = Vec::new();
            for r in 0..4u32 {
                for c in 0..4u32 {
                    if rng.gen_bool(0.4) {
                        ccoords.push((r, c));
                    }
                }
            }
            let mut fcoords = Vec::new();
            for r in 0..8u32 {
                for c in 0..8u32 {
                    if rng.gen_bool(0.4) {
                        fcoords.push((r, c));
                    }
                }
            }
            let mut coarse = bev_from(ccoords, 4, 4, 2, rng.gen());
            coarse.layout.stride = 2;
            let fine = bev_from(fcoords, 8, 8, 2, rng.gen());
            let up = sparse_upsample(&coarse, &fine).unwrap();

            // dense nearest-upsample then mask by fine occupancy
            let cd = scatter_to_dense(&coarse, 0.0);
            for (i, &(r, c)) in fine.layout.coords().iter().enumerate() {
                let parent_occ = coarse.layout.index_of((r / 2, c / 2)).is_some();
                let base = ((r / 2) as usize * 4 + (c / 2) as usize) * 2;
                for ci in 0..2 {
                    let want = if parent_occ { cd.values()[base + ci] } else { 0.0 };
                    assert_eq!(up.feats.values()[i * 2 + ci], want);
                }
            }
        }
    }
}
