//! Fixed, data-dependent index structures consumed by the forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use treefield_core::pointcloud::{extract_skeleton_points, extract_surface_points, knn_indices, super_point_descriptor};
use treefield_core::VoxelVolume;

use crate::error::{FieldError, Result};
use crate::model::Hyper;
use crate::tensor::{ConvRules, SparseMap};

/// Dropped-axis pairs of the XY, YZ and XZ planes, in that order.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Quantizes a normalized coordinate into one of `r` bins.
pub fn cell_of(c: f64, r: usize) -> usize {
    let u = ((c + 1.0) * 0.5 * r as f64).floor();
    u.clamp(0.0, r as f64 - 1.0) as usize
}

/// Continuous cell coordinate with cell `i` centered at `i`, clamped to the grid.
fn continuous(c: f64, r: usize) -> (usize, usize, f64) {
    let u = ((c + 1.0) * 0.5 * r as f64 - 0.5).clamp(0.0, r as f64 - 1.0);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(r - 1);
    (i0, i1, u - i0 as f64)
}

/// Normalized coordinate of the center of cell `i`.
pub fn cell_center(i: usize, r: usize) -> f64 {
    (i as f64 + 0.5) / r as f64 * 2.0 - 1.0
}

/// Mean-pooling map from points onto the three stacked planes (`3·r²` rows).
pub fn triplane_map(coords: &[[f64; 3]], r: usize) -> SparseMap {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 3 * r * r];
    for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
        for (i, c) in coords.iter().enumerate() {
            let cell = cell_of(c[b], r) * r + cell_of(c[a], r);
            rows[p * r * r + cell].push((i, 1.0));
        }
    }
    for row in &mut rows {
        let n = row.len() as f64;
        for e in row.iter_mut() {
            e.1 = 1.0 / n;
        }
    }
    SparseMap::from_rows(coords.len(), &rows)
}

/// Bilinear sampling map of plane `p` for each query, over the stacked `3·r²` plane rows.
pub fn bilinear_map(queries: &[[f64; 3]], r: usize, p: usize) -> SparseMap {
    let (a, b) = PLANE_AXES[p];
    let rows: Vec<Vec<(usize, f64)>> = queries
        .iter()
        .map(|q| {
            let (u0, u1, fu) = continuous(q[a], r);
            let (v0, v1, fv) = continuous(q[b], r);
            let base = p * r * r;
            vec![
                (base + v0 * r + u0, (1.0 - fu) * (1.0 - fv)),
                (base + v0 * r + u1, fu * (1.0 - fv)),
                (base + v1 * r + u0, (1.0 - fu) * fv),
                (base + v1 * r + u1, fu * fv),
            ]
        })
        .collect();
    SparseMap::from_rows(3 * r * r, &rows)
}

/// `[q, sin(2^j π q), cos(2^j π q)]` for `j < bands`, laid out as raw, then per band sin xyz, cos xyz.
pub fn positional_encoding(q: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&q);
    for j in 0..bands {
        let f = (1u64 << j) as f64 * std::f64::consts::PI;
        out.extend(q.iter().map(|&c| (f * c).sin()));
        out.extend(q.iter().map(|&c| (f * c).cos()));
    }
    out
}

/// `w_j = (1/(ε+d_j)) / Σ_l 1/(ε+d_l)` with `ε = 1e-6`.
pub fn inverse_distance_weights(d: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let inv: Vec<f64> = d.iter().map(|&x| 1.0 / (EPS + x)).collect();
    let s: f64 = inv.iter().sum();
    inv.iter().map(|x| x / s).collect()
}

fn clamp_unit(q: [f64; 3]) -> [f64; 3] {
    q.map(|c| c.clamp(-1.0, 1.0))
}

/// Per-query sampling maps and positional-encoding inputs.
#[derive(Clone, Debug)]
pub struct QueryInput {
    pub n: usize,
    pub planes: [Arc<SparseMap>; 3],
    pub encoding: Vec<f64>,
    pub encoding_width: usize,
}

impl QueryInput {
    pub fn new(queries: &[[f64; 3]], r: usize, bands: usize) -> Self {
        let q: Vec<[f64; 3]> = queries.iter().map(|&q| clamp_unit(q)).collect();
        let planes = [0, 1, 2].map(|p| Arc::new(bilinear_map(&q, r, p)));
        let width = 3 + 6 * bands;
        let mut encoding = Vec::with_capacity(q.len() * width);
        for &c in &q {
            encoding.extend(positional_encoding(c, bands));
        }
        QueryInput { n: q.len(), planes, encoding, encoding_width: width }
    }
}

/// Point set plus the maps of its 32³ voxel branch.
#[derive(Clone, Debug)]
pub struct BranchInput {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `n × in_dim` point features.
    pub feats: Vec<f64>,
    pub in_dim: usize,
    /// Points → occupied cells (mean).
    pub pool: Arc<SparseMap>,
    /// Occupied cells → cells touched by trilinear gathering.
    pub conv: Arc<ConvRules>,
    /// Touched cells → points (trilinear weights).
    pub gather: Arc<SparseMap>,
}

impl BranchInput {
    pub fn new(coords: Vec<[f64; 3]>, feats: Vec<f64>, in_dim: usize, grid: usize) -> Result<Self> {
        if feats.len() != coords.len() * in_dim {
            return Err(FieldError::Shape(format!("{} features for {} points of width {in_dim}", feats.len(), coords.len())));
        }
        let (pool, conv, gather) = voxel_branch_maps(&coords, grid);
        Ok(BranchInput { coords, feats, in_dim, pool: Arc::new(pool), conv: Arc::new(conv), gather: Arc::new(gather) })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn grid_index(c: [usize; 3], g: usize) -> usize {
    (c[2] * g + c[1]) * g + c[0]
}

/// Pooling, convolution and gathering maps for a `g³` voxel grid over `[-1,1]³`.
pub fn voxel_branch_maps(coords: &[[f64; 3]], g: usize) -> (SparseMap, ConvRules, SparseMap) {
    let mut occupied: Vec<usize> = coords.iter().map(|c| grid_index(c.map(|x| cell_of(x, g)), g)).collect();
    let point_cell = occupied.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let in_row: HashMap<usize, usize> = occupied.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut pool_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); occupied.len()];
    for (i, c) in point_cell.iter().enumerate() {
        pool_rows[in_row[c]].push((i, 1.0));
    }
    for row in &mut pool_rows {
        let n = row.len() as f64;
        for e in row.iter_mut() {
            e.1 = 1.0 / n;
        }
    }
    let pool = SparseMap::from_rows(coords.len(), &pool_rows);

    let corners: Vec<Vec<(usize, f64)>> = coords
        .iter()
        .map(|c| {
            let ax = [0, 1, 2].map(|a| continuous(c[a], g));
            let mut out = Vec::with_capacity(8);
            for bits in 0..8 {
                let mut idx = [0; 3];
                let mut w = 1.0;
                for a in 0..3 {
                    let (i0, i1, f) = ax[a];
                    if bits >> a & 1 == 1 {
                        idx[a] = i1;
                        w *= f;
                    } else {
                        idx[a] = i0;
                        w *= 1.0 - f;
                    }
                }
                out.push((grid_index(idx, g), w));
            }
            out
        })
        .collect();
    let mut touched: Vec<usize> = corners.iter().flatten().map(|e| e.0).collect();
    touched.sort_unstable();
    touched.dedup();
    let out_row: HashMap<usize, usize> = touched.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let gather_rows: Vec<Vec<(usize, f64)>> =
        corners.iter().map(|row| row.iter().map(|&(c, w)| (out_row[&c], w)).collect()).collect();
    let gather = SparseMap::from_rows(touched.len(), &gather_rows);

    let mut taps = vec![Vec::new(); 27];
    for (o, &cell) in touched.iter().enumerate() {
        let c = [cell % g, cell / g % g, cell / (g * g)];
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if n.iter().any(|&v| v < 0 || v >= g as i64) {
                        continue;
                    }
                    let ni = grid_index(n.map(|v| v as usize), g);
                    if let Some(&i) = in_row.get(&ni) {
                        let t = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                        taps[t].push((o as u32, i as u32));
                    }
                }
            }
        }
    }
    let conv = ConvRules { n_in: occupied.len(), n_out: touched.len(), taps };
    (pool, conv, gather)
}

/// Everything the field encoder needs from one input tree.
#[derive(Clone, Debug)]
pub struct FieldInput {
    pub surface: BranchInput,
    pub skeleton: BranchInput,
    pub k: usize,
    /// Row-major `n_s × k` skeleton indices.
    pub knn: Vec<usize>,
    /// Row-major `n_s × k` inverse-distance weights.
    pub knn_weights: Vec<f64>,
    pub surface_planes: Arc<SparseMap>,
    pub skeleton_planes: Arc<SparseMap>,
    pub union_planes: Arc<SparseMap>,
}

impl FieldInput {
    /// `descriptors` is row-major `n_s × descriptor_width`.
    pub fn from_points(hyper: &Hyper, surface: &[[f64; 3]], descriptors: &[f64], skeleton: &[[f64; 3]]) -> Result<Self> {
        let width = hyper.descriptor_width();
        if descriptors.len() != surface.len() * width {
            return Err(FieldError::Shape(format!("descriptor matrix has {} values, expected {}", descriptors.len(), surface.len() * width)));
        }
        if skeleton.len() < hyper.k {
            return Err(FieldError::NeighborCount { expected: hyper.k, found: skeleton.len() });
        }
        let mut sfeat = Vec::with_capacity(surface.len() * (3 + width));
        for (i, c) in surface.iter().enumerate() {
            sfeat.extend_from_slice(c);
            sfeat.extend_from_slice(&descriptors[i * width..(i + 1) * width]);
        }
        let kfeat: Vec<f64> = skeleton.iter().flat_map(|c| c.iter().copied()).collect();
        let q32: Vec<[f32; 3]> = surface.iter().map(|c| c.map(|x| x as f32)).collect();
        let r32: Vec<[f32; 3]> = skeleton.iter().map(|c| c.map(|x| x as f32)).collect();
        let nb = knn_indices(&q32, &r32, hyper.k)?;
        let mut knn_weights = Vec::with_capacity(nb.indices.len());
        for (i, s) in surface.iter().enumerate() {
            let d: Vec<f64> = nb
                .row(i)
                .iter()
                .map(|&j| (0..3).map(|a| (s[a] - skeleton[j][a]).powi(2)).sum::<f64>().sqrt())
                .collect();
            knn_weights.extend(inverse_distance_weights(&d));
        }
        let union: Vec<[f64; 3]> = surface.iter().chain(skeleton).copied().collect();
        Ok(FieldInput {
            surface: BranchInput::new(surface.to_vec(), sfeat, 3 + width, hyper.grid)?,
            skeleton: BranchInput::new(skeleton.to_vec(), kfeat, 3, hyper.grid)?,
            k: hyper.k,
            knn: nb.indices,
            knn_weights,
            surface_planes: Arc::new(triplane_map(surface, hyper.r)),
            skeleton_planes: Arc::new(triplane_map(skeleton, hyper.r)),
            union_planes: Arc::new(triplane_map(&union, hyper.r)),
        })
    }

    /// Samples `n_s` surface and `n_k` skeleton points of `tree` and builds the input.
    pub fn from_volume(hyper: &Hyper, tree: &VoxelVolume, n_s: usize, n_k: usize, seed: u64) -> Result<Self> {
        let surface = extract_surface_points(tree, n_s, seed)?;
        let skeleton = extract_skeleton_points(tree, n_k, seed.wrapping_add(1))?;
        let mut desc = Vec::with_capacity(surface.len() * hyper.descriptor_width());
        for &v in &surface.source_voxels {
            desc.extend(super_point_descriptor(tree, v, hyper.descriptor_radius).iter().map(|&x| x as f64));
        }
        let s: Vec<[f64; 3]> = surface.coords.iter().map(|c| c.map(|x| x as f64)).collect();
        let k: Vec<[f64; 3]> = skeleton.coords.iter().map(|c| c.map(|x| x as f64)).collect();
        Self::from_points(hyper, &s, &desc, &k)
    }
}
