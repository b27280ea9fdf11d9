//! Point sets drawn from voxel volumes, local occupancy descriptors and
//! exact K-nearest-neighbor lookup.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::thin_3d;
use crate::voxel::{boundary_voxels, Voxel, VoxelVolume};

/// Isotropic map from continuous voxel coordinates (voxel `i` spans
/// `[i, i + 1)`) to the cube `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub origin: [f64; 3],
    pub scale: f64,
}

pub fn make_normalizer(dims: [usize; 3]) -> Normalizer {
    let longest = dims.iter().copied().max().unwrap_or(1).max(1) as f64;
    Normalizer { origin: dims.map(|d| d as f64 / 2.0), scale: longest / 2.0 }
}

impl Normalizer {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.scale)
    }

    pub fn denormalize(&self, q: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| q[a] * self.scale + self.origin[a])
    }

    /// Normalized position of a voxel center.
    pub fn voxel_center(&self, v: Voxel) -> [f64; 3] {
        self.normalize(v.map(|c| c as f64 + 0.5))
    }

    /// Voxel containing a normalized point, if inside `dims`.
    pub fn containing_voxel(&self, q: [f64; 3], dims: [usize; 3]) -> Option<Voxel> {
        let p = self.denormalize(q);
        let mut v = [0usize; 3];
        for a in 0..3 {
            let f = p[a].floor();
            if f < 0.0 || f >= dims[a] as f64 {
                return None;
            }
            v[a] = f as usize;
        }
        Some(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Surface,
    Skeleton,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Vec<[f32; 3]>,
    pub source_voxels: Vec<Voxel>,
    pub kind: PointKind,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Whitespace-separated `x y z` lines.
    pub fn to_text(&self) -> String {
        self.coords.iter().map(|c| format!("{} {} {}\n", c[0], c[1], c[2])).collect()
    }
}

/// Picks exactly `n_target` of `candidates`: a sorted subset without
/// replacement when there are enough, otherwise every candidate followed by
/// draws with replacement.
pub fn resample<T: Copy, R: Rng + ?Sized>(candidates: &[T], n_target: usize, rng: &mut R) -> Vec<T> {
    let n = candidates.len();
    if n == 0 {
        return Vec::new();
    }
    if n >= n_target {
        let mut idx = sample(rng, n, n_target).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i]).collect()
    } else {
        let mut out = candidates.to_vec();
        out.extend((n..n_target).map(|_| candidates[rng.gen_range(0..n)]));
        out
    }
}

pub fn points_from_voxels(
    voxels: &[Voxel],
    normalizer: &Normalizer,
    n_target: usize,
    seed: u64,
    kind: PointKind,
) -> Result<PointSet> {
    if voxels.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = resample(voxels, n_target, &mut rng);
    let coords = chosen.iter().map(|&v| normalizer.voxel_center(v).map(|c| c as f32)).collect();
    Ok(PointSet { coords, source_voxels: chosen, kind })
}

pub fn extract_surface_points(vol: &VoxelVolume, n_target: usize, seed: u64) -> Result<PointSet> {
    let norm = make_normalizer(vol.dims());
    points_from_voxels(&boundary_voxels(vol), &norm, n_target, seed, PointKind::Surface)
}

pub fn extract_skeleton_points(vol: &VoxelVolume, n_target: usize, seed: u64) -> Result<PointSet> {
    if vol.foreground_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let norm = make_normalizer(vol.dims());
    points_from_voxels(&thin_3d(vol).foreground_voxels(), &norm, n_target, seed, PointKind::Skeleton)
}

/// Binary occupancy of the `(2r+1)^3` cube around `v`, `dz` slowest and `dx`
/// fastest; cells outside the grid read as empty.
pub fn super_point_descriptor(vol: &VoxelVolume, v: Voxel, r: usize) -> Vec<f32> {
    let r = r as i64;
    let mut out = Vec::with_capacity(((2 * r + 1) as usize).pow(3));
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let p = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                out.push((vol.get_or_zero(p) > 0) as u8 as f32);
            }
        }
    }
    out
}

/// Row-major `queries x k` neighbor indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }
}

pub(crate) fn sq_dist(a: [f32; 3], b: [f32; 3]) -> f64 {
    let d = [0, 1, 2].map(|i| a[i] as f64 - b[i] as f64);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Uniform bucket grid over a fixed reference set.
pub struct KnnIndex<'a> {
    points: &'a [[f32; 3]],
    lo: [f64; 3],
    cell: f64,
    res: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> KnnIndex<'a> {
    pub fn new(points: &'a [[f32; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = extent / per_axis as f64;
        let res = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(per_axis + 1));
        let mut idx = Self { points, lo, cell, res, starts: Vec::new(), order: Vec::new() };
        let ncells = res[0] * res[1] * res[2];
        let mut counts = vec![0usize; ncells + 1];
        let keys: Vec<usize> = points.iter().map(|p| idx.key(idx.cell_of(*p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        idx.starts = counts;
        idx.order = order;
        idx
    }

    fn cell_of(&self, p: [f32; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] as f64 - self.lo[a]) / self.cell).floor() as i64).clamp(0, self.res[a] as i64 - 1))
    }

    fn key(&self, c: [i64; 3]) -> usize {
        c[0] as usize + self.res[0] * (c[1] as usize + self.res[1] * c[2] as usize)
    }

    /// The `k` nearest points to `q`, by ascending distance then index.
    pub fn query(&self, q: [f32; 3], k: usize) -> Vec<usize> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let c = self.cell_of(q);
        let max_ring = self.res.iter().copied().max().unwrap_or(1) as i64;
        for ring in 0..=max_ring {
            for z in c[2] - ring..=c[2] + ring {
                for y in c[1] - ring..=c[1] + ring {
                    for x in c[0] - ring..=c[0] + ring {
                        let on_shell = (x - c[0]).abs() == ring || (y - c[1]).abs() == ring || (z - c[2]).abs() == ring;
                        if !on_shell || x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let cc = [x, y, z];
                        if (0..3).any(|a| cc[a] >= self.res[a] as i64) {
                            continue;
                        }
                        let key = self.key(cc);
                        for &i in &self.order[self.starts[key]..self.starts[key + 1]] {
                            let cand = (sq_dist(q, self.points[i]), i);
                            if best.len() == k && cand >= best[k - 1] {
                                continue;
                            }
                            let pos = best.partition_point(|b| *b < cand);
                            best.insert(pos, cand);
                            best.truncate(k);
                        }
                    }
                }
            }
            if best.len() == k {
                // Everything within `covered` of q has been visited.
                let covered = (0..3)
                    .map(|a| {
                        let lo = self.lo[a] + (c[a] - ring) as f64 * self.cell;
                        let hi = self.lo[a] + (c[a] + ring + 1) as f64 * self.cell;
                        let below = if c[a] - ring <= 0 { f64::INFINITY } else { q[a] as f64 - lo };
                        let above = if c[a] + ring + 1 >= self.res[a] as i64 { f64::INFINITY } else { hi - q[a] as f64 };
                        below.min(above)
                    })
                    .fold(f64::INFINITY, f64::min);
                if covered == f64::INFINITY || (covered > 0.0 && best[k - 1].0 < covered * covered) {
                    break;
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

pub fn knn_indices(queries: &[[f32; 3]], reference: &[[f32; 3]], k: usize) -> Result<Neighbors> {
    if reference.len() < k {
        return Err(Error::TooFewReferences { k, n: reference.len() });
    }
    if k == 0 {
        return Ok(Neighbors { k, indices: Vec::new() });
    }
    let index = KnnIndex::new(reference);
    let mut indices = Vec::with_capacity(queries.len() * k);
    for &q in queries {
        indices.extend(index.query(q, k));
    }
    Ok(Neighbors { k, indices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(side: usize, dims: [usize; 3]) -> VoxelVolume {
        let mut v = VoxelVolume::mask(dims).unwrap();
        for z in 1..=side {
            for y in 1..=side {
                for x in 1..=side {
                    v.set([x, y, z], 1).unwrap();
                }
            }
        }
        v
    }

    #[test]
    fn normalizer_conventions() {
        let n = make_normalizer([64, 64, 64]);
        assert_eq!(n.normalize([32.0; 3]), [0.0; 3]);
        let c = n.voxel_center([0, 0, 0]);
        assert!(c.iter().all(|&x| (x - (0.5 - 32.0) / 32.0).abs() < 1e-15));
        let p = [3.25, -7.5, 40.125];
        let r = n.denormalize(n.normalize(p));
        assert!((0..3).all(|a| (r[a] - p[a]).abs() < 1e-12));
        let m = make_normalizer([10, 20, 40]);
        assert!(m.voxel_center([9, 19, 39]).iter().all(|x| x.abs() <= 1.0));
        assert_eq!(m.containing_voxel(m.voxel_center([9, 19, 39]), [10, 20, 40]), Some([9, 19, 39]));
        assert_eq!(m.containing_voxel([1.5, 0.0, 0.0], [10, 20, 40]), None);
    }

    #[test]
    fn surface_points_identity_subsample_and_pad() {
        let v = cube(5, [7, 7, 7]);
        let all = extract_surface_points(&v, 98, 0).unwrap();
        let mut src = all.source_voxels.clone();
        src.sort_unstable();
        src.dedup();
        assert_eq!(src.len(), 98);

        let few = extract_surface_points(&v, 10, 3).unwrap();
        let mut f = few.source_voxels.clone();
        f.sort_unstable();
        f.dedup();
        assert_eq!(f.len(), 10);
        assert!(few.source_voxels.iter().all(|s| src.contains(s)));

        let many = extract_surface_points(&v, 200, 3).unwrap();
        assert_eq!(many.len(), 200);
        let mut m = many.source_voxels.clone();
        m.sort_unstable();
        m.dedup();
        assert_eq!(m, src);
        assert_eq!(many, extract_surface_points(&v, 200, 3).unwrap());
        assert!(many.coords.iter().flatten().all(|c| c.abs() <= 1.0));
    }

    #[test]
    fn skeleton_points_and_empty_input() {
        let mut v = VoxelVolume::mask([12, 5, 5]).unwrap();
        for x in 1..11 {
            v.set([x, 2, 2], 1).unwrap();
        }
        let p = extract_skeleton_points(&v, 10, 1).unwrap();
        assert_eq!(p.kind, PointKind::Skeleton);
        assert_eq!(p.source_voxels, (1..11).map(|x| [x, 2, 2]).collect::<Vec<_>>());
        let e = VoxelVolume::mask([4, 4, 4]).unwrap();
        assert!(matches!(extract_surface_points(&e, 4, 0), Err(Error::EmptyForeground)));
        assert!(matches!(extract_skeleton_points(&e, 4, 0), Err(Error::EmptyForeground)));
    }

    #[test]
    fn descriptor_cases() {
        let v = cube(5, [7, 7, 7]);
        let d = super_point_descriptor(&v, [3, 3, 3], 2);
        assert_eq!(d.len(), 125);
        assert!(d.iter().all(|&x| x == 1.0));
        let mut iso = VoxelVolume::mask([3, 3, 3]).unwrap();
        iso.set([1, 1, 1], 1).unwrap();
        let d = super_point_descriptor(&iso, [1, 1, 1], 2);
        assert_eq!(d.iter().filter(|&&x| x > 0.0).count(), 1);
        assert_eq!(d[62], 1.0);
        assert_eq!(super_point_descriptor(&iso, [1, 1, 1], 0), vec![1.0]);
    }

    #[test]
    fn knn_small_cases() {
        let refs = [[0.0f32, 0.0, 0.0], [0.5, 0.0, 0.0], [-0.25, 0.1, 0.0]];
        let nb = knn_indices(&[[0.5, 0.0, 0.0]], &refs, 1).unwrap();
        assert_eq!(nb.row(0), &[1]);
        let nb = knn_indices(&[[0.9, 0.9, 0.9]], &refs, 3).unwrap();
        let mut r = nb.row(0).to_vec();
        r.sort_unstable();
        assert_eq!(r, vec![0, 1, 2]);
        assert!(matches!(knn_indices(&[[0.0; 3]], &refs, 4), Err(Error::TooFewReferences { k: 4, n: 3 })));
        // equidistant references resolve by index
        let tie = [[1.0f32, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(knn_indices(&[[0.0; 3]], &tie, 2).unwrap().row(0), &[0, 1]);
    }
}
