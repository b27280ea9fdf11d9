//! Skeleton-guided disconnection of tree branches.
//!
//! A break picks two breakpoints on a branch skeleton and clears the capsule
//! around the path between them. Voxels near the breakpoints survive with a
//! probability that falls to zero towards the middle of the span, giving
//! ragged stubs while the always-cleared central band guarantees the branch is
//! actually cut.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{build_skeleton_graph, thin_3d, SkeletonGraph};
use crate::voxel::{distance_transform, for_each_neighbor, Connectivity, Voxel, VoxelVolume};

pub const DEFAULT_MIN_NODES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreakParams {
    pub p_edge: f64,
    pub gamma: f64,
    pub inflation: f64,
    /// Path voxels kept at each end of the branch.
    pub margin: usize,
    /// Minimum index distance between the two breakpoints.
    pub break_span: usize,
    /// Half-width of the always-cleared band, as a fraction of the span length.
    pub band_fraction: f64,
    /// Lower bound on that half-width in voxels.
    pub band_min: f64,
}

impl Default for BreakParams {
    fn default() -> Self {
        Self { p_edge: 0.35, gamma: 2.0, inflation: 1.25, margin: 2, break_span: 3, band_fraction: 0.1, band_min: 1.5 }
    }
}

impl BreakParams {
    /// Probability that a candidate voxel at arc position `s` along a span of
    /// length `len` survives.
    pub fn keep_probability(&self, s: f64, len: f64) -> f64 {
        let half = (self.band_fraction * len).max(self.band_min);
        let off = (s - 0.5 * len).abs();
        if off <= half {
            return 0.0;
        }
        let t = s / len;
        self.p_edge * (2.0 * (t - 0.5).abs()).min(1.0).powf(self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakRecord {
    pub branch_id: usize,
    pub endpoint_a: Voxel,
    pub endpoint_b: Voxel,
    pub capsule_radius: f64,
    pub branch_radius: f64,
    /// Skeleton path between the breakpoints, inclusive.
    pub path: Vec<Voxel>,
    #[serde(skip)]
    pub removed: Vec<Voxel>,
}

/// Branches whose path holds more than `min_nodes` voxels, in graph order.
/// Paths too short to fit the default margins and break span are never returned.
pub fn select_breakable_branches(graph: &SkeletonGraph, min_nodes: usize) -> Vec<usize> {
    let p = BreakParams::default();
    let shortest = min_nodes.max(2 * p.margin + p.break_span);
    graph.edges.iter().enumerate().filter(|(_, b)| b.path.len() > shortest).map(|(i, _)| i).collect()
}

pub fn apply_break<R: Rng + ?Sized>(
    vol: &VoxelVolume,
    graph: &SkeletonGraph,
    branch_id: usize,
    rng: &mut R,
) -> Result<(VoxelVolume, BreakRecord)> {
    apply_break_with(vol, graph, branch_id, &BreakParams::default(), rng)
}

pub fn apply_break_with<R: Rng + ?Sized>(
    vol: &VoxelVolume,
    graph: &SkeletonGraph,
    branch_id: usize,
    params: &BreakParams,
    rng: &mut R,
) -> Result<(VoxelVolume, BreakRecord)> {
    let branch = graph.edges.get(branch_id).ok_or(Error::UnknownBranch(branch_id))?;
    let n = branch.path.len();
    if n <= 2 * params.margin {
        return Err(Error::BranchNotBreakable(format!("path of {n} voxels is within the end margins")));
    }
    let lo = params.margin;
    let hi = n - 1 - params.margin;
    let pairs: Vec<(usize, usize)> =
        (lo..=hi).flat_map(|a| (a + params.break_span..=hi).map(move |b| (a, b))).collect();
    if pairs.is_empty() {
        return Err(Error::BranchNotBreakable(format!("path of {n} voxels leaves no span of {}", params.break_span)));
    }
    let (ia, ib) = pairs[rng.gen_range(0..pairs.len())];
    let path: Vec<Voxel> = branch.path[ia..=ib].to_vec();
    let radii = &branch.radius_profile[ia..=ib];
    // Thinning can leave the skeleton up to a voxel off the tube axis, so the
    // largest distance-to-background on the span is widened by one voxel.
    let capsule_radius = radii.iter().cloned().fold(0.0, f64::max) + 1.0;
    let branch_radius = radii.iter().sum::<f64>() / radii.len() as f64;
    let reach = capsule_radius * params.inflation;

    let dims = vol.dims();
    let anchors: HashSet<usize> = graph
        .edges
        .iter()
        .enumerate()
        .flat_map(|(e, b)| {
            b.path.iter().enumerate().filter(move |&(k, _)| !(e == branch_id && k > ia && k < ib)).map(|(_, v)| *v)
        })
        .chain(graph.nodes.iter().flat_map(|nd| nd.members.iter().copied()))
        .map(|v| vol.index(v))
        .collect();

    let pts: Vec<[f64; 3]> = path.iter().map(|v| v.map(|c| c as f64)).collect();
    // Positions along the span are measured on a smoothed copy so that the
    // one-voxel zig-zags of a digital skeleton do not make them jump.
    let axis = smooth(&pts, 2);
    let len = polyline_length(&axis);
    let mut candidates: Vec<(usize, bool)> = Vec::new();
    let (mut bmin, mut bmax) = ([i64::MAX; 3], [i64::MIN; 3]);
    for v in &path {
        for a in 0..3 {
            bmin[a] = bmin[a].min(v[a] as i64);
            bmax[a] = bmax[a].max(v[a] as i64);
        }
    }
    let pad = reach.ceil() as i64;
    let clamp = |x: i64, a: usize| x.clamp(0, dims[a] as i64 - 1) as usize;
    // Skeleton voxels of everything else near the span; a voxel closer to one
    // of them than to the span belongs to another branch and is left alone.
    let near = |v: &Voxel| (0..3).all(|a| v[a] as i64 >= bmin[a] - 2 * pad && v[a] as i64 <= bmax[a] + 2 * pad);
    let own: HashSet<usize> = branch.path.iter().map(|v| vol.index(*v)).collect();
    let others: Vec<[f64; 3]> = graph
        .edges
        .iter()
        .flat_map(|b| b.path.iter())
        .chain(graph.nodes.iter().flat_map(|nd| nd.members.iter()))
        .filter(|v| near(v) && !own.contains(&vol.index(**v)))
        .map(|v| v.map(|c| c as f64))
        .collect();
    for z in clamp(bmin[2] - pad, 2)..=clamp(bmax[2] + pad, 2) {
        for y in clamp(bmin[1] - pad, 1)..=clamp(bmax[1] + pad, 1) {
            for x in clamp(bmin[0] - pad, 0)..=clamp(bmax[0] + pad, 0) {
                let idx = vol.index([x, y, z]);
                if vol.at(idx) == 0 {
                    continue;
                }
                let c = [x as f64, y as f64, z as f64];
                let d = polyline_position(&pts, c).1;
                if d > reach {
                    continue;
                }
                let s = polyline_position(&axis, c).0;
                if others.iter().any(|&o| dist(o, c) < d) {
                    continue;
                }
                let keep = anchors.contains(&idx) || rng.gen::<f64>() < params.keep_probability(s, len);
                candidates.push((idx, keep));
            }
        }
    }

    let mut out = vol.clone();
    for &(idx, keep) in &candidates {
        if !keep {
            out.raw_mut()[idx] = 0;
        }
    }
    // Pieces cut loose by the removal that carry no skeleton voxel are dust;
    // they are cleared so the break leaves only the two stubs.
    let mut settled: HashSet<usize> = HashSet::new();
    let mut fronts: Vec<usize> = Vec::new();
    for &(idx, keep) in &candidates {
        if !keep {
            for_each_neighbor(dims, idx, Connectivity::TwentySix, |nb| {
                if out.at(nb) > 0 {
                    fronts.push(nb);
                }
            });
        }
    }
    for start in fronts {
        if settled.contains(&start) || out.at(start) == 0 {
            continue;
        }
        let mut piece = vec![start];
        let mut seen: HashSet<usize> = HashSet::from([start]);
        let mut queue = VecDeque::from([start]);
        let mut anchored = false;
        while let Some(idx) = queue.pop_front() {
            if anchors.contains(&idx) || settled.contains(&idx) {
                anchored = true;
                break;
            }
            for_each_neighbor(dims, idx, Connectivity::TwentySix, |nb| {
                if out.at(nb) > 0 && seen.insert(nb) {
                    piece.push(nb);
                    queue.push_back(nb);
                }
            });
        }
        if anchored {
            settled.extend(seen);
        } else {
            for idx in piece {
                out.raw_mut()[idx] = 0;
            }
        }
    }
    let mut removed: Vec<usize> = (0..vol.len()).filter(|&i| vol.at(i) > 0 && out.at(i) == 0).collect();
    removed.sort_unstable();
    let record = BreakRecord {
        branch_id,
        endpoint_a: path[0],
        endpoint_b: path[path.len() - 1],
        capsule_radius,
        branch_radius,
        path,
        removed: removed.into_iter().map(|i| vol.coord(i)).collect(),
    };
    Ok((out, record))
}

/// Applies up to `n_breaks` breaks, re-extracting the skeleton before each.
pub fn corrupt(
    tree: &VoxelVolume,
    n_breaks: usize,
    min_nodes: usize,
    seed: u64,
) -> Result<(VoxelVolume, Vec<BreakRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with_rng(tree, n_breaks, min_nodes, &mut rng)
}

pub fn corrupt_with_rng<R: Rng + ?Sized>(
    tree: &VoxelVolume,
    n_breaks: usize,
    min_nodes: usize,
    rng: &mut R,
) -> Result<(VoxelVolume, Vec<BreakRecord>)> {
    let mut vol = tree.to_binary();
    let mut records = Vec::new();
    for _ in 0..n_breaks {
        if vol.foreground_count() == 0 || vol.foreground_count() == vol.len() {
            break;
        }
        let graph = build_skeleton_graph(&thin_3d(&vol), &distance_transform(&vol)?);
        let eligible = select_breakable_branches(&graph, min_nodes);
        if eligible.is_empty() {
            break;
        }
        let id = eligible[rng.gen_range(0..eligible.len())];
        let (next, rec) = apply_break(&vol, &graph, id, rng)?;
        vol = next;
        records.push(rec);
    }
    Ok((vol, records))
}

/// Moving average over `w` neighbors on each side; the ends stay fixed.
pub fn smooth(pts: &[[f64; 3]], w: usize) -> Vec<[f64; 3]> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return pts[i];
            }
            let k = w.min(i).min(n - 1 - i);
            let mut acc = [0.0; 3];
            for p in &pts[i - k..=i + k] {
                for a in 0..3 {
                    acc[a] += p[a];
                }
            }
            acc.map(|v| v / (2 * k + 1) as f64)
        })
        .collect()
}

fn polyline_length(pts: &[[f64; 3]]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Arc position of the closest point on the polyline and the distance to it.
pub fn polyline_position(pts: &[[f64; 3]], p: [f64; 3]) -> (f64, f64) {
    if pts.len() == 1 {
        return (0.0, dist(pts[0], p));
    }
    let mut best = (0.0, f64::INFINITY);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let l2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
        let seg = l2.sqrt();
        let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1] + (p[2] - a[2]) * ab[2]) / l2).clamp(0.0, 1.0);
        let q = [a[0] + ab[0] * t, a[1] + ab[1] * t, a[2] + ab[2] * t];
        let d = dist(p, q);
        if d < best.1 {
            best = (acc + t * seg, d);
        }
        acc += seg;
    }
    best
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
