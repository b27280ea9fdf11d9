//! Procedural labeled tubular trees with lung-region and segment volumes.
//!
//! A tree is a union of straight capsules. The root capsule descends from the
//! top of the grid; every capsule below `depth` spawns `children_per_node`
//! children at jittered angles with decaying radius. Children are resampled
//! until they fit inside the grid and keep clear of unrelated capsules, so the
//! generated voxel tree is one acyclic 26-connected component.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{dilate_ball, squared_distance_to, Voxel, VoxelVolume};

const MIN_RADIUS: f64 = 1.0;
const BRANCH_ANGLE: f64 = PI / 4.0;
const CLEARANCE: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub dims: [usize; 3],
    pub depth: usize,
    pub children_per_node: usize,
    pub trunk_radius: f64,
    pub radius_decay: f64,
    pub branch_length_range: (f64, f64),
    pub bend_jitter: f64,
    /// Tree classes; `class_count` itself labels the trunk.
    pub class_count: u8,
    pub segment_count: u8,
    pub seed: u64,
}

impl TreeSpec {
    /// 64^3 preset used for desk-scale training.
    pub fn desk() -> Self {
        Self {
            dims: [64, 64, 64],
            depth: 2,
            children_per_node: 3,
            trunk_radius: 3.0,
            radius_decay: 0.75,
            branch_length_range: (12.0, 18.0),
            bend_jitter: 0.3,
            class_count: 7,
            segment_count: 6,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.dims.iter().any(|&d| d == 0) {
            return bad("dims must be positive");
        }
        if self.children_per_node < 1 {
            return bad("children_per_node must be >= 1");
        }
        if !(self.trunk_radius >= 1.0) {
            return bad("trunk_radius must be >= 1");
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return bad("radius_decay must lie in (0, 1]");
        }
        let (lo, hi) = self.branch_length_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("branch_length_range must satisfy 0 < min <= max");
        }
        if !(self.bend_jitter >= 0.0) {
            return bad("bend_jitter must be >= 0");
        }
        if self.class_count < 2 || self.class_count == u8::MAX {
            return bad("class_count must lie in 2..=254");
        }
        if self.segment_count < 1 || self.segment_count == u8::MAX {
            return bad("segment_count must lie in 1..=254");
        }
        Ok(())
    }
}

/// One generated capsule, in continuous voxel coordinates (voxel `i` spans
/// `[i, i + 1)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeBranch {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub generation: usize,
    pub parent: Option<usize>,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub spec: TreeSpec,
    pub complete_tree: VoxelVolume,
    pub tree_labels: VoxelVolume,
    pub lung_mask: VoxelVolume,
    pub segment_labels: VoxelVolume,
    pub branches: Vec<TreeBranch>,
}

pub fn generate_case(spec: &TreeSpec) -> Result<SyntheticCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let branches = grow(spec, &mut rng)?;
    rasterize(spec, branches)
}

/// `n_cases` cases with seeds `seed, seed + 1, ...`.
pub fn generate_split(template: &TreeSpec, n_cases: usize, seed: u64) -> Result<Vec<SyntheticCase>> {
    (0..n_cases as u64).map(|i| generate_case(&template.with_seed(seed + i))).collect()
}

fn grow(spec: &TreeSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TreeBranch>> {
    let dims = spec.dims.map(|d| d as f64);
    let r0 = spec.trunk_radius;
    let start = [dims[0] / 2.0, dims[1] / 2.0, dims[2] - r0 - 2.0];
    let down = jitter_direction([0.0, 0.0, -1.0], spec.bend_jitter * 0.5, rng);
    let mut branches: Vec<TreeBranch> = Vec::new();
    let root = place(spec, &branches, None, start, r0, rng, |rng| down_with_length(down, spec, rng))
        .ok_or_else(|| Error::SpecDoesNotFit(format!("trunk of radius {r0} does not fit in {:?}", spec.dims)))?;
    branches.push(TreeBranch { start, end: root, radius: r0, generation: 0, parent: None, class: spec.class_count });

    let peripheral = (spec.class_count - 1).max(1);
    let mut frontier = vec![0usize];
    for generation in 1..=spec.depth {
        let mut next = Vec::new();
        for &parent in &frontier {
            let p = branches[parent].clone();
            let axis = normalize(sub(p.end, p.start));
            let phase = rng.gen_range(0.0..2.0 * PI);
            let radius = (p.radius * spec.radius_decay).max(MIN_RADIUS);
            for k in 0..spec.children_per_node {
                let azimuth = phase + 2.0 * PI * k as f64 / spec.children_per_node as f64;
                let jitter = spec.bend_jitter;
                let end = place(spec, &branches, Some(parent), p.end, radius, rng, |rng| {
                    let theta = BRANCH_ANGLE + jitter * rng.gen_range(-1.0..1.0);
                    let phi = azimuth + jitter * rng.gen_range(-1.0..1.0);
                    let dir = rotate_away(axis, theta, phi);
                    let len = rng.gen_range(spec.branch_length_range.0..=spec.branch_length_range.1);
                    (dir, len)
                })
                .ok_or_else(|| {
                    Error::SpecDoesNotFit(format!("no room for a generation-{generation} branch in {:?}", spec.dims))
                })?;
                let class = if generation == 1 {
                    sector_class(sub(end, p.end), peripheral)
                } else {
                    p.class
                };
                next.push(branches.len());
                branches.push(TreeBranch { start: p.end, end, radius, generation, parent: Some(parent), class });
            }
        }
        frontier = next;
    }
    Ok(branches)
}

/// First-level class from the azimuth of `dir` in the XY plane, so that a
/// class marks the same region in every tree.
fn sector_class(dir: [f64; 3], sectors: u8) -> u8 {
    let az = dir[1].atan2(dir[0]).rem_euclid(2.0 * PI);
    let k = (az / (2.0 * PI) * sectors as f64).floor() as u8;
    1 + k.min(sectors - 1)
}

fn down_with_length(dir: [f64; 3], spec: &TreeSpec, rng: &mut ChaCha8Rng) -> ([f64; 3], f64) {
    (dir, rng.gen_range(spec.branch_length_range.0..=spec.branch_length_range.1))
}

/// Samples candidate (direction, length) pairs until the capsule fits the grid
/// and keeps clear of every branch other than its parent and siblings.
fn place(
    spec: &TreeSpec,
    existing: &[TreeBranch],
    parent: Option<usize>,
    start: [f64; 3],
    radius: f64,
    rng: &mut ChaCha8Rng,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> ([f64; 3], f64),
) -> Option<[f64; 3]> {
    let dims = spec.dims.map(|d| d as f64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let (dir, len) = propose(rng);
        let end = add(start, scale(dir, len));
        let inside = (0..3).all(|a| {
            let lo = radius + 1.0;
            let hi = dims[a] - radius - 1.0;
            start[a] >= lo && start[a] <= hi && end[a] >= lo && end[a] <= hi
        });
        if !inside {
            continue;
        }
        let clear = existing.iter().enumerate().all(|(i, b)| {
            if Some(i) == parent || (b.parent.is_some() && b.parent == parent) {
                return true;
            }
            segment_distance(start, end, b.start, b.end) > radius + b.radius + CLEARANCE
        });
        if clear {
            return Some(end);
        }
    }
    None
}

fn rasterize(spec: &TreeSpec, branches: Vec<TreeBranch>) -> Result<SyntheticCase> {
    let dims = spec.dims;
    let n = dims[0] * dims[1] * dims[2];
    let mut best = vec![f64::INFINITY; n];
    let mut labels = vec![0u8; n];
    for b in &branches {
        let lo: Vec<usize> =
            (0..3).map(|a| (b.start[a].min(b.end[a]) - b.radius - 1.0).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((b.start[a].max(b.end[a]) + b.radius + 1.0).ceil() as usize).min(dims[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let c = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let d = point_segment_distance(c, b.start, b.end);
                    if d <= b.radius {
                        let idx = x + dims[0] * (y + dims[1] * z);
                        // nearest axis decides the label where capsules overlap
                        if d < best[idx] {
                            best[idx] = d;
                            labels[idx] = b.class;
                        }
                    }
                }
            }
        }
    }
    let complete: Vec<u8> = labels.iter().map(|&l| (l > 0) as u8).collect();
    let complete_tree = VoxelVolume::from_data(dims, [1.0; 3], 2, complete)?;
    let tree_labels = VoxelVolume::from_data(dims, [1.0; 3], spec.class_count as u16 + 1, labels.clone())?;

    let peripheral: Vec<Voxel> = (0..n)
        .filter(|&i| labels[i] > 0 && labels[i] < spec.class_count)
        .map(|i| tree_labels.coord(i))
        .collect();
    let lung_mask = dilate_ball(&peripheral, 3.0 * spec.trunk_radius, dims)?;

    // Nearest-voxel Voronoi over peripheral classes; ties go to the smaller class.
    let mut seg = vec![0u8; n];
    let mut seg_best = vec![f64::INFINITY; n];
    for class in 1..spec.class_count {
        if !labels.iter().any(|&l| l == class) {
            continue;
        }
        let sq = squared_distance_to(dims, |i| labels[i] == class);
        let segment = (class - 1) % spec.segment_count + 1;
        for i in 0..n {
            if lung_mask.at(i) > 0 && sq[i] < seg_best[i] {
                seg_best[i] = sq[i];
                seg[i] = segment;
            }
        }
    }
    let segment_labels = VoxelVolume::from_data(dims, [1.0; 3], spec.segment_count as u16 + 1, seg)?;
    Ok(SyntheticCase { spec: spec.clone(), complete_tree, tree_labels, lung_mask, segment_labels, branches })
}

fn jitter_direction(dir: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if jitter == 0.0 {
        return dir;
    }
    let theta = jitter * rng.gen_range(0.0..1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    rotate_away(dir, theta, phi)
}

/// Unit vector at polar angle `theta` from `axis`, azimuth `phi`.
fn rotate_away(axis: [f64; 3], theta: f64, phi: f64) -> [f64; 3] {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(axis, helper));
    let w = cross(axis, u);
    let radial = add(scale(u, phi.cos()), scale(w, phi.sin()));
    normalize(add(scale(axis, theta.cos()), scale(radial, theta.sin())))
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

pub(crate) fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = add(a, scale(ab, t));
    let d = sub(p, q);
    dot(d, d).sqrt()
}

/// Minimum distance between two segments (sampled closest-point search).
fn segment_distance(p0: [f64; 3], p1: [f64; 3], q0: [f64; 3], q1: [f64; 3]) -> f64 {
    let d1 = sub(p1, p0);
    let d2 = sub(q1, q0);
    let r = sub(p0, q0);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);
    let (s, t);
    if a <= 1e-12 && e <= 1e-12 {
        return dot(r, r).sqrt();
    }
    if a <= 1e-12 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e <= 1e-12 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-12 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let cp = add(p0, scale(d1, s));
    let cq = add(q0, scale(d2, t));
    let d = sub(cp, cq);
    dot(d, d).sqrt()
}
