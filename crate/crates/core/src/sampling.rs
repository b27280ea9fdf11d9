//! Training queries for the repair, labeling and segment tasks, and weakly
//! supervised repair samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::weak_supervision_accuracy;
use crate::pointcloud::{make_normalizer, resample, Normalizer};
use crate::synth::{add, dot, point_segment_distance};
use crate::topobreak::{corrupt_with_rng, BreakRecord};
use crate::voxel::{dilate_ball, Voxel, VoxelVolume};

/// Near-break queries fall within this multiple of the branch radius.
pub const NEAR_BREAK_RADIUS_FACTOR: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Repair,
    Label,
    Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NearBreak,
    Background,
    Foreground,
    Lung,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub coords: Vec<[f32; 3]>,
    pub task: Task,
    /// Occupancy (0/1) for repair, class id for label and segment queries.
    pub targets: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn sample_repair_queries(
    supervision: &VoxelVolume,
    corrupted: &VoxelVolume,
    records: &[BreakRecord],
    q_r: usize,
    p: f64,
    seed: u64,
) -> Result<QueryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_repair_queries_with(supervision, corrupted, records, q_r, p, &mut rng)
}

/// Near-break queries in a capsule around one randomly chosen break, the
/// rest at background voxel centers of `corrupted`; targets are read from
/// `supervision`.
pub fn sample_repair_queries_with<R: Rng + ?Sized>(
    supervision: &VoxelVolume,
    corrupted: &VoxelVolume,
    records: &[BreakRecord],
    q_r: usize,
    p: f64,
    rng: &mut R,
) -> Result<QueryBatch> {
    if records.is_empty() {
        return Err(Error::NoDisconnection);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidSampling(format!("near-break proportion {p} outside (0, 1)")));
    }
    supervision.same_dims(corrupted)?;
    let dims = corrupted.dims();
    let norm = make_normalizer(dims);
    let rec = &records[rng.gen_range(0..records.len())];
    let n_near = (q_r as f64 * p).floor() as usize;

    let mut batch = QueryBatch {
        coords: Vec::with_capacity(q_r),
        task: Task::Repair,
        targets: Vec::with_capacity(q_r),
        provenance: Vec::with_capacity(q_r),
    };
    let a = rec.endpoint_a.map(|c| c as f64 + 0.5);
    let b = rec.endpoint_b.map(|c| c as f64 + 0.5);
    let radius = (NEAR_BREAK_RADIUS_FACTOR * rec.branch_radius).max(0.5);
    for _ in 0..n_near {
        let pt = sample_in_capsule(a, b, radius, dims, rng);
        let v = containing(pt);
        batch.coords.push(norm.normalize(pt).map(|c| c as f32));
        batch.targets.push((supervision.get(v) > 0) as u8);
        batch.provenance.push(Provenance::NearBreak);
    }

    let n_bg = q_r - n_near;
    let has_background = corrupted.foreground_count() < corrupted.len();
    if n_bg > 0 && !has_background {
        return Err(Error::InvalidSampling("corrupted volume has no background".into()));
    }
    for _ in 0..n_bg {
        let idx = loop {
            let i = rng.gen_range(0..corrupted.len());
            if corrupted.at(i) == 0 {
                break i;
            }
        };
        let v = corrupted.coord(idx);
        batch.coords.push(norm.voxel_center(v).map(|c| c as f32));
        batch.targets.push((supervision.at(idx) > 0) as u8);
        batch.provenance.push(Provenance::Background);
    }
    Ok(batch)
}

/// Uniform point in the capsule around `a -> b`, restricted to the grid.
fn sample_in_capsule<R: Rng + ?Sized>(a: [f64; 3], b: [f64; 3], r: f64, dims: [usize; 3], rng: &mut R) -> [f64; 3] {
    let lo = [0, 1, 2].map(|i| (a[i].min(b[i]) - r).max(0.0));
    let hi = [0, 1, 2].map(|i| (a[i].max(b[i]) + r).min(dims[i] as f64));
    loop {
        let p = [0, 1, 2].map(|i| rng.gen_range(lo[i]..hi[i]));
        if point_segment_distance(p, a, b) <= r && (0..3).all(|i| p[i] < dims[i] as f64) {
            return p;
        }
    }
}

fn containing(p: [f64; 3]) -> Voxel {
    p.map(|c| c.floor() as usize)
}

fn class_queries<R: Rng + ?Sized>(
    support: &VoxelVolume,
    labels: &VoxelVolume,
    n: usize,
    task: Task,
    tag: Provenance,
    rng: &mut R,
) -> Result<QueryBatch> {
    support.same_dims(labels)?;
    let fg = support.foreground_voxels();
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let norm: Normalizer = make_normalizer(support.dims());
    let chosen = resample(&fg, n, rng);
    Ok(QueryBatch {
        coords: chosen.iter().map(|&v| norm.voxel_center(v).map(|c| c as f32)).collect(),
        task,
        targets: chosen.iter().map(|&v| labels.get(v)).collect(),
        provenance: vec![tag; chosen.len()],
    })
}

pub fn sample_label_queries(
    corrupted: &VoxelVolume,
    tree_labels: &VoxelVolume,
    q_l: usize,
    seed: u64,
) -> Result<QueryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_label_queries_with(corrupted, tree_labels, q_l, &mut rng)
}

pub fn sample_label_queries_with<R: Rng + ?Sized>(
    corrupted: &VoxelVolume,
    tree_labels: &VoxelVolume,
    q_l: usize,
    rng: &mut R,
) -> Result<QueryBatch> {
    class_queries(corrupted, tree_labels, q_l, Task::Label, Provenance::Foreground, rng)
}

pub fn sample_segment_queries(
    lung_mask: &VoxelVolume,
    segment_labels: &VoxelVolume,
    q_s: usize,
    seed: u64,
) -> Result<QueryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_segment_queries_with(lung_mask, segment_labels, q_s, &mut rng)
}

pub fn sample_segment_queries_with<R: Rng + ?Sized>(
    lung_mask: &VoxelVolume,
    segment_labels: &VoxelVolume,
    q_s: usize,
    rng: &mut R,
) -> Result<QueryBatch> {
    class_queries(lung_mask, segment_labels, q_s, Task::Segment, Provenance::Lung, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakSample {
    /// The corrupted tree with one more synthetic break.
    pub input_tree: VoxelVolume,
    /// The corrupted tree before that break.
    pub target_tree: VoxelVolume,
    pub synthetic_record: BreakRecord,
}

pub fn make_weak_sample(corrupted: &VoxelVolume, min_nodes: usize, seed: u64) -> Result<WeakSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_weak_sample_with(corrupted, min_nodes, &mut rng)
}

pub fn make_weak_sample_with<R: Rng + ?Sized>(
    corrupted: &VoxelVolume,
    min_nodes: usize,
    rng: &mut R,
) -> Result<WeakSample> {
    let target_tree = corrupted.to_binary();
    let (input_tree, mut records) = corrupt_with_rng(&target_tree, 1, min_nodes, rng)?;
    let synthetic_record = records.pop().ok_or(Error::NoBreakableBranch)?;
    Ok(WeakSample { input_tree, target_tree, synthetic_record })
}

/// The quantities behind the expected weak-supervision accuracy of a
/// corrupted tree: its support, the share of missing voxels relative to it,
/// and the query space obtained by dilating the support by `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakAccuracyEstimate {
    pub tree_voxels: usize,
    pub rho_d: f64,
    pub query_space_voxels: usize,
    pub accuracy: f64,
}

pub fn weak_accuracy_estimate(
    complete: &VoxelVolume,
    corrupted: &VoxelVolume,
    radius: f64,
) -> Result<WeakAccuracyEstimate> {
    complete.same_dims(corrupted)?;
    let tree = corrupted.foreground_voxels();
    if tree.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let missing = complete.difference(corrupted)?.foreground_count();
    let rho_d = (missing as f64 / tree.len() as f64).min(1.0);
    let query_space_voxels = dilate_ball(&tree, radius, corrupted.dims())?.foreground_count();
    let accuracy = weak_supervision_accuracy(tree.len(), rho_d, query_space_voxels)?;
    Ok(WeakAccuracyEstimate { tree_voxels: tree.len(), rho_d, query_space_voxels, accuracy })
}

/// Fraction of `n` weak repair queries whose weak target (occupancy in
/// `corrupted`) agrees with the true target (occupancy in `complete`). Each
/// query picks a center uniformly among corrupted-tree voxels and a point
/// uniformly in the ball of `radius` around it.
pub fn weak_agreement_monte_carlo(
    complete: &VoxelVolume,
    corrupted: &VoxelVolume,
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    complete.same_dims(corrupted)?;
    let tree = corrupted.foreground_voxels();
    if tree.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if n == 0 {
        return Err(Error::InvalidSampling("zero Monte Carlo queries".into()));
    }
    let dims = corrupted.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0usize;
    for _ in 0..n {
        let v = loop {
            let c = tree[rng.gen_range(0..tree.len())].map(|x| x as f64 + 0.5);
            let off = loop {
                let o = [0; 3].map(|_| rng.gen_range(-radius..=radius));
                if dot(o, o) <= radius * radius {
                    break o;
                }
            };
            let p = add(c, off);
            if (0..3).all(|a| p[a] >= 0.0 && p[a] < dims[a] as f64) {
                break containing(p);
            }
        };
        agree += ((complete.get(v) > 0) == (corrupted.get(v) > 0)) as usize;
    }
    Ok(agree as f64 / n as f64)
}
