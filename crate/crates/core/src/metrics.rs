//! Repair, labeling and weak-supervision scores.
//!
//! Thresholds are strict (`> 0.5`). When both component sets are empty the
//! detection scores are perfect; when exactly one is empty they are zero, and
//! an undefined precision or recall counts as zero.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{connected_components, count_components, Connectivity, VoxelVolume};

/// Disjoint, nonempty, 26-connected voxel sets stored as sorted linear indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentSet {
    pub dims: [usize; 3],
    pub components: Vec<Vec<usize>>,
}

impl ComponentSet {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self { dims, components: Vec::new() }
    }

    /// 26-connected components of a mask's foreground.
    pub fn from_mask(mask: &VoxelVolume) -> Self {
        let labeling = connected_components(mask, Connectivity::TwentySix);
        Self { dims: mask.dims(), components: labeling.members() }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }

    pub fn union_mask(&self) -> VoxelVolume {
        VoxelVolume::from_indices(self.dims, self.components.iter().flatten().copied())
            .expect("component indices lie inside their dims")
    }

    fn owner_map(&self) -> HashMap<usize, usize> {
        let mut m = HashMap::with_capacity(self.voxel_count());
        for (c, comp) in self.components.iter().enumerate() {
            for &i in comp {
                m.insert(i, c);
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionScore {
    fn from_hits(gt_hits: usize, n_gt: usize, pred_hits: usize, n_pred: usize) -> Self {
        if n_gt == 0 && n_pred == 0 {
            return Self { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let recall = if n_gt == 0 { 0.0 } else { gt_hits as f64 / n_gt as f64 };
        let precision = if n_pred == 0 { 0.0 } else { pred_hits as f64 / n_pred as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Components of `complete` that are missing from `corrupted`.
pub fn gt_components(complete: &VoxelVolume, corrupted: &VoxelVolume) -> Result<ComponentSet> {
    complete.same_dims(corrupted)?;
    if !corrupted.is_subset_of(complete) {
        return Err(Error::ContainmentViolated);
    }
    Ok(ComponentSet::from_mask(&complete.difference(corrupted)?))
}

fn contained_count(a: &ComponentSet, b_union: &VoxelVolume) -> usize {
    a.components
        .iter()
        .filter(|c| {
            let inside = c.iter().filter(|&&i| b_union.at(i) > 0).count();
            inside as f64 / c.len() as f64 > 0.5
        })
        .count()
}

/// Containment F1: a component counts as found when more than half of it lies
/// inside the union of the other side.
pub fn containment_f1(gt: &ComponentSet, pred: &ComponentSet) -> DetectionScore {
    let (gu, pu) = (gt.union_mask(), pred.union_mask());
    DetectionScore::from_hits(contained_count(gt, &pu), gt.len(), contained_count(pred, &gu), pred.len())
}

/// Largest pairwise Dice of each component of `a` against any component of `b`.
fn best_dice(a: &ComponentSet, b: &ComponentSet) -> Vec<f64> {
    let owner = b.owner_map();
    a.components
        .iter()
        .map(|c| {
            let mut overlap: HashMap<usize, usize> = HashMap::new();
            for i in c {
                if let Some(&j) = owner.get(i) {
                    *overlap.entry(j).or_default() += 1;
                }
            }
            overlap
                .into_iter()
                .map(|(j, n)| 2.0 * n as f64 / (c.len() + b.components[j].len()) as f64)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Dice-matching F1: a component counts as found when its best Dice against
/// a single component of the other side exceeds one half.
pub fn dice_matching_f1(gt: &ComponentSet, pred: &ComponentSet) -> DetectionScore {
    let hits = |v: Vec<f64>| v.into_iter().filter(|&d| d > 0.5).count();
    DetectionScore::from_hits(hits(best_dice(gt, pred)), gt.len(), hits(best_dice(pred, gt)), pred.len())
}

pub fn global_dice(gt: &ComponentSet, pred: &ComponentSet) -> f64 {
    let (gu, pu) = (gt.union_mask(), pred.union_mask());
    let (ng, np) = (gu.foreground_count(), pu.foreground_count());
    if ng + np == 0 {
        return 1.0;
    }
    let inter = (0..gu.len()).filter(|&i| gu.at(i) > 0 && pu.at(i) > 0).count();
    2.0 * inter as f64 / (ng + np) as f64
}

/// Component count of the corrupted tree joined with the predicted repairs.
pub fn ncc_repaired(corrupted: &VoxelVolume, pred: &ComponentSet) -> Result<usize> {
    if corrupted.dims() != pred.dims {
        return Err(Error::DimsMismatch(corrupted.dims(), pred.dims));
    }
    let union = corrupted.to_binary().union(&pred.union_mask())?;
    Ok(count_components(&union))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroDice {
    pub micro: f64,
    /// Dice per class present on the mask in either volume.
    pub per_class: BTreeMap<u8, f64>,
}

/// Dice pooled over all nonzero classes on the voxels of `eval_mask`.
pub fn micro_dice(pred_labels: &VoxelVolume, gt_labels: &VoxelVolume, eval_mask: &VoxelVolume) -> Result<MicroDice> {
    pred_labels.same_dims(gt_labels)?;
    pred_labels.same_dims(eval_mask)?;
    // (tp, fp, fn) per class
    let mut table: BTreeMap<u8, [usize; 3]> = BTreeMap::new();
    for i in 0..eval_mask.len() {
        if eval_mask.at(i) == 0 {
            continue;
        }
        let (p, g) = (pred_labels.at(i), gt_labels.at(i));
        if p == g {
            if g > 0 {
                table.entry(g).or_default()[0] += 1;
            }
        } else {
            if p > 0 {
                table.entry(p).or_default()[1] += 1;
            }
            if g > 0 {
                table.entry(g).or_default()[2] += 1;
            }
        }
    }
    let dice = |tp: usize, fp: usize, fne: usize| {
        let den = 2 * tp + fp + fne;
        if den == 0 {
            1.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    let per_class = table.iter().map(|(&c, t)| (c, dice(t[0], t[1], t[2]))).collect();
    let tot = table.values().fold([0usize; 3], |a, t| [a[0] + t[0], a[1] + t[1], a[2] + t[2]]);
    Ok(MicroDice { micro: dice(tot[0], tot[1], tot[2]), per_class })
}

/// Expected label accuracy of weak supervision: the fraction of the query
/// space not covered by true disconnections.
pub fn weak_supervision_accuracy(tree_voxels: usize, rho_d: f64, query_space_voxels: usize) -> Result<f64> {
    if query_space_voxels == 0 {
        return Err(Error::InvalidAccuracyInputs("query space is empty".into()));
    }
    if !(0.0..=1.0).contains(&rho_d) {
        return Err(Error::InvalidAccuracyInputs(format!("rho_d {rho_d} outside [0, 1]")));
    }
    let wrong = tree_voxels as f64 * rho_d;
    if wrong > query_space_voxels as f64 {
        return Err(Error::InvalidAccuracyInputs(format!(
            "{wrong} expected disconnected voxels exceed the query space of {query_space_voxels}"
        )));
    }
    Ok(1.0 - wrong / query_space_voxels as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n_gt: usize,
    pub n_pred: usize,
    pub cf1_precision: f64,
    pub cf1_recall: f64,
    pub dmf1_precision: f64,
    pub dmf1_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cf1: f64,
    pub dmf1: f64,
    pub gdice: f64,
    pub ncc: usize,
    pub dice_tree: f64,
    pub dice_skeleton: f64,
    pub dice_lung: f64,
    pub per_class: BTreeMap<u8, f64>,
    pub counts: MetricCounts,
}

/// The repair half of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct RepairScores {
    pub cf1: DetectionScore,
    pub dmf1: DetectionScore,
    pub gdice: f64,
    pub ncc: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

pub fn repair_scores(gt: &ComponentSet, pred: &ComponentSet, corrupted: &VoxelVolume) -> Result<RepairScores> {
    Ok(RepairScores {
        cf1: containment_f1(gt, pred),
        dmf1: dice_matching_f1(gt, pred),
        gdice: global_dice(gt, pred),
        ncc: ncc_repaired(corrupted, pred)?,
        n_gt: gt.len(),
        n_pred: pred.len(),
    })
}

impl MetricsReport {
    pub fn new(repair: &RepairScores, tree: &MicroDice, skeleton: &MicroDice, lung: &MicroDice) -> Self {
        Self {
            cf1: repair.cf1.f1,
            dmf1: repair.dmf1.f1,
            gdice: repair.gdice,
            ncc: repair.ncc,
            dice_tree: tree.micro,
            dice_skeleton: skeleton.micro,
            dice_lung: lung.micro,
            per_class: tree.per_class.clone(),
            counts: MetricCounts {
                n_gt: repair.n_gt,
                n_pred: repair.n_pred,
                cf1_precision: repair.cf1.precision,
                cf1_recall: repair.cf1.recall,
                dmf1_precision: repair.dmf1.precision,
                dmf1_recall: repair.dmf1.recall,
            },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report is plain data")
    }
}
