use serde::{Deserialize, Serialize};
use treefield_core::metrics::repair_scores;
use treefield_core::{count_components, gt_components, micro_dice, thin_3d, ComponentSet, MetricsReport};
use treefield_field::{Model, Scalar};

use crate::data::Case;
use crate::error::Result;
use crate::infer::{infer_full, InferOptions, InferenceResult, Timings};

/// Repair scores on the predicted reconnections, labeling Dice on the observed
/// tree and on the complete-tree skeleton, segment Dice on the lung mask.
pub fn evaluate_case(result: &InferenceResult, case: &Case) -> Result<MetricsReport> {
    let s = &case.synthetic;
    let gt = gt_components(&s.complete_tree, &case.corrupted)?;
    let pred = ComponentSet::from_mask(&result.repair_mask);
    let repair = repair_scores(&gt, &pred, &case.corrupted)?;
    let tree = micro_dice(&result.labeled_tree, &s.tree_labels, &case.corrupted)?;
    let skeleton = micro_dice(&result.labeled_tree, &s.tree_labels, &thin_3d(&s.complete_tree))?;
    let lung = micro_dice(&result.segment_volume, &s.segment_labels, &s.lung_mask)?;
    Ok(MetricsReport::new(&repair, &tree, &skeleton, &lung))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub corrupted_ncc: usize,
    pub report: MetricsReport,
    pub timings: Timings,
}

pub fn evaluate_cases<S: Scalar>(model: &Model<S>, cases: &[Case], opts: &InferOptions) -> Result<Vec<CaseEvaluation>> {
    cases
        .iter()
        .map(|c| {
            let result = infer_full(model, &c.corrupted, &c.synthetic.lung_mask, opts)?;
            Ok(CaseEvaluation {
                corrupted_ncc: count_components(&c.corrupted),
                report: evaluate_case(&result, c)?,
                timings: result.timings,
            })
        })
        .collect()
}

/// Means over cases of the headline numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub cf1: f64,
    pub dmf1: f64,
    pub gdice: f64,
    pub ncc: f64,
    pub corrupted_ncc: f64,
    /// Cases whose repaired NCC is below the corrupted NCC.
    pub ncc_improved: usize,
    pub dice_tree: f64,
    pub dice_skeleton: f64,
    pub dice_lung: f64,
    pub infer_seconds: f64,
}

pub fn summarize(evals: &[CaseEvaluation]) -> Summary {
    let n = evals.len().max(1) as f64;
    let m = |f: &dyn Fn(&CaseEvaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Summary {
        cases: evals.len(),
        cf1: m(&|e| e.report.cf1),
        dmf1: m(&|e| e.report.dmf1),
        gdice: m(&|e| e.report.gdice),
        ncc: m(&|e| e.report.ncc as f64),
        corrupted_ncc: m(&|e| e.corrupted_ncc as f64),
        ncc_improved: evals.iter().filter(|e| e.report.ncc < e.corrupted_ncc).count(),
        dice_tree: m(&|e| e.report.dice_tree),
        dice_skeleton: m(&|e| e.report.dice_skeleton),
        dice_lung: m(&|e| e.report.dice_lung),
        infer_seconds: m(&|e| e.timings.total),
    }
}
