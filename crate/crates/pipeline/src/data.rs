//! Corrupted synthetic cases and their per-case training inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treefield_core::{
    corrupt, generate_case, make_weak_sample, BreakRecord, Error as CoreError, StoredCase, SyntheticCase, TreeSpec,
    VoxelVolume, WeakSample,
};
use treefield_field::{FieldInput, Hyper};

use crate::config::{Supervision, TrainConfig};
use crate::error::{PipelineError, Result};

/// A synthetic tree with its TopoBreak corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub synthetic: SyntheticCase,
    pub corrupted: VoxelVolume,
    pub records: Vec<BreakRecord>,
}

impl Case {
    pub fn from_stored(s: StoredCase) -> Result<Self> {
        let corrupted = s.corrupted.ok_or_else(|| PipelineError::Config("case has no corrupted volume".into()))?;
        Ok(Case { synthetic: s.case, corrupted, records: s.records })
    }

    pub fn to_stored(&self) -> StoredCase {
        StoredCase { case: self.synthetic.clone(), corrupted: Some(self.corrupted.clone()), records: self.records.clone() }
    }
}

/// SplitMix64 of `seed` mixed with a tag and an index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_BREAKS: u64 = 1;
const TAG_WEAK: u64 = 2;
const TAG_POINTS: u64 = 3;
pub(crate) const TAG_TRAIN: u64 = 4;

/// `n` trees with seeds `seed, seed + 1, ...`, each corrupted by [`corrupt_case`]
/// under its own seed.
pub fn build_cases(spec: &TreeSpec, n: usize, seed: u64, breaks: (usize, usize), min_nodes: usize) -> Result<Vec<Case>> {
    if breaks.0 > breaks.1 {
        return Err(PipelineError::Config(format!("break range {breaks:?} is empty")));
    }
    (0..n as u64)
        .map(|i| {
            let s = seed + i;
            corrupt_case(generate_case(&spec.with_seed(s))?, breaks, min_nodes, s)
        })
        .collect()
}

/// Draws a break count uniformly from `breaks` (inclusive) and applies TopoBreak.
pub fn corrupt_case(synthetic: SyntheticCase, breaks: (usize, usize), min_nodes: usize, seed: u64) -> Result<Case> {
    if breaks.0 > breaks.1 {
        return Err(PipelineError::Config(format!("break range {breaks:?} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_BREAKS, 0));
    let count = rng.gen_range(breaks.0..=breaks.1);
    let (corrupted, records) = corrupt(&synthetic.complete_tree, count, min_nodes, rng.gen())?;
    Ok(Case { synthetic, corrupted, records })
}

/// The extra-break sample used for case `index` in weak mode; `None` when the
/// corrupted tree has no breakable branch left.
pub fn weak_sample_for(cfg: &TrainConfig, case: &Case, index: usize) -> Result<Option<WeakSample>> {
    match make_weak_sample(&case.corrupted, cfg.min_nodes, derive_seed(cfg.seed, TAG_WEAK, index as u64)) {
        Ok(w) => Ok(Some(w)),
        Err(CoreError::NoBreakableBranch) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// What one training case contributes: the encoder input and the volumes the
/// repair queries are drawn from and scored against.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: FieldInput,
    pub input_tree: VoxelVolume,
    pub supervision: VoxelVolume,
    /// Empty when the case has no break to learn from.
    pub records: Vec<BreakRecord>,
}

/// The only difference between the two supervision modes is which trees
/// and records are selected here.
pub fn prepare(cfg: &TrainConfig, hyper: &Hyper, case: &Case, index: usize) -> Result<Prepared> {
    let (input_tree, supervision, records) = match cfg.supervision {
        Supervision::Full => (case.corrupted.clone(), case.synthetic.complete_tree.clone(), case.records.clone()),
        Supervision::Weak => match weak_sample_for(cfg, case, index)? {
            Some(w) => (w.input_tree, w.target_tree, vec![w.synthetic_record]),
            None => (case.corrupted.clone(), case.corrupted.clone(), Vec::new()),
        },
    };
    let input = field_input(cfg, hyper, &input_tree, derive_seed(cfg.seed, TAG_POINTS, index as u64))?;
    Ok(Prepared { input, input_tree, supervision, records })
}

pub fn field_input(cfg: &TrainConfig, hyper: &Hyper, tree: &VoxelVolume, seed: u64) -> Result<FieldInput> {
    Ok(FieldInput::from_volume(hyper, tree, cfg.n_s, cfg.n_k, seed)?)
}
