use std::time::Instant;

use serde::{Deserialize, Serialize};
use treefield_core::{make_normalizer, Voxel, VoxelVolume};
use treefield_field::{Head, Model, QueryInput, Scalar, TriPlaneField};

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};

/// Repair decisions use a strict `p > 0.5`.
pub const REPAIR_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    /// Queries per forward pass.
    pub chunk: usize,
    pub n_s: usize,
    pub n_k: usize,
    /// Seed of the surface and skeleton point sampling.
    pub seed: u64,
}

impl InferOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        InferOptions { chunk: 4096, n_s: cfg.n_s, n_k: cfg.n_k, seed: cfg.seed }
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub encode: f64,
    pub repair: f64,
    pub label: f64,
    pub segment: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub repaired_tree: VoxelVolume,
    /// Predicted reconnections only.
    pub repair_mask: VoxelVolume,
    pub labeled_tree: VoxelVolume,
    pub segment_volume: VoxelVolume,
    pub timings: Timings,
}

/// Head outputs, row-major `voxels.len() × out`, evaluated `chunk` queries at a time.
pub fn head_at_voxels<S: Scalar>(
    model: &Model<S>,
    field: &TriPlaneField<S>,
    dims: [usize; 3],
    voxels: &[Voxel],
    head: Head,
    chunk: usize,
) -> Result<Vec<S>> {
    let norm = make_normalizer(dims);
    let h = &model.hyper;
    let mut out = Vec::with_capacity(voxels.len() * h.head_output(head));
    for part in voxels.chunks(chunk.max(1)) {
        let coords: Vec<[f64; 3]> = part.iter().map(|&v| norm.voxel_center(v)).collect();
        let q = QueryInput::new(&coords, h.r, h.pe_bands);
        out.extend(model.query(field, &q, head)?.data);
    }
    Ok(out)
}

/// 1-based argmax per row; ties go to the lower class.
fn argmax_labels<S: Scalar>(probs: &[S], classes: usize) -> Vec<u8> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8 + 1
        })
        .collect()
}

fn label_volume(dims: [usize; 3], classes: usize, voxels: &[Voxel], labels: &[u8]) -> Result<VoxelVolume> {
    let mut vol = VoxelVolume::zeros(dims, classes as u16 + 1)?;
    for (&v, &l) in voxels.iter().zip(labels) {
        vol.set(v, l)?;
    }
    Ok(vol)
}

/// Encodes `corrupted` once, then answers repair queries on its background,
/// label queries on the repaired tree and segment queries on the lung mask.
pub fn infer_full<S: Scalar>(
    model: &Model<S>,
    corrupted: &VoxelVolume,
    lung_mask: &VoxelVolume,
    opts: &InferOptions,
) -> Result<InferenceResult> {
    corrupted.same_dims(lung_mask)?;
    let h = &model.hyper;
    if h.label_classes > u8::MAX as usize - 1 || h.segment_classes > u8::MAX as usize - 1 {
        return Err(PipelineError::Config("class counts must fit in 8-bit labels".into()));
    }
    let dims = corrupted.dims();
    let start = Instant::now();
    let mut timings = Timings::default();

    let t = Instant::now();
    let input = treefield_field::FieldInput::from_volume(h, corrupted, opts.n_s, opts.n_k, opts.seed)?;
    let field = model.field(&input)?;
    timings.encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let background: Vec<Voxel> = corrupted.background_indices().into_iter().map(|i| corrupted.coord(i)).collect();
    let p = head_at_voxels(model, &field, dims, &background, Head::Repair, opts.chunk)?;
    let mut repair_mask = VoxelVolume::mask(dims)?;
    for (&v, &p) in background.iter().zip(&p) {
        if p.f64() > REPAIR_THRESHOLD {
            repair_mask.set(v, 1)?;
        }
    }
    let repaired_tree = corrupted.to_binary().union(&repair_mask)?;
    timings.repair = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let fg = repaired_tree.foreground_voxels();
    let probs = head_at_voxels(model, &field, dims, &fg, Head::Label, opts.chunk)?;
    let labeled_tree = label_volume(dims, h.label_classes, &fg, &argmax_labels(&probs, h.label_classes))?;
    timings.label = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let lung = lung_mask.foreground_voxels();
    let probs = head_at_voxels(model, &field, dims, &lung, Head::Segment, opts.chunk)?;
    let segment_volume = label_volume(dims, h.segment_classes, &lung, &argmax_labels(&probs, h.segment_classes))?;
    timings.segment = t.elapsed().as_secs_f64();

    timings.total = start.elapsed().as_secs_f64();
    Ok(InferenceResult { repaired_tree, repair_mask, labeled_tree, segment_volume, timings })
}
