//! On-disk layout of a case: one VVOL file per volume and a JSON manifest.
//!
//! ```text
//! case_dir/
//!   manifest.json
//!   complete.vvol  tree_labels.vvol  lung_mask.vvol  segment_labels.vvol
//!   corrupted.vvol removed.vvol      (only for corrupted cases)
//! ```
//!
//! `removed.vvol` labels each removed voxel with the 1-based index of the
//! break that removed it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{SyntheticCase, TreeBranch, TreeSpec};
use crate::topobreak::BreakRecord;
use crate::voxel::{read_volume, write_volume, VoxelVolume};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestBreak {
    #[serde(flatten)]
    pub record: BreakRecord,
    pub removed_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: TreeSpec,
    pub branches: Vec<TreeBranch>,
    #[serde(default)]
    pub breaks: Option<Vec<ManifestBreak>>,
}

/// A generated case together with its corruption, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredCase {
    pub case: SyntheticCase,
    pub corrupted: Option<VoxelVolume>,
    pub records: Vec<BreakRecord>,
}

pub fn save_case(
    dir: impl AsRef<Path>,
    case: &SyntheticCase,
    corruption: Option<(&VoxelVolume, &[BreakRecord])>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_volume(&case.complete_tree, dir.join("complete.vvol"))?;
    write_volume(&case.tree_labels, dir.join("tree_labels.vvol"))?;
    write_volume(&case.lung_mask, dir.join("lung_mask.vvol"))?;
    write_volume(&case.segment_labels, dir.join("segment_labels.vvol"))?;
    let mut breaks = None;
    if let Some((corrupted, records)) = corruption {
        if records.len() >= u8::MAX as usize {
            return Err(Error::InvalidSampling(format!("{} breaks exceed the removed-mask label range", records.len())));
        }
        let mut removed = VoxelVolume::zeros(corrupted.dims(), records.len() as u16 + 1)?;
        for (i, r) in records.iter().enumerate() {
            for &v in &r.removed {
                removed.set(v, i as u8 + 1)?;
            }
        }
        write_volume(corrupted, dir.join("corrupted.vvol"))?;
        write_volume(&removed, dir.join("removed.vvol"))?;
        breaks = Some(
            records
                .iter()
                .map(|r| ManifestBreak { record: r.clone(), removed_count: r.removed.len() })
                .collect(),
        );
    }
    let manifest = Manifest { spec: case.spec.clone(), branches: case.branches.clone(), breaks };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_case(dir: impl AsRef<Path>) -> Result<StoredCase> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let case = SyntheticCase {
        spec: manifest.spec,
        complete_tree: read_volume(dir.join("complete.vvol"))?,
        tree_labels: read_volume(dir.join("tree_labels.vvol"))?,
        lung_mask: read_volume(dir.join("lung_mask.vvol"))?,
        segment_labels: read_volume(dir.join("segment_labels.vvol"))?,
        branches: manifest.branches,
    };
    let (corrupted, records) = match manifest.breaks {
        None => (None, Vec::new()),
        Some(breaks) => {
            let corrupted = read_volume(dir.join("corrupted.vvol"))?;
            let removed = read_volume(dir.join("removed.vvol"))?;
            let mut records: Vec<BreakRecord> = breaks.into_iter().map(|b| b.record).collect();
            for i in 0..removed.len() {
                let l = removed.at(i) as usize;
                if l > 0 && l <= records.len() {
                    records[l - 1].removed.push(removed.coord(i));
                }
            }
            (Some(corrupted), records)
        }
    };
    Ok(StoredCase { case, corrupted, records })
}
