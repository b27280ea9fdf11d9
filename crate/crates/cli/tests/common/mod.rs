#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use treefield_core::{generate_case, save_case, write_volume, TreeSpec};
use treefield_pipeline::corrupt_case;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treefield"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("oracle")
}

pub fn fixture_spec() -> TreeSpec {
    TreeSpec {
        dims: [32, 32, 32],
        depth: 1,
        children_per_node: 2,
        trunk_radius: 2.0,
        radius_decay: 0.75,
        branch_length_range: (10.0, 13.0),
        class_count: 4,
        segment_count: 3,
        ..TreeSpec::desk()
    }
    .with_seed(3)
}

/// A corrupted 32³ case under `root/case` and its perfect prediction under `root/pred`.
pub fn write_fixture(root: &Path) {
    let case = corrupt_case(generate_case(&fixture_spec()).unwrap(), (2, 2), 6, 3).unwrap();
    assert_eq!(case.records.len(), 2);
    save_case(root.join("case"), &case.synthetic, Some((&case.corrupted, &case.records))).unwrap();
    let pred = root.join("pred");
    fs::create_dir_all(&pred).unwrap();
    let s = &case.synthetic;
    write_volume(&s.complete_tree.difference(&case.corrupted).unwrap(), pred.join("repair_mask.vvol")).unwrap();
    write_volume(&s.tree_labels, pred.join("labeled_tree.vvol")).unwrap();
    write_volume(&s.segment_labels, pred.join("segments.vvol")).unwrap();
}

pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

pub fn read_metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

