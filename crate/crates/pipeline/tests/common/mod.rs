#![allow(dead_code)]

use treefield_core::TreeSpec;
use treefield_field::Hyper;
use treefield_pipeline::{build_cases, Case, TrainConfig};

/// 32³ trees whose class counts fit the toy heads.
pub fn small_spec() -> TreeSpec {
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
}

pub fn small_cases(n: usize, seed: u64) -> Vec<Case> {
    build_cases(&small_spec(), n, seed, (1, 2), 6).unwrap()
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-3,
        n_s: 160,
        n_k: 40,
        q_r: 40,
        q_l: 30,
        q_s: 30,
        min_nodes: 6,
        ..TrainConfig::desk()
    }
}

pub fn toy() -> Hyper {
    Hyper::toy()
}
