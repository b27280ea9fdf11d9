//! Voxel topology kernels, procedural tubular trees, skeleton-guided
//! disconnection and the repair metrics used to score reconstructions.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pointcloud;
pub mod sampling;
pub mod skeleton;
pub mod synth;
pub mod topobreak;
pub mod voxel;

pub use dataset::{load_case, save_case, StoredCase};
pub use error::{Error, Result};
pub use metrics::{
    containment_f1, dice_matching_f1, global_dice, gt_components, micro_dice, ncc_repaired, weak_supervision_accuracy,
    ComponentSet, DetectionScore, MetricsReport, MicroDice,
};
pub use pointcloud::{
    extract_skeleton_points, extract_surface_points, knn_indices, make_normalizer, super_point_descriptor, Neighbors,
    Normalizer, PointKind, PointSet,
};
pub use sampling::{
    make_weak_sample, sample_label_queries, sample_repair_queries, sample_segment_queries, Provenance, QueryBatch, Task,
    WeakSample,
};
pub use skeleton::{build_skeleton_graph, thin_3d, Branch, Node, NodeKind, SkeletonGraph};
pub use synth::{generate_case, generate_split, SyntheticCase, TreeBranch, TreeSpec};
pub use topobreak::{apply_break, corrupt, select_breakable_branches, BreakParams, BreakRecord};
pub use voxel::{
    boundary_voxels, connected_components, count_components, decode_volume, dilate_ball, distance_transform,
    encode_volume, read_volume, write_volume, Connectivity, DistanceField, Voxel, VoxelVolume,
};
