//! Tri-plane implicit field over tubular trees: point-voxel encoders,
//! surface-to-skeleton attention and its fusion variants, a shared 2D U-Net
//! and three implicit heads, all differentiated by a small tape engine.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod input;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use error::{FieldError, Result};
pub use gradcheck::{check_gradients, toy_input, GroupError};
pub use graph::{bce_dice_from_logits, cross_entropy_from_logits, Grads, Graph, Var};
pub use input::{positional_encoding, inverse_distance_weights, BranchInput, FieldInput, QueryInput};
pub use model::{
    distance_weighted_fuse, encode_points, head_logits, head_probabilities, parameter_layout, plane_rows,
    sample_query_embedding, ssa_fuse, triplane_project, unet2d, Bound, FusionMode, Head, Hyper, Model, TriPlaneField,
};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{ConvRules, SparseMap, Tensor};
