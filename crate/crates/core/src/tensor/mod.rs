//! Dense tensors, reverse-mode differentiation, parameters, checkpoints and
//! seeded randomness.

mod checkpoint;
mod dense;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod scalar;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_into, read as read_checkpoint,
    save as save_checkpoint, Entry as CheckpointEntry,
};
pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, finite_diff_check_reads, GradCheckReport};
pub use graph::{attention_mask, Graph, Reads, Var, MASK_VALUE};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
