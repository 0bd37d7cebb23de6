//! Dense `f64` tensors, a reverse-mode tape, sampling kernels, seeded
//! randomness, checkpoints and the optimizer.

mod checkpoint;
pub mod gradcheck;
mod ops;
mod optim;
mod param;
mod rng;
pub(crate) mod sampling;
mod tape;
mod tensor;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, restore_into, save_checkpoint,
    write_checkpoint, CHECKPOINT_MAGIC,
};
pub use ops::{concat_cols, concat_rows, linear, MIN_DEPTH};
pub use optim::AdamW;
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
