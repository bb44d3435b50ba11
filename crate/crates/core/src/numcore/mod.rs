//! Dense numeric kernel: arrays, a reverse-mode tape over the layer set used
//! by the models, activations, losses, SGD, finite-difference gradient
//! checks and the `MGTC` checkpoint format.

mod array;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod params;
pub mod tape;

pub use array::{gemm, DenseArray};
pub use checkpoint::Checkpoint;
pub use error::{NumError, NumResult};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    activation, bce_loss, cond_batch_norm, dropout, Activation, CbnParams, Mode, RunningStats,
};
pub use optim::sgd_step;
pub use params::{init_he, init_normal, ParamSet};
pub use tape::{BnStats, Gradients, Tape, Var};

/// Deterministic sub-seed derivation: mixes a base seed with a stream tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
