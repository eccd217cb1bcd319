//! Dense tensors, the gradient tape, Adam, and seeded randomness.

pub mod adam;
pub mod gradcheck;
pub mod par;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, ParamCheck};
pub use par::Exec;
pub use params::{Init, ParamId, ParamStore};
pub use rng::{gaussian_draw, Purpose, RandomSource, StreamRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
