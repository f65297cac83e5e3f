//! Dense double-precision tensors and a tape-based reverse-mode engine.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_pairs, relative_error};
pub use optim::{clip_global_norm, Adam};
pub use params::{glorot, uniform, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{matmul, sigmoid, softmax_in_place};

#[cfg(test)]
mod tests;
