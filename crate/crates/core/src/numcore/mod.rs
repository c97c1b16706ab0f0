//! Dense `f64` tensors, a reverse-mode tape, and the numeric primitives the
//! model is assembled from.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_guarded, GradCheckOptions, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
