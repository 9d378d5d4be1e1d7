//! Dense arithmetic, reverse-mode differentiation and a finite-difference oracle.

mod functional;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use functional::{dot, layer_norm, norm, softmax, softmax_axis};
pub(crate) use functional::softmax_in_place;
pub use gradcheck::{grad_check, relative_error, Differentiable, FnObjective, GradCheckConfig, GradCheckReport, GradEntry};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub(crate) use tape::{gelu, top_k_indices};
pub use tape::{Tape, Var};
pub use tensor::{Precision, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single seeded generator every stochastic operation draws from.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
