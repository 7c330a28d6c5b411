//! Dense tensors, reverse-mode differentiation, AdamW and seeded randomness.

pub mod adamw;
pub mod finite_diff;
pub mod mlp;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use mlp::{BoundMlp, Linear, Mlp, MlpTrace};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// LeakyReLU negative slope used unless a configuration overrides it.
pub const DEFAULT_SLOPE: f64 = 0.2;
