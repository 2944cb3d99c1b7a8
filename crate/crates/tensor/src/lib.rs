//! Dense tensors with a build-per-forward gradient tape and AdamW.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the `f64` instantiation used for training and
//! gradient checks.

mod embed;
mod error;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use embed::{sinusoidal_embedding, sinusoidal_grid, sinusoidal_table};
pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWHyper};
pub use params::{Bound, ParamStore};
pub use scalar::Scalar;
pub use tape::{concat_rows, Gradients, Tape, Var};
pub use tensor::{scaled_dot_attention, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Var64<'t> = Var<'t, f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type AdamW64 = AdamW<f64>;
