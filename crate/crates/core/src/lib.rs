//! Self-conditioned CTC.
//!
//! A Transformer-encoder CTC recognizer in which posteriors predicted at
//! selected intermediate layers are projected back into the residual stream
//! of the next layer, with every such prediction also trained by its own CTC
//! loss. Plain CTC and intermediate-loss-only training are available as
//! baselines through [`model::Mode`].
//!
//! The crate is `no_std` (it needs `alloc`). The `std` feature, on by
//! default, only turns on runtime CPU feature detection for matrix products.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ctc;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Init, Tensor};
