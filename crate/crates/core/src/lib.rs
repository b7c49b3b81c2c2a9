//! Low-rank attention side-tuning.
//!
//! A frozen Vision Transformer is run forward-only as a feature extractor;
//! its intermediate token maps ("taps") feed a small trainable side network
//! built from low-rank self-attention modules. Because nothing flows back
//! into the backbone, taps can be extracted once into a [`cache`] and many
//! side networks trained against them in parallel ([`train::sweep`]).
//! [`memory`] accounts for the training-memory consequences analytically
//! and is checked against the instrumented autograd tape.

pub mod autograd;
pub mod backbone;
pub mod cache;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod param;
pub mod plot;
pub mod side;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{Graph, RetainedStats, Var};
pub use backbone::{Backbone, BackboneConfig, TapSchedule, ViTWeights};
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use side::{SideConfig, SideNetwork};
pub use tensor::Tensor;
