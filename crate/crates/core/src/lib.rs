//! Multi-scale differentiable architecture search for multivariate time
//! series forecasting.
//!
//! The crate is `no_std` and needs only `alloc`. It contains a small
//! reverse-mode autodiff engine ([`tensor`]), the data pipeline ([`data`]),
//! the model components ([`decomposition`], [`graph`], [`search`],
//! [`model`]) and the two training stages ([`train`]).

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod search;
pub mod tensor;
pub mod train;

pub use config::{Ablation, GraphMode, TrainConfig};
pub use data::{MtsDataset, RawSeries, Split};
pub use error::{Error, Result};
pub use model::{Model, ModelDims};
pub use params::{ParamKind, ParamStore};
pub use search::{DiscreteArchitecture, OpKind};
pub use tensor::{Tape, Tensor, Var};
