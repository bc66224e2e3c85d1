//! City-conditioned memory layers for multi-city spatio-temporal forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! * [`citycond`]: the city embedding, shared memory bank and gated fusion.
//! * [`backbones`]: GRU, TCN, Transformer, GNN, STGCN-lite and an LSTM
//!   trajectory encoder-decoder, each with a CityCond insertion point.
//! * [`data`]: CSV ingestion, z-scoring, windowing and synthetic generators.
//! * [`engine`]: Adam, training with early stopping, regimes and metrics.
//! * [`report`]: seed aggregation, table rendering and attention summaries.

pub mod autodiff;
pub mod backbones;
pub mod citycond;
pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod params;
pub mod report;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use backbones::{Adjacency, BackboneKind, BackboneSpec, Forecast, Model, TaskShape};
pub use citycond::{CityCondConfig, CityCondLayer, Pooling, Variant};
pub use error::{Error, ErrorCategory, Result};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
