//! Coarse-solver + learned-lift surrogates for time-dependent periodic PDEs.
//!
//! A super-resolution operator is first trained to map coarse-grid snapshots
//! to their fine-grid counterparts, then fine-tuned inside the composition
//! `lift ∘ coarse_step ∘ decimate`, which serves as a fine-grid one-step
//! propagator for long forecasts.

pub mod artifact;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod models;
pub mod solvers;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use dataset::{GenConfig, PairedDataset, Split, Trajectory};
pub use error::{Error, Result};
pub use eval::{FrameMetrics, ForecastRun, MetricsRecord, Propagator};
pub use grid::{Field2D, Spectrum2D, WavenumberGrid};
pub use models::{Fno, FnoConfig, ModelKind};
pub use solvers::{Pde, PdeParams, Stepper};
pub use tensor::{ParamStore, Tape, Tensor, Var};
pub use training::{Phase, TrainConfig, TrainReport};
pub use transfer::{TransferMode, TransferSpec};
