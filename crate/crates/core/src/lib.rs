//! Simulation and inference for over-the-air sensing with on-off keyed
//! sensors and a multi-antenna receiver.

pub mod distributions;
pub mod em_uniform;
pub mod error;
pub mod gem_hetero;
pub mod harness;
pub mod posterior;
pub mod quadrature;
pub mod selftest;
pub mod simulator;
pub mod trace;
pub mod vi_noisy;

pub use distributions::{ActiveCountPmf, SensingPrior, ThetaVector};
pub use em_uniform::{Criterion, EmConfig, EmResult, UniformParams};
pub use error::{Error, Result};
pub use gem_hetero::{GemConfig, HeteroParams, HeteroResult};
pub use harness::{Algorithm, ExperimentConfig, ResultRow};
pub use posterior::PosteriorT;
pub use simulator::{ChannelConfig, FieldRealization, ObservationSet};
pub use trace::{EmTrace, IterationRecord, StopReason};
pub use vi_noisy::{NoisyParams, ThetaGrid, VariationalState, ViConfig, ViResult};
