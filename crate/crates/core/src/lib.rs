//! Heterogeneous federated learning over small from-scratch networks.
//!
//! Clients of different capability receive differently pruned versions of
//! the global model. Each client fine-tunes the global model for one epoch,
//! fuses it back with the global weights, prunes whole channels by L1 norm,
//! and keeps training the pruned model with a representation-norm penalty.
//! The server fills pruned positions from the previous global model and
//! averages the recovered models by sample count.

pub mod data;
pub mod error;
pub mod experiment;
pub mod hyper;
pub mod local;
pub mod masking;
pub mod mfp;
pub mod nn;
pub mod seed;
pub mod server;
pub mod tensor;

pub use data::{DomainDataset, DomainSplit, ShiftSpec, Split, SynthSpec};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Framework, MetricsRow, SweepParam};
pub use hyper::HyperParams;
pub use local::{LossBreakdown, Objective};
pub use masking::{ChannelMask, Footprint};
pub use mfp::FusionSchedule;
pub use nn::{Gradients, LayerSpec, Network, OptimizerState};
pub use server::{ClientProfile, LevelTable, LocalUpdate, RoundConfig, RoundRecord};
pub use tensor::Tensor;
