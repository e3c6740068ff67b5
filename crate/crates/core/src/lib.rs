//! Deterministic simulator and analysis toolkit for masked (sub-model)
//! federated averaging.
//!
//! The crate implements two sub-model training schemes on top of FedAvg:
//!
//! * **random masking**: every round each client trains the coordinates
//!   selected by a fresh Bernoulli(`p_i`) mask
//!   ([`trainer::run_random_masked_fedavg`]);
//! * **rolling masking**: the model is split into `R` cyclic windows that are
//!   shuffled every epoch and trained one per round
//!   ([`trainer::run_rolling_masked_fedavg`]).
//!
//! Both are paired with exact oracles for the objectives they actually
//! minimize ([`oracle::MaskedObjective`]): the expectation over Bernoulli
//! masks `F_p` and the finite window average `F_m`, their optima,
//! heterogeneity constants and the bound translating stationarity of the
//! masked objective into stationarity of the original one. The
//! [`stability`] module measures on-average stability with seed-coupled runs
//! on neighbouring datasets and [`cli`] drives config-file experiments with
//! CSV output.
//!
//! Every random choice flows from a master seed through [`rng::Stream`], so
//! runs are bitwise reproducible.

pub mod cli;
pub mod data;
pub mod error;
pub mod masking;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod stability;
pub mod trainer;

pub use data::{
    estimate_constants, gen_clients, gradient, loss, stochastic_gradient, ClientDataset,
    ClientGenerator, ConstantsReport, GenOptions, Objective, ObjectiveKind, ObjectiveSpec, Sample,
};
pub use error::{Error, Result};
pub use masking::{
    build_rolling_masks, sample_bernoulli_masks, shuffle_permutation, MaskPlan, Permutation,
};
pub use oracle::{DissimilarityReport, EvalMode, MaskedObjective};
pub use params::{apply_mask, project_l2, server_average, DomainBall, Mask, ParamVector};
pub use rng::Stream;
pub use trainer::{
    output_step, run_random_masked_fedavg, run_rolling_masked_fedavg, MetricsRecord, StepSize,
    TrainConfig, TrainResult,
};
