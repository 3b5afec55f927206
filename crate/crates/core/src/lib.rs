//! Energy-aware serving simulator for prefill/decode-disaggregated LLM inference.
//!
//! The crate is organized bottom-up:
//!
//! - [`workload`]: request traces, arrival generators, windowing and
//!   burstiness analysis.
//! - [`perfmodel`]: gridded latency/power/idle-power models with multilinear
//!   interpolation, plus closed-form synthetic generators.
//! - [`simulator`]: deterministic iteration-level simulation of prefill and
//!   decode instances and of a routed cluster, with energy accounting.
//! - [`placement`]: goodput search, configuration-table construction and the
//!   exact integer program that picks instance counts and frequencies.
//! - [`dvfs`]: per-iteration frequency control (greedy MPC for prefill,
//!   minimum-feasible-frequency policy for decode).
//! - [`metrics`]: steady-state trimming, percentile latency metrics and
//!   normalized energy reports.
//! - [`experiment`]: windowed end-to-end runs of the baseline and two-tier
//!   policies, used by the `pdsim` binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod dvfs;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod perfmodel;
pub mod placement;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};
pub use perfmodel::{BatchFeatures, FrequencyLadder, ModelSet, Phase};
pub use simulator::{InstanceConfig, SchedulerPolicy, SimOptions, SimResult};
pub use workload::{Request, Trace};
