// SPDX-License-Identifier: Apache-2.0

//! Scheduler engine and discrete-event cluster simulator for spatio-temporal
//! GPU sharing of serverless inference functions.
//!
//! A GPU is modelled as a `quota x SM` rectangle. Pods receive sub-rectangles
//! (an SM partition held for a fraction of every time window), are autoscaled
//! from profiled throughput, and run under a per-window token scheduler that
//! caps the summed SM partition of concurrently running pods at 100%.
//!
//! Module map:
//! - [`profiles`]: throughput/latency per `(sm_partition, quota)` point.
//! - [`resource`]: the per-pod resource configuration.
//! - [`token_backend`]: per-GPU multi-token time-slice scheduler.
//! - [`autoscaler`]: RPS-gap driven scale-up/scale-down.
//! - [`packer`]: maximal-rectangles node selection.
//! - [`memory_model`]: GPU memory accounting with and without model sharing.
//! - [`sim`]: deterministic cluster simulator and metrics.

pub mod autoscaler;
pub mod ids;
pub mod memory_model;
pub mod packer;
pub mod profiles;
pub mod resource;
pub mod sim;
pub mod token_backend;

pub use ids::{FunctionId, PodId};
