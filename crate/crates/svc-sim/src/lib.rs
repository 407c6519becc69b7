//! Deterministic simulator and controller library for decentralised
//! secondary voltage control (SVC) of a single-zone power grid.
//!
//! The plant is a linear sensitivity network (terminal voltages map
//! algebraically to the pilot-point voltage and per-generator reactive
//! powers) behind first-order AVR setpoint dynamics. Control is a cascade:
//! per-generator model-free reactive-power agents (inner loops) under a
//! pilot-point voltage controller (outer loop), glued together by a
//! reactive-power alignment solver that turns a pilot reference into
//! per-generator steady-state reactive references.
//!
//! Everything is fixed-step and deterministic: identical inputs produce
//! bitwise-identical outputs, including under optional parallel agent
//! evaluation.
//!
//! Module map:
//! - [`model`]: sensitivity model, participation factors, alignment solver
//! - [`estimation`]: sliding-window differentiator, ultra-local F estimate
//! - [`control`]: DTiP law, inner agents, outer controller, delay buffer
//! - [`plant`]: grid state, AVR surrogate step, disturbance/topology events
//! - [`scenario`]: event scheduling, the run loop, canned cases, metrics
//! - [`cli`]: scenario files, CSV/JSON outputs, the case runner

pub mod cli;
pub mod control;
pub mod error;
pub mod estimation;
pub mod model;
pub mod plant;
pub mod scenario;

pub use error::{Error, Result};
