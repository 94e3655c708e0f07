//! Desk-scale laboratory for model extraction (MEA) and attribute inference
//! (AIA) attacks against black-box text-classification APIs, plus the
//! output-side defenses (temperature softening, Gaussian perturbation) that
//! a prediction service can apply.
//!
//! The crate is organised along the attack pipeline:
//!
//! - [`corpus`]: documents, JSONL loading, the aux/victim/query partition and
//!   a synthetic generator with controllable label and attribute signal.
//! - [`modeling`]: hashed n-gram features, a small tanh encoder shared by
//!   victim and attacker, the distillation trainer and the representation tap.
//! - [`victim_api`]: the prediction service, defenses and per-client budgets,
//!   reachable in-process or over HTTP.
//! - [`mea`]: query sampling, transfer-set construction and extraction.
//! - [`aia`]: representation harvesting, inference models, empirical privacy.
//! - [`metrics`]: posterior sharpness, attribute spread, rank correlation.
//! - [`experiment`]: declarative experiment configs and CSV reports.

pub mod aia;
pub mod corpus;
mod error;
pub mod experiment;
pub mod hashing;
pub mod mea;
pub mod metrics;
pub mod modeling;
pub mod par;
pub mod victim_api;

pub use error::{Error, Result};
