//! Diagnostics relating annotation entropy to per-example learning dynamics.
//!
//! The crate covers the whole pipeline: annotator distributions and entropy
//! bins ([`annotation`]), per-example loss trajectories ([`trajectory`]), the
//! statistical battery ([`stats`]), calibration metrics ([`calibration`]), a
//! small linear trainer with low-rank, full, and scaling adapters ([`lab`]),
//! experiment protocols ([`protocols`]) and report emission ([`report`]).

pub mod annotation;
pub mod calibration;
pub mod error;
pub mod lab;
pub mod protocols;
pub mod report;
pub mod stats;
pub mod trajectory;

pub use error::{Error, Result};
