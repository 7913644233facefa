//! Power-law decay loss (PDL): cross-entropy in which each target token is
//! weighted by `w(t) = 1 / (freq(t) + ε)^α`, so frequent tokens count less and
//! rare tokens more.
//!
//! The crate covers the whole pipeline:
//!
//! * [`corpus`]: tokenization, vocabularies, and a seeded Zipf–Mandelbrot
//!   corpus generator with planted rare-token bigram rules.
//! * [`stats`]: frequency tables, self-information and rank-frequency fits.
//! * [`weights`] and [`loss`]: the weight table and the weighted loss with its
//!   analytic gradient; plain cross-entropy is the unit-weight case.
//! * [`model`] and [`train`]: a fixed-window feedforward LM trained with SGD.
//! * [`eval`]: per-frequency-bucket metrics, rule recall, distinct-n and
//!   CE-vs-PDL comparison reports.
//! * [`cli`]: the `pdl` command-line tool.

pub mod cli;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod stats;
pub mod train;
pub mod weights;

pub use error::{Error, Result};

pub const TOOL: &str = concat!("pdl/", env!("CARGO_PKG_VERSION"));

/// Identifies the tool version and effective configuration behind an output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub tool: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl Provenance {
    /// Fields appended to `#...` header lines.
    pub fn header_fields(&self) -> String {
        format!("tool={} config_hash={}", self.tool, self.config_hash)
    }
}
