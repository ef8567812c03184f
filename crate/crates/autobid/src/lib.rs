//! Deterministic auction-market simulator and mechanism toolkit for
//! ROI-constrained auto-bidding.
//!
//! The crate models an advertiser who hands a high-level constraint (a CPA cap
//! or an ROI floor) to an advertising platform, whose proxy bidder then fights
//! a generalized second-price position auction on her behalf. On top of that
//! market it provides:
//!
//! * [`market`] — requests, slots, the GSP engine, and delivery accounting;
//! * [`scenario`] — seeded scenario generation and explicit fixtures;
//! * [`bidding`] — the four-formula optimal bid family and bid estimation;
//! * [`mechanism`] — aggregated delivery mechanisms (promised CPA and
//!   conversions as functions of the report), calibration of what a market can
//!   actually deliver, and grid-level truthfulness verification;
//! * [`control`] — the episode controller that steers delivery onto a
//!   mechanism's promise (egality planning, constrained per-request bids, PID
//!   pacing);
//! * [`audit`] — misreport sweeps certifying incentive compatibility and
//!   individual rationality, plus bundled counterexamples;
//! * [`runner`] — the experiment runner behind the `autobid` binary.
//!
//! Everything is deterministic: all randomness flows from a single root seed
//! through named sub-streams, and identical runs produce byte-identical
//! artifacts.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --example gsp_auction
//! cargo run --example bid_formulas
//! cargo run --example calibrate_mechanism
//! cargo run --example controlled_episode
//! cargo run --example audit_mechanism
//! cargo run --example submarket_pricing
//! cargo run --example overbid_counterexample
//! ```

pub mod audit;
pub mod bidding;
pub mod config;
pub mod control;
pub mod curve;
pub mod error;
pub mod market;
pub mod mechanism;
pub mod rng;
pub mod runner;
pub mod scenario;

pub use error::{Error, Result};
