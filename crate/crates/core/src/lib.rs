//! Mechanism design for data acquisition when an agent's privacy leaks through the
//! participation of correlated agents.
//!
//! The pipeline: a [`market::MarketConfig`] and a participation profile fix virtual
//! costs ([`virtual_cost`]); [`allocation`] solves the worst-case bias-variance
//! program for the selection rule; [`payment`] attaches the truthful payment rule and
//! audits it; [`tradeoff`] evaluates the objective against the worst-case adversary;
//! [`simulate`] replays the market by Monte Carlo. [`minimax`] solves the discrete
//! version of the game and doubles as an oracle for the continuous solver.

pub mod allocation;
pub mod dist;
pub mod error;
pub mod market;
pub mod minimax;
pub mod payment;
pub mod quad;
pub mod simulate;
pub mod sweep;
pub mod tradeoff;
pub mod testkit;
pub mod virtual_cost;

pub use error::{LeakError, Result};
