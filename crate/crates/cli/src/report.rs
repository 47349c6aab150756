//! Verification reports emitted by the commands.

use cascade_core::rank_dynamics::{BaseBlockSpec, LeibnizReport};
use serde::{Deserialize, Serialize};

/// Report of a `construct` or `verify` run: measured ranks per order,
/// Leibniz-bound checks, and pass/fail against the target where one exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub kind: String,
    pub n: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_q: Option<Vec<usize>>,
    /// Measured generic ranks of orders `0..k-1`.
    pub measured_ranks: Vec<usize>,
    /// Numeric ranks of `L_i(0)` per order, where meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranks_at_zero: Option<Vec<usize>>,
    pub leibniz: LeibnizReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_match: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering: Option<OrderingPart>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ode: Option<OdePart>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BaseBlockSpec>>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingPart {
    pub weights: Vec<usize>,
    pub used_fallback: bool,
    pub chain_satisfied: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdePart {
    /// `W - W' == L_1` holds coefficient-wise with exact equality.
    pub identity_exact: bool,
    /// Worst pointwise relative error of the difference sequence against its
    /// closed form across sample points and orders.
    pub closed_form_max_rel_err: f64,
}

/// Report of an `eval` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub cascade_flops: u64,
    pub naive_flops: u64,
    pub estimate_cascade: u64,
    pub estimate_naive: u64,
    /// Measured counters equal the analytic estimates.
    pub estimates_match: bool,
    /// Worst relative deviation between the cascade and dense paths.
    pub max_rel_err: f64,
    pub outputs: Vec<String>,
}

/// Report of a segment-tree query run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryReport {
    pub k: usize,
    pub n: usize,
    pub b: usize,
    pub lo: usize,
    pub hi: usize,
    pub strategy_requested: String,
    pub strategy_used: String,
    pub flops_used: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_tree_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_onthefly_flops: Option<u64>,
    pub max_rel_err: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}
