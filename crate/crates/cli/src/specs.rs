//! JSON construction specs accepted by `cascade construct`.

use cascade_core::rank_dynamics::OrderRelation;
use serde::{Deserialize, Serialize};

/// One construction request. `kind` selects the family; the remaining fields
/// are interpreted per kind and unused ones are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructionSpec {
    pub kind: ConstructionKind,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    /// Target rank sequence (rank_at_zero, generic_match).
    #[serde(default)]
    pub q: Option<Vec<usize>>,
    /// 1-based permutation (ordering).
    #[serde(default)]
    pub pi: Option<Vec<usize>>,
    /// Chain relations (ordering): "GT", "EQ", or "GE".
    #[serde(default)]
    pub relations: Option<Vec<OrderRelation>>,
    /// Rank of the decomposable construction.
    #[serde(default)]
    pub r1: Option<usize>,
    /// Scalar function degrees (decomposable); length r1.
    #[serde(default)]
    pub degrees: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Ordering only: retry with alternate strictly-valid weights when the
    /// canonical ones do not decompose into base blocks. Off by default.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionKind {
    Vandermonde,
    Decomposable,
    Ode,
    RankAtZero,
    GenericMatch,
    Ordering,
}

impl ConstructionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConstructionKind::Vandermonde => "vandermonde",
            ConstructionKind::Decomposable => "decomposable",
            ConstructionKind::Ode => "ode",
            ConstructionKind::RankAtZero => "rank_at_zero",
            ConstructionKind::GenericMatch => "generic_match",
            ConstructionKind::Ordering => "ordering",
        }
    }
}
