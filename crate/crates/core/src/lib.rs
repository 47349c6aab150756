//! Cascading low-rank evaluation and derivative rank dynamics.
//!
//! The crate has three layers:
//!
//! - [`matfun`]: exp-polynomial matrix functions (`E e^t + sum C_j t^j`),
//!   their calculus, and numeric/generic rank estimation.
//! - [`rank_dynamics`]: constructions realizing prescribed rank behavior of
//!   the difference sequence `L_i = W^{(i-1)} - W^{(i)}` (monotone decay,
//!   strict growth, arbitrary ranks at `t = 0`, arbitrary generic rank
//!   sequences and orderings), plus the Leibniz-bound checks.
//! - [`cascade`], [`segtree_matrix`], [`segtree_tensor`]: batched evaluation
//!   of a base weight with cascading low-rank adapters, and segment trees
//!   over adapter indices answering exact range queries with cost-model
//!   routing between a precomputed-node path and on-the-fly accumulation.
//!
//! All operations on built values are pure and the structures are immutable
//! after construction, so concurrent use requires no synchronization.

pub mod cascade;
pub mod error;
pub mod flops;
pub mod io;
pub mod matfun;
pub mod rank_dynamics;
pub mod seeding;
pub mod segtree_matrix;
pub mod segtree_tensor;

pub use error::{CoreError, Result};
pub use matfun::{
    default_rank_tolerance, generic_rank, l_sequence, numeric_rank, poly_outer_product,
    rank_profile, ExpPolyMatrix, SampleSpec, DEFAULT_SAMPLE_SEED,
};
