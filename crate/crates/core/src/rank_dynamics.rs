//! Constructions realizing prescribed rank behavior of the derivative
//! difference sequence `L_i = W^{(i-1)} - W^{(i)}`, plus the bound checks
//! that every constructed instance must satisfy.
//!
//! Rank profiles of the base blocks are always *measured* through
//! [`generic_rank`] sampling, never hardcoded: the decomposition search and
//! all verification reports operate on measured values only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matfun::{
    generic_rank, numeric_rank, poly_outer_product, rank_profile, ExpPolyMatrix, SampleSpec,
};
use crate::seeding::{derive_seed, rng_from_seed};

/// A target or measured rank sequence `q(1..k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSequence(pub Vec<usize>);

impl RankSequence {
    pub fn new(values: Vec<usize>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    /// `q(i)` with the 1-based indexing used throughout.
    pub fn at(&self, i: usize) -> usize {
        self.0[i - 1]
    }

    /// True when `q(j) <= (j - i + 1) q(i)` for all `i < j` (the cumulative
    /// Leibniz feasibility condition).
    pub fn leibniz_feasible(&self) -> bool {
        self.first_leibniz_violation().is_none()
    }

    /// True under the strict form `q(j) < (j - i + 1) q(i)`.
    pub fn strictly_leibniz_feasible(&self) -> bool {
        let q = &self.0;
        for i in 0..q.len() {
            for j in (i + 1)..q.len() {
                if q[j] >= (j - i + 1) * q[i] {
                    return false;
                }
            }
        }
        true
    }

    fn first_leibniz_violation(&self) -> Option<(usize, usize, usize)> {
        let q = &self.0;
        for j in 0..q.len() {
            for i in 0..j {
                let bound = (j - i + 1) * q[i];
                if q[j] > bound {
                    return Some((j + 1, q[j], bound));
                }
            }
        }
        None
    }
}

/// Measured generic ranks of `f` and its first `k - 1` derivatives under the
/// default sampling spec.
pub fn measured_profile(f: &ExpPolyMatrix, k: usize) -> RankSequence {
    let spec = SampleSpec::default_for(f);
    RankSequence(rank_profile(f, k, &spec))
}

/// Numeric rank of `f(0)`, the separate stationary-point query.
pub fn numeric_rank_at_zero(f: &ExpPolyMatrix, tolerance: f64) -> usize {
    numeric_rank(&f.evaluate(0.0), tolerance)
}

/// Coefficient list of `u_m(t) = [1, t, ..., t^{m-1}]^T`.
pub fn monomial_coeffs(m: usize) -> Vec<DVector<f64>> {
    (0..m)
        .map(|a| {
            let mut v = DVector::zeros(m);
            v[a] = 1.0;
            v
        })
        .collect()
}

// ---------------------------------------------------------------------------
// linearly decomposable construction (monotone decay)
// ---------------------------------------------------------------------------

/// Specification of a linearly decomposable `L_1(t) = sum_j f_j(t) u_j v_j^T`
/// with constant vectors and scalar polynomials of prescribed degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposableSpec {
    pub n: usize,
    pub r1: usize,
    /// Degree of each `f_j`; must have length `r1`.
    pub func_degrees: Vec<usize>,
    pub seed: u64,
}

const INDEPENDENCE_ATTEMPTS: usize = 10;

/// Builds `L_1 = sum_{j=1}^{r1} f_j(t) u_j v_j^T` with Gaussian `u_j`, `v_j`
/// verified linearly independent (numeric rank of the stacked matrix equals
/// `r1`, resampling up to 10 times) and random `f_j` with a bounded-away
/// leading coefficient.
///
/// Successive derivatives of such an `L_1` have non-increasing generic rank:
/// the rank of `L_i` equals the number of `f_j` with degree at least `i - 1`.
pub fn construct_decomposable(spec: &DecomposableSpec) -> Result<ExpPolyMatrix> {
    if spec.r1 > spec.n {
        return Err(CoreError::InvalidArgument(format!(
            "r1 = {} exceeds n = {}",
            spec.r1, spec.n
        )));
    }
    if spec.func_degrees.len() != spec.r1 {
        return Err(CoreError::InvalidArgument(format!(
            "func_degrees has length {}, expected r1 = {}",
            spec.func_degrees.len(),
            spec.r1
        )));
    }
    if spec.r1 == 0 {
        return Ok(ExpPolyMatrix::zero(spec.n, spec.n));
    }
    let tol = crate::matfun::default_rank_tolerance(spec.n, spec.r1);
    let mut attempt = 0;
    let (us, vs) = loop {
        let mut rng = rng_from_seed(derive_seed(spec.seed, attempt as u64));
        let us: Vec<DVector<f64>> = (0..spec.r1)
            .map(|_| DVector::from_fn(spec.n, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let vs: Vec<DVector<f64>> = (0..spec.r1)
            .map(|_| DVector::from_fn(spec.n, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let stack_u = DMatrix::from_fn(spec.n, spec.r1, |i, j| us[j][i]);
        let stack_v = DMatrix::from_fn(spec.n, spec.r1, |i, j| vs[j][i]);
        if numeric_rank(&stack_u, tol) == spec.r1 && numeric_rank(&stack_v, tol) == spec.r1 {
            break (us, vs);
        }
        attempt += 1;
        if attempt >= INDEPENDENCE_ATTEMPTS {
            return Err(CoreError::IndependenceFailure {
                attempts: INDEPENDENCE_ATTEMPTS,
            });
        }
    };

    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x0f));
    let deg_max = spec.func_degrees.iter().copied().max().unwrap_or(0);
    let mut poly = vec![DMatrix::zeros(spec.n, spec.n); deg_max + 1];
    for (&deg, (u, v)) in spec.func_degrees.iter().zip(us.iter().zip(vs.iter())) {
        let outer = u * v.transpose();
        for (p, coeff) in poly.iter_mut().enumerate().take(deg + 1) {
            let mut c: f64 = rng.sample::<f64, _>(StandardNormal);
            if p == deg {
                // leading coefficient bounded away from zero, so each f_j
                // keeps exactly the requested degree
                while c.abs() < 0.1 {
                    c = rng.sample::<f64, _>(StandardNormal);
                }
            }
            *coeff += &outer * c;
        }
    }
    ExpPolyMatrix::from_poly(poly)
}

// ---------------------------------------------------------------------------
// Vandermonde counterexample (strict growth)
// ---------------------------------------------------------------------------

/// `L_1(t) = u(t) u(t)^T` with `u(t) = [1, t, ..., t^{n-1}]^T`.
///
/// The `(i-1)`-th derivative has generic rank exactly `i` for `i <= k <= n`,
/// so the measured rank sequence is strictly increasing.
pub fn construct_vandermonde_counterexample(n: usize, k: usize) -> Result<ExpPolyMatrix> {
    if n == 0 {
        return Err(CoreError::InvalidArgument("n must be positive".into()));
    }
    if n < k {
        return Err(CoreError::InvalidArgument(format!(
            "need n >= k for the strict-growth construction, got n = {n}, k = {k}"
        )));
    }
    let u = monomial_coeffs(n);
    poly_outer_product(&u, &u)
}

// ---------------------------------------------------------------------------
// ODE constructions
// ---------------------------------------------------------------------------

/// Solves `W - W' = L_1` for a polynomial `L_1`: the homogeneous part is
/// `e^t C` and the particular part is the operator series
/// `(1 - D)^{-1} L_1 = sum_j L_1^{(j)}`, finite on polynomials. The series is
/// accumulated Horner-style (`P_d = L_d`, `P_p = L_p + (p+1) P_{p+1}`), which
/// is the same sum with fewer roundings.
pub fn solve_first_order_ode(l1: &ExpPolyMatrix, c: &DMatrix<f64>) -> Result<ExpPolyMatrix> {
    if l1.has_exp_part() {
        return Err(CoreError::InvalidArgument(
            "solve_first_order_ode needs a polynomial-only L1 (zero exp part)".into(),
        ));
    }
    if c.shape() != (l1.rows(), l1.cols()) {
        return Err(CoreError::DimensionMismatch(format!(
            "C has shape {:?}, L1 is {}x{}",
            c.shape(),
            l1.rows(),
            l1.cols()
        )));
    }
    let coeffs = l1.poly_coeffs();
    let mut particular: Vec<DMatrix<f64>> =
        vec![DMatrix::zeros(l1.rows(), l1.cols()); coeffs.len()];
    for p in (0..coeffs.len()).rev() {
        let mut w = coeffs[p].clone();
        if p + 1 < coeffs.len() {
            w += &particular[p + 1] * (p + 1) as f64;
        }
        particular[p] = w;
    }
    ExpPolyMatrix::from_parts(Some(c.clone()), particular)
}

/// `W(t) = e^t C + t^k u v^T`, the high-order ODE construction.
pub fn construct_highorder_ode(
    n: usize,
    k: usize,
    c: &DMatrix<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<ExpPolyMatrix> {
    if k == 0 {
        return Err(CoreError::InvalidArgument("need k >= 1".into()));
    }
    if c.shape() != (n, n) || u.len() != n || v.len() != n {
        return Err(CoreError::DimensionMismatch(format!(
            "expected C {n}x{n} and u, v of length {n}"
        )));
    }
    let mut poly = vec![DMatrix::zeros(n, n); k + 1];
    poly[k] = u * v.transpose();
    ExpPolyMatrix::from_parts(Some(c.clone()), poly)
}

/// Closed form of the difference sequence for the high-order construction:
/// `L_i(t) = k!/(k-i+1)! * t^{k-i} (t - k + i - 1) u v^T` for `i in [k]`.
pub fn highorder_l_closed_form(
    k: usize,
    i: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<ExpPolyMatrix> {
    if i == 0 || i > k {
        return Err(CoreError::InvalidArgument(format!(
            "need 1 <= i <= k, got i = {i}, k = {k}"
        )));
    }
    // falling factorial k (k-1) ... (k-i+2); exact small-integer arithmetic
    let coef: f64 = ((k - i + 2)..=k).product::<usize>() as f64;
    let outer = u * v.transpose();
    let mut poly = vec![DMatrix::zeros(u.len(), v.len()); k - i + 2];
    poly[k - i + 1] = &outer * coef;
    poly[k - i] = &outer * (-coef * (k - i + 1) as f64);
    ExpPolyMatrix::from_poly(poly)
}

// ---------------------------------------------------------------------------
// rank matching at t = 0
// ---------------------------------------------------------------------------

/// Dense `n x n` matrix of numeric rank exactly `r`: the product of `n x r`
/// and `r x n` standard Gaussian factors (zero matrix for `r = 0`).
pub fn random_matrix_of_rank(n: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    if r > n {
        return Err(CoreError::InvalidArgument(format!(
            "rank r = {r} exceeds dimension n = {n}"
        )));
    }
    if r == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut rng = rng_from_seed(seed);
    let a = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(r, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(a * b)
}

/// `L_1(t) = sum_{j=1}^k t^{j-1}/(j-1)! C_j` with `rank(C_j) = q(j)`, so that
/// `L_i(0) = C_i` and the rank evaluated at zero matches `q` exactly.
///
/// The `C_j` are drawn from [`random_matrix_of_rank`] with stream seeds
/// `derive_seed(seed, j)`, so callers can regenerate them.
pub fn construct_rank_at_zero(n: usize, q: &RankSequence, seed: u64) -> Result<ExpPolyMatrix> {
    if q.is_empty() {
        return Err(CoreError::InvalidArgument("empty target sequence".into()));
    }
    if let Some(&bad) = q.values().iter().find(|&&v| v > n) {
        return Err(CoreError::InvalidArgument(format!(
            "target rank {bad} exceeds n = {n}"
        )));
    }
    let mut poly = Vec::with_capacity(q.len());
    let mut factorial = 1.0f64;
    for (idx, &rank) in q.values().iter().enumerate() {
        let j = idx + 1;
        if j > 1 {
            factorial *= (j - 1) as f64;
        }
        let c = random_matrix_of_rank(n, rank, derive_seed(seed, j as u64))?;
        poly.push(c / factorial);
    }
    ExpPolyMatrix::from_poly(poly)
}

// ---------------------------------------------------------------------------
// base blocks and rank-sequence decomposition
// ---------------------------------------------------------------------------

/// Parameters of a base block `B_{m,d}`: the `d`-th antiderivative (zero
/// constants) of `u_m(t) u_m(t)^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseBlockSpec {
    pub m: usize,
    pub d: usize,
}

/// The `m x m` exp-free polynomial block `B_{m,d}`.
pub fn base_block(spec: &BaseBlockSpec) -> Result<ExpPolyMatrix> {
    if spec.m == 0 {
        return Err(CoreError::InvalidArgument("base block needs m >= 1".into()));
    }
    let u = monomial_coeffs(spec.m);
    Ok(poly_outer_product(&u, &u)?.antiderivative_n(spec.d))
}

/// Measured generic ranks of derivative orders `0..k-1` of `B_{m,d}`.
pub fn block_profile(spec: &BaseBlockSpec, k: usize) -> Result<RankSequence> {
    let b = base_block(spec)?;
    Ok(measured_profile(&b, k))
}

/// Profiles are deterministic for fixed (m, d, k) under the default sampling
/// spec, so the search memoizes them per process. Still measured, once.
fn cached_block_profile(spec: &BaseBlockSpec, k: usize) -> Result<Vec<usize>> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    type ProfileCache = Mutex<HashMap<(usize, usize, usize), Vec<usize>>>;
    static CACHE: OnceLock<ProfileCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache
        .lock()
        .expect("profile cache")
        .get(&(spec.m, spec.d, k))
    {
        return Ok(hit.clone());
    }
    let profile = block_profile(spec, k)?.0;
    cache
        .lock()
        .expect("profile cache")
        .insert((spec.m, spec.d, k), profile.clone());
    Ok(profile)
}

/// Search limits for [`decompose_rank_sequence`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_m: usize,
    pub max_d: usize,
    pub max_blocks: usize,
}

impl SearchBudget {
    /// Default limits for a length-`k` target: `m <= k + 1`, `d <= k`, and a
    /// block count that accommodates every sequence seen in practice.
    pub fn default_for(k: usize) -> Self {
        Self {
            max_m: k + 1,
            max_d: k,
            max_blocks: 4 * k + 8,
        }
    }
}

/// Finds a multiset of base blocks whose measured profiles sum to `q`
/// elementwise.
///
/// The candidate set is every distinct measured profile of `B_{m,d}` within
/// the budget; the search is depth-first, largest profile first
/// (lexicographically), with component-wise fit pruning and backtracking.
/// Fully deterministic. Failure is a first-class outcome
/// ([`CoreError::SearchExhausted`]), never a silent fallback: the base-block
/// family cannot represent every Leibniz-feasible sequence.
pub fn decompose_rank_sequence(
    q: &RankSequence,
    budget: &SearchBudget,
) -> Result<Vec<BaseBlockSpec>> {
    if let Some((index, value, bound)) = q.first_leibniz_violation() {
        return Err(CoreError::LeibnizViolation {
            index,
            value,
            bound,
        });
    }
    let k = q.len();
    if q.values().iter().all(|&v| v == 0) {
        return Ok(Vec::new());
    }

    // distinct measured profiles, keeping the smallest (m, d) representative
    let mut candidates: Vec<(BaseBlockSpec, Vec<usize>)> = Vec::new();
    for m in 1..=budget.max_m {
        for d in 0..=budget.max_d {
            let spec = BaseBlockSpec { m, d };
            let profile = cached_block_profile(&spec, k)?;
            if profile.iter().all(|&v| v == 0) {
                continue;
            }
            if !candidates.iter().any(|(_, p)| *p == profile) {
                candidates.push((spec, profile));
            }
        }
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1));

    let mut chosen = Vec::new();
    let deficit: Vec<usize> = q.values().to_vec();
    if search(&candidates, &deficit, 0, budget.max_blocks, &mut chosen) {
        Ok(chosen)
    } else {
        Err(CoreError::SearchExhausted {
            q: q.values().to_vec(),
            max_blocks: budget.max_blocks,
            max_m: budget.max_m,
            max_d: budget.max_d,
        })
    }
}

fn search(
    candidates: &[(BaseBlockSpec, Vec<usize>)],
    deficit: &[usize],
    start: usize,
    blocks_left: usize,
    chosen: &mut Vec<BaseBlockSpec>,
) -> bool {
    if deficit.iter().all(|&v| v == 0) {
        return true;
    }
    if blocks_left == 0 {
        return false;
    }
    for ci in start..candidates.len() {
        let (spec, profile) = &candidates[ci];
        if profile.iter().zip(deficit).any(|(p, d)| p > d) {
            continue;
        }
        let next: Vec<usize> = deficit.iter().zip(profile).map(|(d, p)| d - p).collect();
        chosen.push(*spec);
        if search(candidates, &next, ci, blocks_left - 1, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

/// Result of [`construct_generic_rank_matching`].
#[derive(Debug, Clone)]
pub struct RankMatching {
    /// Block-diagonal `L_1`; total dimension is the sum of block sizes.
    pub l1: ExpPolyMatrix,
    pub blocks: Vec<BaseBlockSpec>,
}

/// Block-diagonal construction achieving generic ranks `q` exactly, via
/// [`decompose_rank_sequence`] under the default budget.
pub fn construct_generic_rank_matching(q: &RankSequence) -> Result<RankMatching> {
    construct_generic_rank_matching_with_budget(q, &SearchBudget::default_for(q.len()))
}

/// As [`construct_generic_rank_matching`] with explicit search limits.
pub fn construct_generic_rank_matching_with_budget(
    q: &RankSequence,
    budget: &SearchBudget,
) -> Result<RankMatching> {
    let blocks = decompose_rank_sequence(q, budget)?;
    let parts = blocks.iter().map(base_block).collect::<Result<Vec<_>>>()?;
    Ok(RankMatching {
        l1: ExpPolyMatrix::block_diag(&parts),
        blocks,
    })
}

// ---------------------------------------------------------------------------
// rank ordering
// ---------------------------------------------------------------------------

/// Relation between consecutive entries of a requested rank chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderRelation {
    #[serde(rename = "GT")]
    Gt,
    #[serde(rename = "EQ")]
    Eq,
    /// Canonicalized to [`OrderRelation::Eq`] during weight construction,
    /// which keeps weights large and maximizes Leibniz slack.
    #[serde(rename = "GE")]
    Ge,
}

impl OrderRelation {
    fn canonical(self) -> Self {
        match self {
            OrderRelation::Ge => OrderRelation::Eq,
            other => other,
        }
    }

    fn holds(self, a: usize, b: usize) -> bool {
        match self.canonical() {
            OrderRelation::Gt => a > b,
            OrderRelation::Eq => a == b,
            OrderRelation::Ge => unreachable!("canonicalized"),
        }
    }
}

/// A requested ordering `rank(L_{pi(1)}) R_1 rank(L_{pi(2)}) ... rank(L_{pi(k)})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingSpec {
    pub k: usize,
    /// 1-based permutation of `[k]`: `permutation[x - 1] = pi(x)`.
    pub permutation: Vec<usize>,
    /// `k - 1` relations between consecutive chain positions.
    pub relations: Vec<OrderRelation>,
}

impl OrderingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::InvalidArgument("ordering needs k >= 1".into()));
        }
        if self.permutation.len() != self.k {
            return Err(CoreError::InvalidArgument(format!(
                "permutation has length {}, expected k = {}",
                self.permutation.len(),
                self.k
            )));
        }
        let mut seen = vec![false; self.k];
        for &p in &self.permutation {
            if p == 0 || p > self.k || seen[p - 1] {
                return Err(CoreError::InvalidArgument(format!(
                    "permutation {:?} is not a bijection on [1, {}]",
                    self.permutation, self.k
                )));
            }
            seen[p - 1] = true;
        }
        if self.relations.len() + 1 != self.k {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} relations, got {}",
                self.k - 1,
                self.relations.len()
            )));
        }
        Ok(())
    }

    /// True when the measured sequence satisfies the requested chain.
    pub fn chain_satisfied(&self, measured: &RankSequence) -> bool {
        (0..self.k - 1).all(|x| {
            let a = measured.at(self.permutation[x]);
            let b = measured.at(self.permutation[x + 1]);
            self.relations[x].holds(a, b)
        })
    }
}

/// Result of a rank-ordering construction.
#[derive(Debug, Clone)]
pub struct RankOrdering {
    pub q: RankSequence,
    pub weights: Vec<usize>,
    pub l1: ExpPolyMatrix,
    pub blocks: Vec<BaseBlockSpec>,
    /// False when the initial weight `2k - 1` with unit decrements produced
    /// the construction; true when an alternate strictly-valid weight vector
    /// had to be used because the canonical one does not decompose into base
    /// blocks.
    pub used_fallback: bool,
}

fn weights_for(k: usize, w1: usize, relations: &[OrderRelation], gaps: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(k);
    w.push(w1);
    let mut gap_idx = 0;
    for r in relations {
        let prev = *w.last().expect("nonempty");
        match r.canonical() {
            OrderRelation::Gt => {
                w.push(prev.saturating_sub(gaps[gap_idx]));
                gap_idx += 1;
            }
            OrderRelation::Eq => w.push(prev),
            OrderRelation::Ge => unreachable!("canonicalized"),
        }
    }
    w
}

fn q_from_weights(spec: &OrderingSpec, weights: &[usize]) -> RankSequence {
    let mut q = vec![0usize; spec.k];
    for x in 0..spec.k {
        q[spec.permutation[x] - 1] = weights[x];
    }
    RankSequence(q)
}

/// Canonical ordering construction: weights start at `w_1 = 2k - 1` and drop
/// by one across each strict relation, so the generated `q` lies in
/// `[k, 2k - 1]` and satisfies the strict Leibniz bound. Decomposition
/// failures propagate with the generated `q` attached.
pub fn construct_rank_ordering(spec: &OrderingSpec) -> Result<RankOrdering> {
    spec.validate()?;
    let n_gt = spec
        .relations
        .iter()
        .filter(|r| r.canonical() == OrderRelation::Gt)
        .count();
    let weights = weights_for(spec.k, 2 * spec.k - 1, &spec.relations, &vec![1; n_gt]);
    let q = q_from_weights(spec, &weights);
    debug_assert!(q.strictly_leibniz_feasible());
    let matching = construct_generic_rank_matching(&q)?;
    Ok(RankOrdering {
        q,
        weights,
        l1: matching.l1,
        blocks: matching.blocks,
        used_fallback: false,
    })
}

/// As [`construct_rank_ordering`], but when the canonical weights do not
/// decompose into base blocks, deterministically scans alternate weight
/// vectors (larger initial weight, gap sizes up to 3) until one both
/// satisfies the strict Leibniz bound and decomposes. The requested chain is
/// preserved by construction for every candidate.
pub fn construct_rank_ordering_with_fallback(spec: &OrderingSpec) -> Result<RankOrdering> {
    match construct_rank_ordering(spec) {
        Ok(out) => Ok(out),
        Err(CoreError::SearchExhausted { .. }) => {
            let k = spec.k;
            let n_gt = spec
                .relations
                .iter()
                .filter(|r| r.canonical() == OrderRelation::Gt)
                .count();
            let budget = SearchBudget::default_for(k);
            let mut last_q: Option<RankSequence> = None;
            for w1 in (2 * k - 1)..=(4 * k + 1) {
                let mut gaps = vec![1usize; n_gt];
                'gaps: loop {
                    let weights = weights_for(k, w1, &spec.relations, &gaps);
                    if *weights.last().expect("nonempty") >= 1 {
                        let q = q_from_weights(spec, &weights);
                        if q.strictly_leibniz_feasible() {
                            if let Ok(matching) =
                                construct_generic_rank_matching_with_budget(&q, &budget)
                            {
                                return Ok(RankOrdering {
                                    used_fallback: true,
                                    q,
                                    weights,
                                    l1: matching.l1,
                                    blocks: matching.blocks,
                                });
                            }
                            last_q = Some(q);
                        }
                    }
                    if n_gt == 0 {
                        break 'gaps;
                    }
                    // next gap vector in lexicographic order over {1, 2, 3}^n_gt
                    let mut pos = n_gt;
                    loop {
                        if pos == 0 {
                            break 'gaps;
                        }
                        if gaps[pos - 1] < 3 {
                            gaps[pos - 1] += 1;
                            for g in gaps.iter_mut().skip(pos) {
                                *g = 1;
                            }
                            break;
                        }
                        pos -= 1;
                    }
                }
            }
            Err(CoreError::SearchExhausted {
                q: last_q.map(|q| q.0).unwrap_or_default(),
                max_blocks: budget.max_blocks,
                max_m: budget.max_m,
                max_d: budget.max_d,
            })
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// bound checks and the negative example
// ---------------------------------------------------------------------------

/// Per-index outcome of the Leibniz bound checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeibnizCheck {
    /// 1-based derivative index `i`.
    pub index: usize,
    pub rank: usize,
    /// `r_i <= 2 r_{i-1}`; vacuous (true) at `i = 1`.
    pub step_ok: bool,
    /// `r_i <= i * r_1`.
    pub global_ok: bool,
}

/// Report of [`check_leibniz_bounds`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeibnizReport {
    pub checks: Vec<LeibnizCheck>,
    pub pass: bool,
}

/// Verifies the step bound `r_i <= 2 r_{i-1}` and the high-order bound
/// `r_i <= i * r_1` on a measured rank sequence.
pub fn check_leibniz_bounds(ranks: &RankSequence) -> LeibnizReport {
    let q = ranks.values();
    let r1 = q.first().copied().unwrap_or(0);
    let checks: Vec<LeibnizCheck> = q
        .iter()
        .enumerate()
        .map(|(idx, &r)| {
            let i = idx + 1;
            LeibnizCheck {
                index: i,
                rank: r,
                step_ok: idx == 0 || r <= 2 * q[idx - 1],
                global_ok: r <= i * r1,
            }
        })
        .collect();
    let pass = checks.iter().all(|c| c.step_ok && c.global_ok);
    LeibnizReport { checks, pass }
}

/// Report of [`verify_negative_example`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegativeExampleReport {
    pub trials: usize,
    /// Largest measured generic rank of `L_3` across trials.
    pub max_observed_rank: usize,
    /// The subadditivity ceiling: three rank-1 Leibniz terms.
    pub bound: usize,
    /// Trial indices that exceeded the bound (empty on pass).
    pub violations: Vec<usize>,
}

impl NegativeExampleReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples random rank-1 polynomial `L_1(t) = u(t) v(t)^T` (vector
/// polynomials of degree at most 6, dimension in `4..=8`) and checks that the
/// generic rank of `L_3 = L_1''` never exceeds `1 + 1 + 1 = 3`.
pub fn verify_negative_example(trials: usize, seed: u64) -> Result<NegativeExampleReport> {
    if trials == 0 {
        return Err(CoreError::InvalidArgument("need at least one trial".into()));
    }
    let mut max_observed = 0;
    let mut violations = Vec::new();
    for trial in 0..trials {
        let mut rng = rng_from_seed(derive_seed(seed, trial as u64));
        let n = rng.gen_range(4..=8);
        let du = rng.gen_range(0..=6usize);
        let dv = rng.gen_range(0..=6usize);
        let sample = |rng: &mut rand_chacha::ChaCha8Rng, deg: usize, n: usize| {
            (0..=deg)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect::<Vec<_>>()
        };
        let u = sample(&mut rng, du, n);
        let v = sample(&mut rng, dv, n);
        let l1 = poly_outer_product(&u, &v)?;
        let l3 = l1.derivative_n(2);
        let r = generic_rank(&l3, &SampleSpec::default_for(&l3));
        max_observed = max_observed.max(r);
        if r > 3 {
            violations.push(trial);
        }
    }
    Ok(NegativeExampleReport {
        trials,
        max_observed_rank: max_observed,
        bound: 3,
        violations,
    })
}

/// The witness attaining the negative-example bound:
/// `L_3 = (u u^T)''` with `u = [1, t, t^2, t^3]` has generic rank exactly 3.
pub fn negative_example_witness() -> Result<ExpPolyMatrix> {
    let u = monomial_coeffs(4);
    Ok(poly_outer_product(&u, &u)?.derivative_n(2))
}
