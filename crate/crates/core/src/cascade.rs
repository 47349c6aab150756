//! Batched evaluation of a base layer and its cascading low-rank heads.
//!
//! Order `i` of the cascade is `f((W + sum_{j<=i} A_j B_j) X)`. The fast path
//! never materializes the merged weights: it computes `Z_0 = W X` once,
//! batches all right projections through one stacked multiply
//! `Y = [B_1; ...; B_k] X`, forms `Z_i = A_i Y_i`, and produces the
//! pre-activations as cumulative sums `Z_{<=i} = Z_{<=i-1} + Z_i`. The dense
//! path materializes every merged weight and serves as the correctness
//! oracle.
//!
//! Both evaluators count flops with the units from [`crate::flops`] and the
//! counts equal [`flop_estimate`] exactly, so measured numbers can be
//! asserted against the analytic ones.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flops;
use crate::seeding::{derive_seed, rng_from_seed};

/// Entrywise activation applied to every cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, m: &mut DMatrix<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => m.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => m.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown activation {other:?} (expected identity, relu, or tanh)"
            ))),
        }
    }
}

/// Base weight plus ordered low-rank adapters `(A_i, B_i)`.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    w: DMatrix<f64>,
    adapters: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    activation: Activation,
}

impl CascadeModel {
    /// Validates shapes: `W` is `n x n`, each `A_i` is `n x r_i` and `B_i` is
    /// `r_i x n` with `r_i >= 1`.
    pub fn new(
        w: DMatrix<f64>,
        adapters: Vec<(DMatrix<f64>, DMatrix<f64>)>,
        activation: Activation,
    ) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(CoreError::DimensionMismatch(format!(
                "base weight must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        for (i, (a, b)) in adapters.iter().enumerate() {
            let r = a.ncols();
            if r == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "adapter {} has rank 0",
                    i + 1
                )));
            }
            if a.nrows() != n || b.ncols() != n || b.nrows() != r {
                return Err(CoreError::DimensionMismatch(format!(
                    "adapter {}: A is {}x{}, B is {}x{}, expected {}x{} and {}x{}",
                    i + 1,
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols(),
                    n,
                    r,
                    r,
                    n
                )));
            }
        }
        Ok(Self {
            w,
            adapters,
            activation,
        })
    }

    /// Model with Gaussian entries; one adapter per entry of `ranks`.
    pub fn random(n: usize, ranks: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, 0));
        let w = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let adapters = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut rng = rng_from_seed(derive_seed(seed, 1 + i as u64));
                let a = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = DMatrix::from_fn(r, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                (a, b)
            })
            .collect();
        Self::new(w, adapters, activation)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.adapters.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.adapters.iter().map(|(a, _)| a.ncols()).collect()
    }

    /// Total cumulative rank `r = sum r_i`.
    pub fn total_rank(&self) -> usize {
        self.adapters.iter().map(|(a, _)| a.ncols()).sum()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn adapters(&self) -> &[(DMatrix<f64>, DMatrix<f64>)] {
        &self.adapters
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Same base weight with only the first `j` adapters.
    pub fn truncated(&self, j: usize) -> Self {
        Self {
            w: self.w.clone(),
            adapters: self.adapters[..j.min(self.adapters.len())].to_vec(),
            activation: self.activation,
        }
    }
}

/// All cascade orders `G_0 ... G_k` plus the measured flop count.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub orders: Vec<DMatrix<f64>>,
    pub flops_used: u64,
}

fn check_input(model: &CascadeModel, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != model.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "input has {} rows, model dimension is {}",
            x.nrows(),
            model.n()
        )));
    }
    Ok(())
}

/// Cumulative-sum evaluation of all orders.
///
/// Counted flops: `2n^2 b` for `W X`, `2 r n b` for the stacked right
/// projection, `2 n r_i b` per left projection, and `n b` per cumulative
/// addition.
pub fn eval_all_orders(model: &CascadeModel, x: &DMatrix<f64>) -> Result<EvalOutput> {
    check_input(model, x)?;
    let n = model.n();
    let k = model.k();
    let b = x.ncols();
    let r = model.total_rank();
    let mut flops = 0u64;

    let z0 = &model.w * x;
    flops += flops::matmul(n, n, b);

    // vertically stacked right projections: Y = [B_1; ...; B_k] X
    let mut b_stack = DMatrix::zeros(r, n);
    let mut row = 0;
    for (_, bi) in model.adapters() {
        b_stack.view_mut((row, 0), (bi.nrows(), n)).copy_from(bi);
        row += bi.nrows();
    }
    let y = &b_stack * x;
    if k > 0 {
        flops += flops::matmul(r, n, b);
    }

    let mut orders = Vec::with_capacity(k + 1);
    let mut cumulative = z0;
    let mut g0 = cumulative.clone();
    model.activation.apply(&mut g0);
    orders.push(g0);

    let mut row = 0;
    for (a, bi) in model.adapters() {
        let ri = bi.nrows();
        let yi = y.view((row, 0), (ri, b));
        row += ri;
        let zi = a * yi;
        flops += flops::matmul(n, ri, b);
        cumulative += zi;
        flops += flops::add(n, b);
        let mut gi = cumulative.clone();
        model.activation.apply(&mut gi);
        orders.push(gi);
    }

    Ok(EvalOutput {
        orders,
        flops_used: flops,
    })
}

/// Dense oracle: materializes every merged weight `W_i = W + sum_{j<=i} A_j B_j`
/// and multiplies it with the input.
///
/// Counted flops: `2 n^2 r_i` per adapter product, `n^2` per merge addition,
/// and `2 n^2 b` per order multiply.
pub fn eval_naive(model: &CascadeModel, x: &DMatrix<f64>) -> Result<EvalOutput> {
    check_input(model, x)?;
    let n = model.n();
    let b = x.ncols();
    let mut flops = 0u64;

    let mut orders = Vec::with_capacity(model.k() + 1);
    let mut merged = model.w.clone();
    let mut g = &merged * x;
    flops += flops::matmul(n, n, b);
    model.activation.apply(&mut g);
    orders.push(g);

    for (a, bi) in model.adapters() {
        let ri = bi.nrows();
        merged += a * bi;
        flops += flops::matmul(n, ri, n) + flops::add(n, n);
        let mut g = &merged * x;
        flops += flops::matmul(n, n, b);
        model.activation.apply(&mut g);
        orders.push(g);
    }

    Ok(EvalOutput {
        orders,
        flops_used: flops,
    })
}

/// Analytic flop counts for both evaluation paths at batch size `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub cascade: u64,
    pub naive: u64,
}

pub fn flop_estimate(model: &CascadeModel, b: usize) -> FlopEstimate {
    let n = model.n();
    let k = model.k();
    let r = model.total_rank();
    let mut cascade = flops::matmul(n, n, b);
    if k > 0 {
        cascade += flops::matmul(r, n, b);
    }
    for ri in model.ranks() {
        cascade += flops::matmul(n, ri, b);
    }
    cascade += (k as u64) * flops::add(n, b);

    let mut naive = (k as u64 + 1) * flops::matmul(n, n, b);
    for ri in model.ranks() {
        naive += flops::matmul(n, ri, n) + flops::add(n, n);
    }
    FlopEstimate { cascade, naive }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.amax().max(1e-300);
        (a - b).amax() / scale
    }

    #[test]
    fn zero_adapter_collapses_orders() {
        let n = 3;
        let w = DMatrix::<f64>::identity(n, n) * 2.0;
        let a = DMatrix::zeros(n, 1);
        let bm = DMatrix::zeros(1, n);
        let model = CascadeModel::new(w, vec![(a, bm)], Activation::Identity).unwrap();
        let x = DMatrix::from_fn(n, 2, |i, j| (i + j) as f64);
        let out = eval_all_orders(&model, &x).unwrap();
        assert_eq!(out.orders.len(), 2);
        assert_eq!(out.orders[0], out.orders[1]);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // W = I, A1 = [1, 0]^T, B1 = [0, 1], X = I:
        // G1 = I + e1 e2^T = [[1, 1], [0, 1]]
        let model = CascadeModel::new(
            DMatrix::identity(2, 2),
            vec![(
                DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
                DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            )],
            Activation::Identity,
        )
        .unwrap();
        let out = eval_all_orders(&model, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(
            out.orders[1],
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
        );
    }

    #[test]
    fn cascade_matches_naive_on_random_model() {
        let model = CascadeModel::random(32, &[2, 3, 4, 5], Activation::Identity, 99).unwrap();
        let mut rng = rng_from_seed(100);
        let x = DMatrix::from_fn(32, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fast = eval_all_orders(&model, &x).unwrap();
        let slow = eval_naive(&model, &x).unwrap();
        assert_eq!(fast.orders.len(), slow.orders.len());
        for (f, s) in fast.orders.iter().zip(&slow.orders) {
            assert!(rel_err(f, s) < 1e-12);
        }
    }

    #[test]
    fn nonlinear_activations_agree_across_paths() {
        for act in [Activation::Relu, Activation::Tanh] {
            let model = CascadeModel::random(16, &[2, 2, 3], act, 7).unwrap();
            let mut rng = rng_from_seed(8);
            let x = DMatrix::from_fn(16, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fast = eval_all_orders(&model, &x).unwrap();
            let slow = eval_naive(&model, &x).unwrap();
            for (f, s) in fast.orders.iter().zip(&slow.orders) {
                assert!(rel_err(f, s) < 1e-12);
            }
        }
    }

    #[test]
    fn naive_zero_order_only() {
        let model = CascadeModel::random(8, &[], Activation::Identity, 3).unwrap();
        let mut rng = rng_from_seed(4);
        let x = DMatrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let out = eval_naive(&model, &x).unwrap();
        assert_eq!(out.orders.len(), 1);
        assert_eq!(out.flops_used, flops::matmul(8, 8, 3));
    }

    #[test]
    fn measured_flops_equal_estimates() {
        for (n, ranks, b) in [
            (4usize, vec![1usize], 1usize),
            (16, vec![2, 3], 5),
            (8, vec![], 2),
            (32, vec![4, 4, 4, 4], 8),
        ] {
            let model = CascadeModel::random(n, &ranks, Activation::Identity, 5).unwrap();
            let mut rng = rng_from_seed(6);
            let x = DMatrix::from_fn(n, b, |_, _| rng.sample::<f64, _>(StandardNormal));
            let est = flop_estimate(&model, b);
            assert_eq!(eval_all_orders(&model, &x).unwrap().flops_used, est.cascade);
            assert_eq!(eval_naive(&model, &x).unwrap().flops_used, est.naive);
        }
    }

    #[test]
    fn flop_estimate_hand_count() {
        // n = 4, k = 1, r = 1, b = 1: 32 + 8 + 8 + 4 = 52
        let model = CascadeModel::random(4, &[1], Activation::Identity, 1).unwrap();
        assert_eq!(flop_estimate(&model, 1).cascade, 52);
    }

    #[test]
    fn flop_estimate_k_zero_paths_coincide() {
        let model = CascadeModel::random(6, &[], Activation::Identity, 1).unwrap();
        let est = flop_estimate(&model, 3);
        assert_eq!(est.cascade, est.naive);
        assert_eq!(est.cascade, flops::matmul(6, 6, 3));
    }

    #[test]
    fn naive_never_cheaper_when_rank_is_small() {
        // r < n k / (k + 1) implies the cascade path wins
        for n in [8usize, 16, 32] {
            for k in [1usize, 2, 4] {
                for b in [1usize, 4, 64] {
                    for per_rank in 1..=((n * k) / (k + 1) / k).max(1) {
                        let ranks = vec![per_rank; k];
                        let r: usize = ranks.iter().sum();
                        if r * (k + 1) >= n * k {
                            continue;
                        }
                        let model =
                            CascadeModel::random(n, &ranks, Activation::Identity, 2).unwrap();
                        let est = flop_estimate(&model, b);
                        assert!(
                            est.naive >= est.cascade,
                            "n={n} k={k} b={b} ranks={ranks:?}: naive {} < cascade {}",
                            est.naive,
                            est.cascade
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn prefix_sum_identity() {
        let model = CascadeModel::random(12, &[2, 3, 1], Activation::Identity, 13).unwrap();
        let mut rng = rng_from_seed(14);
        let x = DMatrix::from_fn(12, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let out = eval_all_orders(&model, &x).unwrap();
        for (i, (a, bi)) in model.adapters().iter().enumerate() {
            let direct = a * (bi * &x);
            let delta = &out.orders[i + 1] - &out.orders[i];
            assert!(rel_err(&delta, &direct) < 1e-12);
        }
    }

    #[test]
    fn truncation_reproduces_prefix_orders_bitwise() {
        let model = CascadeModel::random(10, &[1, 2, 3, 4], Activation::Tanh, 21).unwrap();
        let mut rng = rng_from_seed(22);
        let x = DMatrix::from_fn(10, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let full = eval_all_orders(&model, &x).unwrap();
        for j in 0..=4usize {
            let partial = eval_all_orders(&model.truncated(j), &x).unwrap();
            for (o, (p, f)) in partial.orders.iter().zip(&full.orders).enumerate() {
                assert_eq!(p, f, "order {o} differs after truncation to {j}");
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = CascadeModel::random(8, &[2], Activation::Identity, 1).unwrap();
        let x = DMatrix::<f64>::zeros(7, 3);
        assert!(eval_all_orders(&model, &x).is_err());
        assert!(eval_naive(&model, &x).is_err());
    }

    #[test]
    fn rank_zero_adapter_rejected() {
        let err = CascadeModel::new(
            DMatrix::identity(3, 3),
            vec![(DMatrix::zeros(3, 0), DMatrix::zeros(0, 3))],
            Activation::Identity,
        );
        assert!(err.is_err());
    }
}
