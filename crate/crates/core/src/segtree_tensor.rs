//! Tensor generalization of the low-rank segment tree: nodes hold dense
//! 3-tensors `T_v = sum_{j in S_v} A_j (x) B_j (x) C_j` and a range query
//! returns `sum_{i in S} A_i (x) B_i (x) (X^T C_i)` as a dense `n x n x b`
//! tensor.
//!
//! Memory layout is row-major with the third index fastest, so the
//! modes-(1,2)-by-3 unfolding of a tensor is its value buffer reinterpreted
//! as an `(n^2) x n` row-major matrix; the tree path sums those buffers and
//! performs one contraction multiply. CP formation goes through the
//! Khatri-Rao matricization: `T_(1) = A * KhatriRao(B, C)^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flops;
use crate::segtree_matrix::{canonical_cover, QueryStrategy};

/// CP factor triple `(A_i, B_i, C_i)`, each `n x r_i`.
pub type FactorTriple = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Dense order-3 tensor, row-major with the last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor3 {
    dims: (usize, usize, usize),
    values: Vec<f64>,
}

impl DenseTensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            dims: (d1, d2, d3),
            values: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_values(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(CoreError::DimensionMismatch(format!(
                "tensor of dims {dims:?} needs {} values, got {}",
                dims.0 * dims.1 * dims.2,
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Row-major value buffer; equally the modes-(1,2)-by-3 unfolding in
    /// row-major order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.idx(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.idx(x, y, z);
        self.values[i] = v;
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(CoreError::DimensionMismatch(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn amax(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Transpose of the first two modes: `out[y, x, z] = self[x, y, z]`.
    pub fn swap_modes_12(&self) -> Self {
        let (d1, d2, d3) = self.dims;
        let mut out = Self::zeros(d2, d1, d3);
        for x in 0..d1 {
            for y in 0..d2 {
                for z in 0..d3 {
                    out.values[(y * d1 + x) * d3 + z] = self.values[self.idx(x, y, z)];
                }
            }
        }
        out
    }
}

/// `T[x, y, z] = sum_l A[x, l] B[y, l] C[z, l]` via the matricization trick:
/// the mode-1 unfolding is `A * KhatriRao(B, C)^T`, one `(n1 x r) x
/// (r x n2 n3)` multiply.
pub fn form_cp_tensor(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DenseTensor3> {
    Ok(form_cp_tensor_counted(a, b, c)?.0)
}

/// Flops charged for one CP formation with the given shapes: the Khatri-Rao
/// block (one multiply per entry) plus the matricized product.
pub fn cp_formation_flops(n1: usize, n2: usize, n3: usize, r: usize) -> u64 {
    flops::khatri_rao(n2 * n3, r) + flops::matmul(n1, r, n2 * n3)
}

fn form_cp_tensor_counted(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DenseTensor3, u64)> {
    let r = a.ncols();
    if b.ncols() != r || c.ncols() != r {
        return Err(CoreError::DimensionMismatch(format!(
            "CP factors must share the inner dimension, got {}, {}, {}",
            a.ncols(),
            b.ncols(),
            c.ncols()
        )));
    }
    let (n1, n2, n3) = (a.nrows(), b.nrows(), c.nrows());
    // Khatri-Rao column block: kr[(y n3 + z), l] = B[y, l] C[z, l],
    // built column by column to keep the peak at n2 n3 r values.
    let mut kr = DMatrix::zeros(n2 * n3, r);
    for l in 0..r {
        for y in 0..n2 {
            let by = b[(y, l)];
            for z in 0..n3 {
                kr[(y * n3 + z, l)] = by * c[(z, l)];
            }
        }
    }
    let unfolded = a * kr.transpose(); // n1 x (n2 n3)
    let mut values = vec![0.0; n1 * n2 * n3];
    for x in 0..n1 {
        for yz in 0..n2 * n3 {
            values[x * n2 * n3 + yz] = unfolded[(x, yz)];
        }
    }
    let flops = cp_formation_flops(n1, n2, n3, r);
    Ok((DenseTensor3::from_values((n1, n2, n3), values)?, flops))
}

/// Result of a tensor range query.
#[derive(Debug, Clone)]
pub struct TensorQueryOutput {
    pub output: DenseTensor3,
    pub flops: u64,
    pub strategy_used: QueryStrategy,
}

/// Predicted costs of both tensor strategies and the routing decision.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TensorCostReport {
    pub tree_flops: u64,
    pub onthefly_flops: u64,
    pub chosen: QueryStrategy,
}

/// Segment tree over CP factor triples with precomputed `n x n x n` node
/// tensors.
#[derive(Debug, Clone)]
pub struct TensorSegTree {
    n: usize,
    k: usize,
    kp: usize,
    nodes: Vec<DenseTensor3>,
    factors: Vec<FactorTriple>,
    ranks: Vec<usize>,
    init_flops: u64,
}

impl TensorSegTree {
    /// Leaves are formed through [`form_cp_tensor`]; internal nodes by tensor
    /// addition bottom-up. Immutable afterwards.
    pub fn init(factors: Vec<FactorTriple>) -> Result<Self> {
        let k = factors.len();
        if k == 0 {
            return Err(CoreError::InvalidArgument(
                "tensor segment tree needs at least one factor triple".into(),
            ));
        }
        let n = factors[0].0.nrows();
        for (i, (a, b, c)) in factors.iter().enumerate() {
            let r = a.ncols();
            if a.nrows() != n
                || b.nrows() != n
                || c.nrows() != n
                || b.ncols() != r
                || c.ncols() != r
            {
                return Err(CoreError::DimensionMismatch(format!(
                    "factor triple {} must be three {}xr matrices",
                    i + 1,
                    n
                )));
            }
        }
        let kp = k.next_power_of_two();
        let mut nodes = vec![DenseTensor3::zeros(n, n, n); 2 * kp];
        let mut init_flops = 0u64;
        for (i, (a, b, c)) in factors.iter().enumerate() {
            let (t, fl) = form_cp_tensor_counted(a, b, c)?;
            nodes[kp + i] = t;
            init_flops += fl;
        }
        for v in (1..kp).rev() {
            let mut t = nodes[2 * v].clone();
            t.add_assign(&nodes[2 * v + 1])?;
            nodes[v] = t;
            init_flops += flops::add_len(n * n * n);
        }
        let ranks = factors.iter().map(|(a, _, _)| a.ncols()).collect();
        Ok(Self {
            n,
            k,
            kp,
            nodes,
            factors,
            ranks,
            init_flops,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn init_flops(&self) -> u64 {
        self.init_flops
    }

    pub fn node_count(&self) -> usize {
        2 * self.kp - 1
    }

    pub fn node(&self, id: usize) -> &DenseTensor3 {
        &self.nodes[id]
    }

    pub fn canonical_cover(&self, lo: usize, hi: usize) -> Result<Vec<usize>> {
        canonical_cover(self.k, lo, hi)
    }

    /// Predicted flops of both strategies for `[lo, hi]` at batch size `b`.
    ///
    /// Tree: `m n^3` node summation plus the `2 n^3 b` unfolded contraction.
    /// OnTheFly per index: `2 b n r_i` for `Y_i = X^T C_i`, `n b r_i` for the
    /// Khatri-Rao block, `2 n^2 b r_i` for the matricized product, and
    /// `n^2 b` accumulation. The same counts hold for `b <= n` and `b > n`;
    /// the evaluation order is fixed.
    pub fn cost_model(&self, lo: usize, hi: usize, b: usize) -> Result<TensorCostReport> {
        let m = self.canonical_cover(lo, hi)?.len() as u64;
        let n = self.n;
        let tree_flops = m * flops::add_len(n * n * n) + flops::matmul(n * n, n, b);
        let onthefly_flops: u64 = (lo..=hi)
            .map(|i| {
                let r = self.ranks[i - 1];
                flops::matmul(b, n, r) + cp_formation_flops(n, n, b, r) + flops::add_len(n * n * b)
            })
            .sum();
        let chosen = if onthefly_flops <= tree_flops {
            QueryStrategy::OnTheFly
        } else {
            QueryStrategy::Tree
        };
        Ok(TensorCostReport {
            tree_flops,
            onthefly_flops,
            chosen,
        })
    }

    /// Exact `sum_{i in [lo, hi]} A_i (x) B_i (x) (X^T C_i)` as an
    /// `n x n x b` tensor.
    pub fn query(
        &self,
        lo: usize,
        hi: usize,
        x: &DMatrix<f64>,
        strategy: QueryStrategy,
    ) -> Result<TensorQueryOutput> {
        if x.nrows() != self.n {
            return Err(CoreError::DimensionMismatch(format!(
                "input has {} rows, tree dimension is {}",
                x.nrows(),
                self.n
            )));
        }
        let cover = self.canonical_cover(lo, hi)?;
        let b = x.ncols();
        let n = self.n;
        let strategy = match strategy {
            QueryStrategy::Auto => self.cost_model(lo, hi, b)?.chosen,
            forced => forced,
        };
        match strategy {
            QueryStrategy::Tree => {
                // sum the covered unfoldings, then contract with X once
                let mut acc = vec![0.0f64; n * n * n];
                let mut flops_used = 0u64;
                for id in &cover {
                    for (a, v) in acc.iter_mut().zip(self.nodes[*id].values()) {
                        *a += v;
                    }
                    flops_used += flops::add_len(n * n * n);
                }
                let unfolded = DMatrix::from_row_slice(n * n, n, &acc);
                let prod = unfolded * x; // (n^2) x b
                flops_used += flops::matmul(n * n, n, b);
                let mut values = vec![0.0; n * n * b];
                for row in 0..n * n {
                    for col in 0..b {
                        values[row * b + col] = prod[(row, col)];
                    }
                }
                Ok(TensorQueryOutput {
                    output: DenseTensor3::from_values((n, n, b), values)?,
                    flops: flops_used,
                    strategy_used: QueryStrategy::Tree,
                })
            }
            QueryStrategy::OnTheFly => {
                let mut output = DenseTensor3::zeros(n, n, b);
                let mut flops_used = 0u64;
                for i in lo..=hi {
                    let (a, bm, c) = &self.factors[i - 1];
                    let r = a.ncols();
                    let y = x.transpose() * c; // b x r
                    flops_used += flops::matmul(b, n, r);
                    let (t, fl) = form_cp_tensor_counted(a, bm, &y)?;
                    flops_used += fl;
                    output.add_assign(&t)?;
                    flops_used += flops::add_len(n * n * b);
                }
                Ok(TensorQueryOutput {
                    output,
                    flops: flops_used,
                    strategy_used: QueryStrategy::OnTheFly,
                })
            }
            QueryStrategy::Auto => unreachable!("resolved above"),
        }
    }
}
