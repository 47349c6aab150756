//! Exp-polynomial matrix functions and their calculus.
//!
//! The function class is `F(t) = E * e^t + sum_j C_j * t^j` with dense real
//! coefficient matrices. It is closed under differentiation and
//! antidifferentiation, which is exactly what the derivative-difference
//! constructions in this crate need: every `L_i` built from a weight
//! trajectory `W(t)` stays inside the class.
//!
//! Polynomial coefficients are raw monomial coefficients (no factorial
//! scaling); differentiation multiplies by the exponent. The `e^t` part is
//! carried symbolically and only turned into a number at evaluation time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::seeding::rng_from_seed;

/// Seed for the default generic-rank sample points.
pub const DEFAULT_SAMPLE_SEED: u64 = 0x5eed;

/// Default relative singular-value cutoff for an `rows x cols` matrix.
///
/// Exact-arithmetic constructions in this crate produce singular values that
/// are either genuinely zero (up to ~1e-15 relative float noise) or larger
/// than ~1e-4 relative, so a cutoff of `1e-8 * max(rows, cols)` separates the
/// two regimes by several orders of magnitude.
pub fn default_rank_tolerance(rows: usize, cols: usize) -> f64 {
    1e-8 * rows.max(cols) as f64
}

/// A matrix function `E * e^t + C_0 + C_1 t + ... + C_d t^d`.
///
/// Invariants: all coefficient matrices share one shape, and the polynomial
/// list carries no trailing all-zero matrix (canonical degree).
///
/// ```
/// use cascade_core::ExpPolyMatrix;
/// use nalgebra::DMatrix;
///
/// // F(t) = I + N t with nilpotent N
/// let f = ExpPolyMatrix::from_poly(vec![
///     DMatrix::identity(2, 2),
///     DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
/// ])
/// .unwrap();
/// assert_eq!(f.evaluate(2.0)[(0, 1)], 2.0);
/// assert!(f.differentiate().differentiate().is_zero());
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExpPolyMatrix {
    rows: usize,
    cols: usize,
    exp: DMatrix<f64>,
    poly: Vec<DMatrix<f64>>,
}

fn is_zero_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&x| x == 0.0)
}

impl ExpPolyMatrix {
    /// Builds from an optional exp coefficient and monomial coefficients
    /// `[C_0, ..., C_d]`. Trailing zero coefficients are trimmed.
    pub fn from_parts(exp: Option<DMatrix<f64>>, poly: Vec<DMatrix<f64>>) -> Result<Self> {
        let shape = exp
            .as_ref()
            .map(|m| m.shape())
            .or_else(|| poly.first().map(|m| m.shape()))
            .ok_or_else(|| {
                CoreError::InvalidArgument(
                    "cannot infer dimensions from empty parts; use ExpPolyMatrix::zero".into(),
                )
            })?;
        for (j, c) in poly.iter().enumerate() {
            if c.shape() != shape {
                return Err(CoreError::DimensionMismatch(format!(
                    "poly coefficient {} has shape {:?}, expected {:?}",
                    j,
                    c.shape(),
                    shape
                )));
            }
        }
        let exp = exp.unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1));
        if exp.shape() != shape {
            return Err(CoreError::DimensionMismatch(format!(
                "exp coefficient has shape {:?}, expected {:?}",
                exp.shape(),
                shape
            )));
        }
        let mut out = Self {
            rows: shape.0,
            cols: shape.1,
            exp,
            poly,
        };
        out.trim();
        Ok(out)
    }

    /// The zero function of the given shape.
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            exp: DMatrix::zeros(rows, cols),
            poly: Vec::new(),
        }
    }

    /// Polynomial-only function from monomial coefficients.
    pub fn from_poly(poly: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::from_parts(None, poly)
    }

    /// The constant function `t -> c`.
    pub fn constant(c: DMatrix<f64>) -> Self {
        Self::from_parts(None, vec![c]).expect("constant coefficient is its own shape")
    }

    /// The pure exponential `E * e^t`.
    pub fn from_exp(e: DMatrix<f64>) -> Self {
        let (rows, cols) = e.shape();
        Self {
            rows,
            cols,
            exp: e,
            poly: Vec::new(),
        }
    }

    fn trim(&mut self) {
        while let Some(last) = self.poly.last() {
            if is_zero_matrix(last) {
                self.poly.pop();
            } else {
                break;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Canonical polynomial degree; `None` when the polynomial part is empty.
    pub fn degree(&self) -> Option<usize> {
        self.poly.len().checked_sub(1)
    }

    pub fn exp_coeff(&self) -> &DMatrix<f64> {
        &self.exp
    }

    pub fn poly_coeffs(&self) -> &[DMatrix<f64>] {
        &self.poly
    }

    pub fn has_exp_part(&self) -> bool {
        !is_zero_matrix(&self.exp)
    }

    /// True when every stored coefficient is exactly zero.
    pub fn is_zero(&self) -> bool {
        !self.has_exp_part() && self.poly.is_empty()
    }

    /// Evaluates in double precision: Horner on the polynomial part plus
    /// `E * e^t`.
    pub fn evaluate(&self, t: f64) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.rows, self.cols);
        for c in self.poly.iter().rev() {
            acc *= t;
            acc += c;
        }
        if self.has_exp_part() {
            acc += &self.exp * t.exp();
        }
        acc
    }

    /// Derivative with respect to `t`: the exp coefficient is unchanged and
    /// `C'_j = (j + 1) * C_{j+1}`.
    pub fn differentiate(&self) -> Self {
        let poly = self
            .poly
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, c)| c * j as f64)
            .collect();
        let mut out = Self {
            rows: self.rows,
            cols: self.cols,
            exp: self.exp.clone(),
            poly,
        };
        out.trim();
        out
    }

    /// `n`-th derivative.
    pub fn derivative_n(&self, n: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..n {
            cur = cur.differentiate();
        }
        cur
    }

    /// Antiderivative with all integration constants zero: the exp part maps
    /// to itself and `C_j` moves to degree `j + 1` with coefficient
    /// `C_j / (j + 1)`.
    ///
    /// Exact inverse of [`differentiate`](Self::differentiate) in real
    /// arithmetic; in f64 the round trip reproduces small-integer
    /// coefficients bit-exactly and arbitrary coefficients to within one ulp
    /// per entry.
    pub fn antiderivative(&self) -> Self {
        if self.poly.is_empty() {
            return Self {
                rows: self.rows,
                cols: self.cols,
                exp: self.exp.clone(),
                poly: Vec::new(),
            };
        }
        let mut poly = Vec::with_capacity(self.poly.len() + 1);
        poly.push(DMatrix::zeros(self.rows, self.cols));
        for (j, c) in self.poly.iter().enumerate() {
            poly.push(c / (j + 1) as f64);
        }
        let mut out = Self {
            rows: self.rows,
            cols: self.cols,
            exp: self.exp.clone(),
            poly,
        };
        out.trim();
        out
    }

    /// `n`-th antiderivative, constants zero at every step.
    pub fn antiderivative_n(&self, n: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..n {
            cur = cur.antiderivative();
        }
        cur
    }

    /// Coefficient-wise scaling.
    pub fn scale(&self, a: f64) -> Self {
        let mut out = Self {
            rows: self.rows,
            cols: self.cols,
            exp: &self.exp * a,
            poly: self.poly.iter().map(|c| c * a).collect(),
        };
        out.trim();
        out
    }

    /// Coefficient-wise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Coefficient-wise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &Self,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(CoreError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let zero = DMatrix::zeros(self.rows, self.cols);
        let len = self.poly.len().max(other.poly.len());
        let poly = (0..len)
            .map(|j| {
                let a = self.poly.get(j).unwrap_or(&zero);
                let b = other.poly.get(j).unwrap_or(&zero);
                f(a, b)
            })
            .collect();
        let mut out = Self {
            rows: self.rows,
            cols: self.cols,
            exp: f(&self.exp, &other.exp),
            poly,
        };
        out.trim();
        Ok(out)
    }

    /// Exact (bitwise) coefficient equality of the canonical forms.
    pub fn coeff_eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.exp == other.exp
            && self.poly == other.poly
    }

    /// Largest absolute coefficient difference across the exp part and all
    /// monomials; used by tolerance-based tests.
    pub fn coeff_max_abs_diff(&self, other: &Self) -> f64 {
        let mut worst: f64 = self
            .exp
            .iter()
            .zip(other.exp.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let zero = DMatrix::zeros(self.rows, self.cols);
        let len = self.poly.len().max(other.poly.len());
        for j in 0..len {
            let a = self.poly.get(j).unwrap_or(&zero);
            let b = other.poly.get(j).unwrap_or(&zero);
            worst = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
        }
        worst
    }

    /// Block-diagonal concatenation; the result has shape
    /// `(sum rows) x (sum cols)`.
    pub fn block_diag(parts: &[Self]) -> Self {
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let deg = parts.iter().map(|p| p.poly.len()).max().unwrap_or(0);
        let mut exp = DMatrix::zeros(rows, cols);
        let mut poly = vec![DMatrix::zeros(rows, cols); deg];
        let (mut ro, mut co) = (0, 0);
        for p in parts {
            exp.view_mut((ro, co), (p.rows, p.cols)).copy_from(&p.exp);
            for (j, c) in p.poly.iter().enumerate() {
                poly[j].view_mut((ro, co), (p.rows, p.cols)).copy_from(c);
            }
            ro += p.rows;
            co += p.cols;
        }
        let mut out = Self {
            rows,
            cols,
            exp,
            poly,
        };
        out.trim();
        out
    }
}

/// `u(t) v(t)^T` for vector polynomials given by coefficient lists
/// `u(t) = sum_a u_a t^a`, `v(t) = sum_b v_b t^b`. The degree-`j` coefficient
/// of the product is `sum_{a+b=j} u_a v_b^T`.
pub fn poly_outer_product(u: &[DVector<f64>], v: &[DVector<f64>]) -> Result<ExpPolyMatrix> {
    if u.is_empty() || v.is_empty() {
        return Err(CoreError::InvalidArgument(
            "poly_outer_product needs nonempty coefficient lists".into(),
        ));
    }
    let rows = u[0].len();
    let cols = v[0].len();
    if u.iter().any(|x| x.len() != rows) || v.iter().any(|x| x.len() != cols) {
        return Err(CoreError::DimensionMismatch(
            "ragged coefficient vectors in poly_outer_product".into(),
        ));
    }
    let deg = u.len() + v.len() - 1;
    let mut poly = vec![DMatrix::zeros(rows, cols); deg];
    for (a, ua) in u.iter().enumerate() {
        for (b, vb) in v.iter().enumerate() {
            poly[a + b] += ua * vb.transpose();
        }
    }
    ExpPolyMatrix::from_poly(poly)
}

/// The difference sequence `L_i = W^{(i-1)} - W^{(i)}` for `i in [k]`,
/// realized through the recurrence `L_1 = W - W'`, `L_{i+1} = L_i'` so that
/// consecutive entries are exact derivatives of each other.
///
/// The shared `e^t` part of `W^{(i-1)}` and `W^{(i)}` cancels, so every
/// `L_i` is a pure polynomial.
pub fn l_sequence(w: &ExpPolyMatrix, k: usize) -> Result<Vec<ExpPolyMatrix>> {
    if k == 0 {
        return Err(CoreError::InvalidArgument("l_sequence needs k >= 1".into()));
    }
    let mut out = Vec::with_capacity(k);
    let l1 = w.sub(&w.differentiate())?;
    out.push(l1);
    for _ in 1..k {
        let next = out.last().expect("nonempty").differentiate();
        out.push(next);
    }
    Ok(out)
}

/// Counts singular values above `tolerance * sigma_max`. The zero matrix has
/// rank 0, as does the degenerate empty matrix.
pub fn numeric_rank(m: &DMatrix<f64>, tolerance: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return 0;
    }
    sv.iter().filter(|&&s| s > tolerance * smax).count()
}

/// Sample points and singular-value cutoff for generic-rank estimation.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    sample_points: Vec<f64>,
    tolerance: f64,
}

impl SampleSpec {
    pub fn new(sample_points: Vec<f64>, tolerance: f64) -> Result<Self> {
        if sample_points.is_empty() {
            return Err(CoreError::InvalidArgument(
                "SampleSpec needs at least one sample point".into(),
            ));
        }
        if !(tolerance > 0.0 && tolerance < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "SampleSpec tolerance must lie in (0, 1), got {tolerance}"
            )));
        }
        Ok(Self {
            sample_points,
            tolerance,
        })
    }

    /// Default spec for a matrix function of the given shape: seven points
    /// drawn uniformly from `[0.25, 2.0]` by the seeded generator plus the
    /// fixed points `0.5` and `1.5`, with the default rank tolerance.
    ///
    /// `t = 0` is deliberately excluded; ranks at the stationary point are a
    /// separate query through [`ExpPolyMatrix::evaluate`].
    pub fn for_shape(rows: usize, cols: usize, seed: u64) -> Self {
        Self::for_shape_with(rows, cols, seed, 7)
    }

    /// As [`for_shape`](Self::for_shape) with a custom number of random
    /// points; the fixed points `0.5` and `1.5` are always appended.
    pub fn for_shape_with(rows: usize, cols: usize, seed: u64, random_points: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut pts: Vec<f64> = (0..random_points)
            .map(|_| rng.gen_range(0.25..2.0))
            .collect();
        pts.push(0.5);
        pts.push(1.5);
        Self {
            sample_points: pts,
            tolerance: default_rank_tolerance(rows, cols),
        }
    }

    /// Default spec for a given function, seeded with [`DEFAULT_SAMPLE_SEED`].
    pub fn default_for(f: &ExpPolyMatrix) -> Self {
        Self::for_shape(f.rows(), f.cols(), DEFAULT_SAMPLE_SEED)
    }

    pub fn sample_points(&self) -> &[f64] {
        &self.sample_points
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "SampleSpec tolerance must lie in (0, 1), got {tolerance}"
            )));
        }
        self.tolerance = tolerance;
        Ok(self)
    }
}

/// Generic rank of a matrix function: the rank over the field of scalar
/// functions, attained pointwise off a measure-zero set of `t`. Estimated as
/// the max numeric rank over the sample points.
pub fn generic_rank(f: &ExpPolyMatrix, spec: &SampleSpec) -> usize {
    spec.sample_points
        .iter()
        .map(|&t| numeric_rank(&f.evaluate(t), spec.tolerance))
        .max()
        .unwrap_or(0)
}

/// Generic ranks of the first `k` derivatives (orders `0..k-1`) of `f`.
pub fn rank_profile(f: &ExpPolyMatrix, k: usize, spec: &SampleSpec) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut cur = f.clone();
    for i in 0..k {
        out.push(generic_rank(&cur, spec));
        if i + 1 < k {
            cur = cur.differentiate();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn e1(n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[0] = 1.0;
        v
    }

    /// u_m(t) = [1, t, ..., t^{m-1}] as a coefficient list.
    fn monomial_vector(m: usize) -> Vec<DVector<f64>> {
        (0..m)
            .map(|a| {
                let mut v = DVector::zeros(m);
                v[a] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn evaluate_identity_plus_nilpotent() {
        // F = I2 + [[0,1],[0,0]] t at t = 2
        let c1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let f = ExpPolyMatrix::from_poly(vec![identity(2), c1]).unwrap();
        let got = f.evaluate(2.0);
        assert_eq!(got, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
    }

    #[test]
    fn evaluate_pure_exp_at_zero() {
        let f = ExpPolyMatrix::from_exp(identity(1));
        assert_eq!(f.evaluate(0.0), identity(1));
    }

    #[test]
    fn evaluate_exp_plus_linear_term() {
        // F = e^t C + t uv^T with C = I2, u = v = e1; at t = 1 the scalar
        // expressions give e+1 on (0,0) and e on (1,1).
        let u = e1(2);
        let f = ExpPolyMatrix::from_parts(
            Some(identity(2)),
            vec![DMatrix::zeros(2, 2), &u * u.transpose()],
        )
        .unwrap();
        let got = f.evaluate(1.0);
        let e = 1.0_f64.exp();
        assert_relative_eq!(got[(0, 0)], e + 1.0, max_relative = 1e-15);
        assert_relative_eq!(got[(1, 1)], e, max_relative = 1e-15);
        assert_eq!(got[(0, 1)], 0.0);
        assert_eq!(got[(1, 0)], 0.0);
    }

    #[test]
    fn differentiate_quadratic_term() {
        // F = e^t C + t^2 uv^T  ->  F' = e^t C + 2t uv^T
        let u = e1(2);
        let uv = &u * u.transpose();
        let f = ExpPolyMatrix::from_parts(
            Some(identity(2)),
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), uv.clone()],
        )
        .unwrap();
        let fp = f.differentiate();
        let expected =
            ExpPolyMatrix::from_parts(Some(identity(2)), vec![DMatrix::zeros(2, 2), &uv * 2.0])
                .unwrap();
        assert!(fp.coeff_eq(&expected));
    }

    #[test]
    fn differentiate_constant_is_zero() {
        let f = ExpPolyMatrix::constant(DMatrix::from_element(3, 3, 4.0));
        assert!(f.differentiate().is_zero());
    }

    #[test]
    fn time_varying_difference_is_t_minus_one() {
        // F = e^t C + t uv^T: F - F' = (t - 1) uv^T
        let u = e1(2);
        let uv = &u * u.transpose();
        let f =
            ExpPolyMatrix::from_parts(Some(identity(2)), vec![DMatrix::zeros(2, 2), uv.clone()])
                .unwrap();
        let diff = f.sub(&f.differentiate()).unwrap();
        let expected = ExpPolyMatrix::from_poly(vec![&uv * -1.0, uv]).unwrap();
        assert!(diff.coeff_eq(&expected));
    }

    #[test]
    fn antiderivative_of_constant() {
        let f = ExpPolyMatrix::constant(identity(1));
        let g = f.antiderivative();
        let expected = ExpPolyMatrix::from_poly(vec![DMatrix::zeros(1, 1), identity(1)]).unwrap();
        assert!(g.coeff_eq(&expected));
    }

    #[test]
    fn antiderivative_then_differentiate_roundtrips_integer_coeffs() {
        // Small-integer coefficients divide by 1..=6 and multiply back
        // without rounding, so the inverse pair is bit-exact here.
        let mut rng = rng_from_seed(11);
        for _ in 0..20 {
            let poly: Vec<DMatrix<f64>> = (0..6)
                .map(|_| DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-9i32..=9) as f64))
                .collect();
            let f = ExpPolyMatrix::from_poly(poly).unwrap();
            assert!(f.antiderivative().differentiate().coeff_eq(&f));
        }
    }

    #[test]
    fn base_block_antiderivative_roundtrip_exact() {
        // d-fold antiderivative of u_m u_m^T followed by d derivatives
        // recovers the block bit-exactly on the verified (m, d) domain.
        for m in 1..=4usize {
            for d in 0..=2usize {
                let u = monomial_vector(m);
                let b = poly_outer_product(&u, &u).unwrap();
                let roundtrip = b.antiderivative_n(d).derivative_n(d);
                assert!(roundtrip.coeff_eq(&b), "round trip failed for m={m}, d={d}");
            }
        }
    }

    #[test]
    fn l_sequence_constant_difference() {
        // W = e^t C + L1 with constant L1 -> [L1, 0, 0, ...]
        let u = e1(4);
        let l1c = &u * u.transpose() * 2.5;
        let w = ExpPolyMatrix::from_parts(Some(identity(4)), vec![l1c.clone()]).unwrap();
        let ls = l_sequence(&w, 4).unwrap();
        assert!(ls[0].coeff_eq(&ExpPolyMatrix::constant(l1c)));
        for l in &ls[1..] {
            assert!(l.is_zero());
        }
    }

    #[test]
    fn l_sequence_pure_exp_is_zero() {
        let w = ExpPolyMatrix::from_exp(identity(3));
        for l in l_sequence(&w, 5).unwrap() {
            assert!(l.is_zero());
        }
    }

    #[test]
    fn l_sequence_highorder_closed_form_pointwise() {
        // W = e^t C + t^k uv^T:
        // L_i(t) = k!/(k-i+1)! t^{k-i} (t - k + i - 1) uv^T.
        let k = 4usize;
        let u = e1(3);
        let uv = &u * u.transpose();
        let mut poly = vec![DMatrix::zeros(3, 3); k + 1];
        poly[k] = uv.clone();
        let w = ExpPolyMatrix::from_parts(Some(identity(3)), poly).unwrap();
        let ls = l_sequence(&w, k).unwrap();
        let factorial = |n: usize| (1..=n).product::<usize>() as f64;
        for (idx, l) in ls.iter().enumerate() {
            let i = idx + 1;
            let coef = factorial(k) / factorial(k - i + 1);
            for &t in &[0.3f64, 0.7, 1.1, 1.6, 1.9] {
                let scalar = coef * t.powi((k - i) as i32) * (t - (k - i + 1) as f64);
                let expected = &uv * scalar;
                let got = l.evaluate(t);
                assert_relative_eq!(got[(0, 0)], expected[(0, 0)], max_relative = 1e-12);
                assert_eq!(got[(1, 1)], 0.0);
            }
        }
    }

    #[test]
    fn l_sequence_consecutive_derivative_identity_exact() {
        let mut rng = rng_from_seed(3);
        let poly: Vec<DMatrix<f64>> = (0..5)
            .map(|_| DMatrix::from_fn(4, 4, |_, _| rng.gen::<f64>() - 0.5))
            .collect();
        let w =
            ExpPolyMatrix::from_parts(Some(DMatrix::from_fn(4, 4, |_, _| rng.gen::<f64>())), poly)
                .unwrap();
        let ls = l_sequence(&w, 6).unwrap();
        for i in 0..ls.len() - 1 {
            assert!(ls[i + 1].coeff_eq(&ls[i].differentiate()));
        }
    }

    #[test]
    fn l_sequence_matches_derivative_difference_form() {
        // L_i == W^{(i-1)} - W^{(i)}: bit-exact for integer coefficients.
        let mut rng = rng_from_seed(5);
        let poly: Vec<DMatrix<f64>> = (0..5)
            .map(|_| DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-4i32..=4) as f64))
            .collect();
        let w = ExpPolyMatrix::from_poly(poly).unwrap();
        let ls = l_sequence(&w, 5).unwrap();
        for (idx, l) in ls.iter().enumerate() {
            let direct = w.derivative_n(idx).sub(&w.derivative_n(idx + 1)).unwrap();
            assert!(l.coeff_eq(&direct), "mismatch at i = {}", idx + 1);
        }
    }

    #[test]
    fn numeric_rank_of_introductory_example() {
        // L2 of the 2x2 Vandermonde example at t = 0.5: [[0,1],[1,1]].
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(numeric_rank(&m, default_rank_tolerance(2, 2)), 2);
    }

    #[test]
    fn numeric_rank_zero_matrix() {
        assert_eq!(
            numeric_rank(&DMatrix::zeros(3, 3), default_rank_tolerance(3, 3)),
            0
        );
    }

    #[test]
    fn numeric_rank_factored_product() {
        let mut rng = rng_from_seed(17);
        let a = DMatrix::from_fn(8, 3, |_, _| rng.gen::<f64>() - 0.5);
        let b = DMatrix::from_fn(3, 8, |_, _| rng.gen::<f64>() - 0.5);
        assert_eq!(numeric_rank(&(a * b), default_rank_tolerance(8, 8)), 3);
    }

    #[test]
    fn numeric_rank_transpose_invariant() {
        let mut rng = rng_from_seed(23);
        for _ in 0..10 {
            let r = rng.gen_range(0..=4);
            let a = DMatrix::from_fn(6, r, |_, _| rng.gen::<f64>() - 0.5);
            let b = DMatrix::from_fn(r, 5, |_, _| rng.gen::<f64>() - 0.5);
            let m = a * b;
            let tol = default_rank_tolerance(6, 5);
            assert_eq!(numeric_rank(&m, tol), numeric_rank(&m.transpose(), tol));
        }
    }

    #[test]
    fn generic_rank_of_vandermonde_outer_product() {
        let u = monomial_vector(3);
        let f = poly_outer_product(&u, &u).unwrap();
        assert_eq!(generic_rank(&f, &SampleSpec::default_for(&f)), 1);
    }

    #[test]
    fn generic_rank_zero_function() {
        let f = ExpPolyMatrix::zero(4, 4);
        assert_eq!(generic_rank(&f, &SampleSpec::default_for(&f)), 0);
    }

    #[test]
    fn generic_rank_second_derivative_of_quartic_outer_product() {
        // d^2/dt^2 (u u^T) with u = [1, t, t^2, t^3]: three Leibniz terms.
        let u = monomial_vector(4);
        let f = poly_outer_product(&u, &u).unwrap().derivative_n(2);
        assert_eq!(generic_rank(&f, &SampleSpec::default_for(&f)), 3);
    }

    #[test]
    fn generic_rank_scalar_invariance() {
        let u = monomial_vector(4);
        let f = poly_outer_product(&u, &u).unwrap().derivative_n(1);
        let spec = SampleSpec::default_for(&f);
        let r = generic_rank(&f, &spec);
        for s in [3.7, -0.004, 811.0] {
            assert_eq!(generic_rank(&f.scale(s), &spec), r);
        }
    }

    #[test]
    fn differentiate_linearity_exact_on_integers() {
        let mut rng = rng_from_seed(31);
        for _ in 0..20 {
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                let deg = rng.gen_range(1..5);
                ExpPolyMatrix::from_parts(
                    Some(DMatrix::from_fn(3, 3, |_, _| {
                        rng.gen_range(-5i32..=5) as f64
                    })),
                    (0..deg)
                        .map(|_| DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-5i32..=5) as f64))
                        .collect(),
                )
                .unwrap()
            };
            let f = gen(&mut rng);
            let g = gen(&mut rng);
            let (a, b) = (
                rng.gen_range(-4i32..=4) as f64,
                rng.gen_range(-4i32..=4) as f64,
            );
            let lhs = f.scale(a).add(&g.scale(b)).unwrap().differentiate();
            let rhs = f
                .differentiate()
                .scale(a)
                .add(&g.differentiate().scale(b))
                .unwrap();
            assert!(lhs.coeff_eq(&rhs));
        }
    }

    #[test]
    fn derivative_matches_central_finite_differences() {
        let mut rng = rng_from_seed(41);
        let poly: Vec<DMatrix<f64>> = (0..6)
            .map(|_| DMatrix::from_fn(4, 4, |_, _| rng.gen::<f64>() - 0.5))
            .collect();
        let f = ExpPolyMatrix::from_parts(
            Some(DMatrix::from_fn(4, 4, |_, _| rng.gen::<f64>() - 0.5)),
            poly,
        )
        .unwrap();
        let fp = f.differentiate();
        let h = 1e-5;
        for _ in 0..10 {
            let t = rng.gen_range(0.25..2.0);
            let fd = (f.evaluate(t + h) - f.evaluate(t - h)) / (2.0 * h);
            let exact = fp.evaluate(t);
            let scale = exact.iter().map(|x| x.abs()).fold(1.0, f64::max);
            let err = (&fd - &exact).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(err / scale < 1e-6, "fd error {err} at t = {t}");
        }
    }

    #[test]
    fn trailing_zero_coefficients_are_trimmed() {
        let f = ExpPolyMatrix::from_poly(vec![
            identity(2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        ])
        .unwrap();
        assert_eq!(f.degree(), Some(0));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let err = ExpPolyMatrix::from_poly(vec![identity(2), identity(3)]);
        assert!(err.is_err());
    }

    #[test]
    fn block_diag_evaluates_blockwise() {
        let a = ExpPolyMatrix::constant(identity(2));
        let u = monomial_vector(2);
        let b = poly_outer_product(&u, &u).unwrap();
        let f = ExpPolyMatrix::block_diag(&[a, b]);
        assert_eq!(f.rows(), 4);
        let m = f.evaluate(2.0);
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(2, 3)], 2.0);
        assert_eq!(m[(3, 3)], 4.0);
        assert_eq!(m[(0, 2)], 0.0);
    }
}
