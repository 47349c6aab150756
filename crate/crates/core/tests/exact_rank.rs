//! Independent exact-arithmetic rank oracle.
//!
//! Integer-coefficient matrix functions evaluated at dyadic points have
//! dyadic entries, so scaling by a power of two gives an integer matrix
//! whose rank can be computed exactly with fraction-free (Bareiss)
//! elimination over arbitrary-precision integers. That route shares nothing
//! with the SVD-based estimator and pins its answers down.

use cascade_core::rank_dynamics::{
    base_block, construct_vandermonde_counterexample, monomial_coeffs, BaseBlockSpec,
};
use cascade_core::{default_rank_tolerance, numeric_rank, poly_outer_product, ExpPolyMatrix};
use num_bigint::BigInt;

/// Rank over the integers via fraction-free Gaussian elimination.
fn bareiss_rank(mut m: Vec<Vec<BigInt>>) -> usize {
    let rows = m.len();
    if rows == 0 {
        return 0;
    }
    let cols = m[0].len();
    let mut rank = 0;
    let mut prev = BigInt::from(1);
    let mut row = 0;
    for col in 0..cols {
        if row == rows {
            break;
        }
        let Some(pivot_row) = (row..rows).find(|&r| m[r][col] != BigInt::from(0)) else {
            continue;
        };
        m.swap(row, pivot_row);
        for r in (row + 1)..rows {
            for c in (col + 1)..cols {
                let val = (&m[row][col] * &m[r][c] - &m[r][col] * &m[row][c]) / &prev;
                m[r][c] = val;
            }
            m[r][col] = BigInt::from(0);
        }
        prev = m[row][col].clone();
        row += 1;
        rank += 1;
    }
    rank
}

/// Evaluates an integer-coefficient polynomial matrix at `t = num / 2^s`,
/// scaled by `2^(s * degree)` so every entry is an exact integer.
fn dyadic_eval_scaled(f: &ExpPolyMatrix, num: i64, s: u32) -> Vec<Vec<BigInt>> {
    assert!(!f.has_exp_part(), "oracle handles polynomial parts only");
    let deg = f.poly_coeffs().len().max(1) - 1;
    let mut out = vec![vec![BigInt::from(0); f.cols()]; f.rows()];
    for (j, coeff) in f.poly_coeffs().iter().enumerate() {
        // contribution of C_j t^j scaled by 2^(s deg): C_j num^j 2^(s (deg - j))
        let factor =
            BigInt::from(num).pow(j as u32) * (BigInt::from(1) << (s as usize * (deg - j)));
        for r in 0..f.rows() {
            for c in 0..f.cols() {
                let v = coeff[(r, c)];
                assert_eq!(v.fract(), 0.0, "coefficient {v} is not an integer");
                out[r][c] += BigInt::from(v as i64) * &factor;
            }
        }
    }
    out
}

#[test]
fn vandermonde_derivative_ranks_match_exact_arithmetic() {
    let l1 = construct_vandermonde_counterexample(8, 6).unwrap();
    let tol = default_rank_tolerance(8, 8);
    let mut cur = l1;
    for i in 1..=6usize {
        let exact = bareiss_rank(dyadic_eval_scaled(&cur, 1, 1)); // t = 1/2
        let numeric = numeric_rank(&cur.evaluate(0.5), tol);
        assert_eq!(exact, i, "exact rank of order {} at t = 1/2", i - 1);
        assert_eq!(numeric, exact, "SVD estimate disagrees at order {}", i - 1);
        cur = cur.differentiate();
    }
}

#[test]
fn quartic_outer_product_second_derivative_rank_is_three() {
    // d^2/dt^2 (u u^T) with u = [1, t, t^2, t^3]: exact rank 3 at t = 1/2
    let u = monomial_coeffs(4);
    let l3 = poly_outer_product(&u, &u).unwrap().derivative_n(2);
    assert_eq!(bareiss_rank(dyadic_eval_scaled(&l3, 1, 1)), 3);
    let tol = default_rank_tolerance(4, 4);
    assert_eq!(numeric_rank(&l3.evaluate(0.5), tol), 3);
}

#[test]
fn base_block_ranks_match_exact_arithmetic() {
    // core blocks have integer coefficients; check a few derivative orders
    // at t = 3/2 against the exact route
    for m in 2..=4usize {
        let b = base_block(&BaseBlockSpec { m, d: 0 }).unwrap();
        let tol = default_rank_tolerance(m, m);
        let mut cur = b;
        for order in 0..2 * m {
            let exact = bareiss_rank(dyadic_eval_scaled(&cur, 3, 1));
            let numeric = numeric_rank(&cur.evaluate(1.5), tol);
            assert_eq!(numeric, exact, "m={m}, order {order}");
            cur = cur.differentiate();
        }
    }
}

#[test]
fn bareiss_oracle_sanity() {
    let int = |v: i64| BigInt::from(v);
    // full rank 2x2
    assert_eq!(
        bareiss_rank(vec![vec![int(1), int(2)], vec![int(3), int(4)]]),
        2
    );
    // proportional rows
    assert_eq!(
        bareiss_rank(vec![vec![int(2), int(4)], vec![int(1), int(2)]]),
        1
    );
    // zero matrix
    assert_eq!(bareiss_rank(vec![vec![int(0); 3]; 3]), 0);
    // rank 2 in a 3x3 with a zero column
    assert_eq!(
        bareiss_rank(vec![
            vec![int(0), int(1), int(5)],
            vec![int(0), int(2), int(3)],
            vec![int(0), int(4), int(6)],
        ]),
        2
    );
}
