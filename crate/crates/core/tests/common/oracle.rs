//! Exhaustive solver for tiny L1-constrained least-squares problems.
//!
//! Every support set is tried; on each one the minimizer is either the plain
//! least-squares fit (slack constraint) or the fit with the coefficients
//! summing to `t` (tight constraint). The best feasible point is the global
//! minimum of the convex problem.

use nalgebra::{DMatrix, DVector};

fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    (y - x * beta).norm_squared()
}

/// `min ‖y − Xβ‖²` over `β ≥ 0, Σβ ≤ t`.
pub fn nonnegative_lasso(x: &DMatrix<f64>, y: &[f64], t: f64) -> DVector<f64> {
    let m = x.ncols();
    let y = DVector::from_column_slice(y);
    let mut best = DVector::zeros(m);
    let mut best_obj = objective(x, &y, &best);
    for mask in 1u32..(1 << m) {
        let s: Vec<usize> = (0..m).filter(|&j| mask & (1 << j) != 0).collect();
        let a = x.select_columns(&s);
        let g = a.tr_mul(&a);
        let Some(chol) = g.clone().cholesky() else { continue };
        let b = a.tr_mul(&y);
        let ones = DVector::from_element(s.len(), 1.0);
        let gib = chol.solve(&b);
        let gi1 = chol.solve(&ones);
        let mut tries = vec![gib.clone()];
        let lambda = (gib.sum() - t) / gi1.sum();
        if lambda >= 0.0 {
            tries.push(&gib - &gi1 * lambda);
        }
        for z in tries {
            if z.iter().any(|&v| v <= 0.0) || z.sum() > t * (1.0 + 1e-12) + 1e-12 {
                continue;
            }
            let mut beta = DVector::zeros(m);
            for (i, &j) in s.iter().enumerate() {
                beta[j] = z[i];
            }
            let obj = objective(x, &y, &beta);
            if obj < best_obj {
                best_obj = obj;
                best = beta;
            }
        }
    }
    best
}

/// `min ‖y − Xβ‖²` over `‖β‖₁ ≤ t`, through the split `β = β⁺ − β⁻`.
pub fn signed_lasso(x: &DMatrix<f64>, y: &[f64], t: f64) -> DVector<f64> {
    let m = x.ncols();
    let split = DMatrix::from_fn(x.nrows(), 2 * m, |r, c| if c < m { x[(r, c)] } else { -x[(r, c - m)] });
    let b = nonnegative_lasso(&split, y, t);
    DVector::from_fn(m, |j, _| b[j] - b[j + m])
}
