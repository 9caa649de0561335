//! Backward-error residuals for computed eigenvalues of the quartic
//! matrix polynomial.
//!
//! For an eigenvalue estimate `lambda` the residual is
//! `sigma_min(P(lambda)) / (|A|_F + |B|_F |l| + |C|_F |l|^2 + |D|_F |l|^3 + |E|_F |l|^4)`,
//! the optimal normwise backward error of `lambda` as a root of
//! `P(s) = A + B s + C s^2 + D s^3 + E s^4`.
//!
//! The smallest singular value is obtained by inverse iteration on
//! `P^H P` via one complex LU factorization: the iterate converges to the
//! right singular vector `v` of `sigma_min`, and `|P v|` is reported. The
//! result is an upper bound on `sigma_min` that is tight once the
//! iteration has converged, which takes one or two steps here because
//! computed eigenvalues leave `P(lambda)` within rounding of singular.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::PolyMatrixSet;

const MAX_INVERSE_ITERATIONS: usize = 24;
const INVERSE_ITERATION_RTOL: f64 = 1e-10;

/// Evaluate `P(lambda)` by Horner's rule on the real coefficient matrices.
pub fn eval_poly(pms: &PolyMatrixSet, lambda: Complex64) -> DMatrix<Complex64> {
    let dim = pms.a_mat.nrows();
    let mut acc: DMatrix<Complex64> = pms.e_mat.map(|v| Complex64::new(v, 0.0));
    for coeff in [&pms.d_mat, &pms.c_mat, &pms.b_mat, &pms.a_mat] {
        let mut next = DMatrix::<Complex64>::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..dim {
                next[(i, j)] = acc[(i, j)] * lambda + Complex64::new(coeff[(i, j)], 0.0);
            }
        }
        acc = next;
    }
    acc
}

/// Denominator of the backward-error formula at `|lambda|`, from the
/// Frobenius norms of the five coefficient matrices.
pub fn backward_error_scale(pms: &PolyMatrixSet, lambda_abs: f64) -> f64 {
    let norms = [
        pms.a_mat.norm(),
        pms.b_mat.norm(),
        pms.c_mat.norm(),
        pms.d_mat.norm(),
        pms.e_mat.norm(),
    ];
    let mut pow = 1.0;
    let mut den = 0.0;
    for norm in norms {
        den += norm * pow;
        pow *= lambda_abs;
    }
    den
}

/// Backward-error residual of each eigenvalue estimate.
pub fn residuals(pms: &PolyMatrixSet, eigenvalues: &[Complex64]) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|&lambda| {
            let p = eval_poly(pms, lambda);
            let sigma = smallest_singular_value(&p);
            let den = backward_error_scale(pms, lambda.norm());
            if den == 0.0 {
                0.0
            } else {
                sigma / den
            }
        })
        .collect()
}

/// Smallest singular value of a square complex matrix by inverse power
/// iteration through an LU factorization.
pub fn smallest_singular_value(matrix: &DMatrix<Complex64>) -> f64 {
    let n = matrix.nrows();
    if n == 0 {
        return 0.0;
    }
    let lu = match ComplexLu::factor(matrix.clone()) {
        Some(lu) => lu,
        None => return 0.0, // exactly singular
    };
    let mut v = DVector::from_element(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0));
    let mut sigma = f64::INFINITY;
    for _ in 0..MAX_INVERSE_ITERATIONS {
        let u = lu.solve_adjoint(&v);
        let y = lu.solve(&u);
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            return 0.0; // numerically singular: sigma_min below underflow
        }
        v = y / Complex64::new(norm, 0.0);
        let next = (matrix * &v).norm();
        let converged = (sigma - next).abs() <= INVERSE_ITERATION_RTOL * next;
        sigma = next;
        if converged {
            break;
        }
    }
    sigma
}

/// Complex LU factorization with partial pivoting.
struct ComplexLu {
    lu: DMatrix<Complex64>,
    piv: Vec<usize>,
}

impl ComplexLu {
    /// Returns `None` when a pivot is exactly zero (matrix singular to
    /// working precision).
    fn factor(mut a: DMatrix<Complex64>) -> Option<Self> {
        let n = a.nrows();
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].norm_sqr();
            for i in k + 1..n {
                let mag = a[(i, k)].norm_sqr();
                if mag > best {
                    best = mag;
                    p = i;
                }
            }
            if best == 0.0 {
                return None;
            }
            piv[k] = p;
            if p != k {
                a.swap_rows(k, p);
            }
            let pivot = a[(k, k)];
            for i in k + 1..n {
                let factor = a[(i, k)] / pivot;
                a[(i, k)] = factor;
                for j in k + 1..n {
                    let sub = factor * a[(k, j)];
                    a[(i, j)] -= sub;
                }
            }
        }
        Some(Self { lu: a, piv })
    }

    /// Solve `A x = b`.
    fn solve(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = b.len();
        let mut x = b.clone();
        for k in 0..n {
            x.swap_rows(k, self.piv[k]);
        }
        for i in 1..n {
            let mut sum = x[i];
            for j in 0..i {
                sum -= self.lu[(i, j)] * x[j];
            }
            x[i] = sum;
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for j in i + 1..n {
                sum -= self.lu[(i, j)] * x[j];
            }
            x[i] = sum / self.lu[(i, i)];
        }
        x
    }

    /// Solve `A^H x = b`.
    fn solve_adjoint(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = b.len();
        let mut x = b.clone();
        // U^H z = b (U^H is lower triangular with conjugated entries).
        for i in 0..n {
            let mut sum = x[i];
            for j in 0..i {
                sum -= self.lu[(j, i)].conj() * x[j];
            }
            x[i] = sum / self.lu[(i, i)].conj();
        }
        // L^H w = z (L^H is unit upper triangular).
        for i in (0..n).rev() {
            let mut sum = x[i];
            for j in i + 1..n {
                sum -= self.lu[(j, i)].conj() * x[j];
            }
            x[i] = sum;
        }
        // x = Perm^T w: undo the row swaps in reverse order.
        for k in (0..n).rev() {
            x.swap_rows(k, self.piv[k]);
        }
        x
    }
}
