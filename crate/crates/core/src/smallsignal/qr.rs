//! Dense nonsymmetric eigenvalue solver: Parlett-Reinsch balancing,
//! Householder reduction to Hessenberg form, then the Francis double-shift
//! QR iteration. Eigenvalues only; derived from the classic EISPACK/Jama
//! routines (public domain).

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::SmallSignalError;

/// QR sweeps allowed per unit of matrix dimension before the solver gives
/// up with `NoConvergence`.
pub const SWEEPS_PER_DIM: usize = 100;

/// All eigenvalues of a square real matrix, sorted by ascending real part
/// (imaginary part as tie-break). Non-real eigenvalues come out in exact
/// conjugate pairs.
pub fn eigenvalues(matrix: &DMatrix<f64>) -> Result<Vec<Complex64>, SmallSignalError> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(SmallSignalError::DimensionMismatch {
            context: format!("eigenvalues of a {}x{} matrix", matrix.nrows(), matrix.ncols()),
        });
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(SmallSignalError::NonFiniteMatrix);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = matrix.clone();
    balance(&mut h);
    hessenberg(&mut h);
    let mut eigs = hqr(&mut h, SWEEPS_PER_DIM * n)?;
    eigs.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).expect("finite eigenvalues"));
    Ok(eigs)
}

/// Parlett-Reinsch balancing with radix-2 scale factors (exact in binary
/// floating point, so this is a pure similarity transform).
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let radix: f64 = 2.0;
    let radix_sq = radix * radix;
    loop {
        let mut converged = true;
        for i in 0..n {
            let mut c: f64 = (0..n).filter(|&j| j != i).map(|j| a[(j, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= radix_sq;
            }
            g = r * radix;
            while c >= g {
                f /= radix;
                c /= radix_sq;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= g;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
        if converged {
            return;
        }
    }
}

/// Householder reduction to upper Hessenberg form, in place, without
/// accumulating the transform.
fn hessenberg(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    let mut ort = vec![0.0f64; n];
    for m in 1..n - 1 {
        let scale: f64 = (m..n).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..n).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;

        // H <- (I - u u^T / hh) H (I - u u^T / hh)
        for j in m..n {
            let mut f = 0.0;
            for i in (m..n).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..n {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..n {
            let mut f = 0.0;
            for j in (m..n).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..n {
                h[(i, j)] -= f * ort[j];
            }
        }
        h[(m, m - 1)] = scale * g;
    }
    // Entries below the first subdiagonal are structurally zero from here on.
    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix. `budget` caps the
/// total number of QR sweeps; exceeding it is an error, never a silent
/// partial answer.
fn hqr(h: &mut DMatrix<f64>, budget: usize) -> Result<Vec<Complex64>, SmallSignalError> {
    let nn = h.nrows();
    let eps = f64::EPSILON;
    let mut eigs = vec![Complex64::ZERO; nn];

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }
    if norm == 0.0 {
        return Ok(eigs);
    }

    let mut en = nn as isize - 1;
    let mut exshift = 0.0;
    let mut iter = 0usize;
    let mut sweeps_left = budget;

    while en >= 0 {
        let n = en as usize;

        // Look for a single small subdiagonal element.
        let mut l = n;
        while l > 0 {
            let mut s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            h[(n, n)] += exshift;
            eigs[n] = Complex64::new(h[(n, n)], 0.0);
            en -= 1;
            iter = 0;
        } else if l + 1 == n {
            // Two roots found.
            let w = h[(n, n - 1)] * h[(n - 1, n)];
            let p = (h[(n - 1, n - 1)] - h[(n, n)]) / 2.0;
            let q = p * p + w;
            let z = q.abs().sqrt();
            h[(n, n)] += exshift;
            h[(n - 1, n - 1)] += exshift;
            let x = h[(n, n)];
            if q >= 0.0 {
                // Real pair.
                let z = if p >= 0.0 { p + z } else { p - z };
                let r1 = x + z;
                let r2 = if z != 0.0 { x - w / z } else { r1 };
                eigs[n - 1] = Complex64::new(r1, 0.0);
                eigs[n] = Complex64::new(r2, 0.0);
            } else {
                // Complex conjugate pair.
                eigs[n - 1] = Complex64::new(x + p, z);
                eigs[n] = Complex64::new(x + p, -z);
            }
            en -= 2;
            iter = 0;
        } else {
            // No convergence yet: form a shift and do a double QR sweep.
            if sweeps_left == 0 {
                return Err(SmallSignalError::NoConvergence { dim: nn, sweeps: budget });
            }
            sweeps_left -= 1;

            let mut x = h[(n, n)];
            let mut y = h[(n - 1, n - 1)];
            let mut w = h[(n, n - 1)] * h[(n - 1, n)];

            if iter == 10 {
                // Wilkinson's ad hoc shift. Applied to every unconverged
                // row so exshift stays consistent across later deflations.
                exshift += x;
                for i in 0..=n {
                    h[(i, i)] -= x;
                }
                let s = h[(n, n - 1)].abs() + h[(n - 1, n - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                let mut s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=n {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = 0.964;
                    w = 0.964;
                }
            }
            iter += 1;

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = h[(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - rr - ss;
                r = h[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=n {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n, columns m..=n.
            for k in m..n {
                let notlast = k != n - 1;
                let mut x_col = 0.0;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x_col = p.abs() + q.abs() + r.abs();
                    if x_col == 0.0 {
                        continue;
                    }
                    p /= x_col;
                    q /= x_col;
                    r /= x_col;
                }
                let mut s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s == 0.0 {
                    continue;
                }
                if k != m {
                    h[(k, k - 1)] = -s * x_col;
                } else if l != m {
                    h[(k, k - 1)] = -h[(k, k - 1)];
                }
                p += s;
                let gx = p / s;
                let gy = q / s;
                let gz = r / s;
                q /= p;
                r /= p;

                // Row modification.
                for j in k..=n {
                    let mut f = h[(k, j)] + q * h[(k + 1, j)];
                    if notlast {
                        f += r * h[(k + 2, j)];
                        h[(k + 2, j)] -= f * gz;
                    }
                    h[(k, j)] -= f * gx;
                    h[(k + 1, j)] -= f * gy;
                }

                // Column modification.
                for i in l..=n.min(k + 3) {
                    let mut f = gx * h[(i, k)] + gy * h[(i, k + 1)];
                    if notlast {
                        f += gz * h[(i, k + 2)];
                        h[(i, k + 2)] -= f * r;
                    }
                    h[(i, k)] -= f;
                    h[(i, k + 1)] -= f * q;
                }
            }
        }
    }
    Ok(eigs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn companion(coeffs_low_to_high_monic: &[f64]) -> DMatrix<f64> {
        // coeffs has length n (leading coefficient 1 implied).
        let n = coeffs_low_to_high_monic.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            m[(i, i + 1)] = 1.0;
        }
        for j in 0..n {
            m[(n - 1, j)] = -coeffs_low_to_high_monic[j];
        }
        m
    }

    #[test]
    fn factored_quartic_roots() {
        // (s+1)(s+2)(s+3)(s+4) = 24 + 50 s + 35 s^2 + 10 s^3 + s^4
        let m = companion(&[24.0, 50.0, 35.0, 10.0]);
        let eigs = eigenvalues(&m).unwrap();
        let expected = [-4.0, -3.0, -2.0, -1.0];
        for (e, want) in eigs.iter().zip(expected) {
            assert!((e.re - want).abs() < 1e-8, "{e} vs {want}");
            assert!(e.im.abs() < 1e-8);
        }
    }

    #[test]
    fn pure_imaginary_pair() {
        let m = companion(&[1.0, 0.0]); // s^2 + 1
        let eigs = eigenvalues(&m).unwrap();
        assert_relative_eq!(eigs[0].im, -1.0, epsilon = 1e-10);
        assert_relative_eq!(eigs[1].im, 1.0, epsilon = 1e-10);
        assert!(eigs[0].re.abs() < 1e-10);
    }

    #[test]
    fn tiny_sizes() {
        assert!(eigenvalues(&DMatrix::zeros(0, 0)).unwrap().is_empty());
        let one = DMatrix::from_row_slice(1, 1, &[3.5]);
        assert_eq!(eigenvalues(&one).unwrap(), vec![Complex64::new(3.5, 0.0)]);
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let eigs = eigenvalues(&two).unwrap();
        assert_relative_eq!(eigs[0].im, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(eigenvalues(&m), Err(SmallSignalError::NonFiniteMatrix)));
    }

    #[test]
    fn trace_and_power_sums_match() {
        // sum(lambda) = tr(M) and sum(lambda^2) = tr(M^2) catch gross errors
        // through a route independent of the QR iteration.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 3 + (trial % 10);
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0f64));
            let eigs = eigenvalues(&m).unwrap();
            let sum: Complex64 = eigs.iter().sum();
            let sum_sq: Complex64 = eigs.iter().map(|e| e * e).sum();
            let tr: f64 = (0..n).map(|i| m[(i, i)]).sum();
            let m2 = &m * &m;
            let tr2: f64 = (0..n).map(|i| m2[(i, i)]).sum();
            assert_relative_eq!(sum.re, tr, epsilon = 1e-9 * (n as f64));
            assert!(sum.im.abs() < 1e-9 * n as f64);
            assert_relative_eq!(sum_sq.re, tr2, epsilon = 1e-8 * (n as f64));
        }
    }

    #[test]
    fn conjugate_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = 8;
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-10.0..10.0f64));
            let eigs = eigenvalues(&m).unwrap();
            for e in &eigs {
                if e.im != 0.0 {
                    assert!(
                        eigs.iter().any(|o| o.re == e.re && o.im == -e.im),
                        "missing conjugate partner of {e}"
                    );
                }
            }
        }
    }

    #[test]
    fn badly_scaled_matrix_balances() {
        // Diagonal similarity scaling must not perturb the spectrum.
        let base = companion(&[24.0, 50.0, 35.0, 10.0]);
        let scales = [1.0, 1e4, 1e-3, 1e6];
        let mut scaled = base.clone();
        for i in 0..4 {
            for j in 0..4 {
                scaled[(i, j)] = base[(i, j)] * scales[i] / scales[j];
            }
        }
        let eigs = eigenvalues(&scaled).unwrap();
        for (e, want) in eigs.iter().zip([-4.0, -3.0, -2.0, -1.0]) {
            assert!((e.re - want).abs() < 1e-7, "{e} vs {want}");
        }
    }
}
