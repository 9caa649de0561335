//! Small-signal stability of a droop-controlled network.
//!
//! The system eigenvalues are the roots of the quartic matrix polynomial
//!
//! ```text
//! [A + B s + C s^2 + D s^3 + E s^4] [dtheta; dV] = 0
//! ```
//!
//! whose 2Nx2N coefficients are assembled from the susceptance matrix, the
//! R/X ratio, the droop-inverse matrices and the power-filter time
//! constant ([`assemble`]). Because the lower-right block of E is zero,
//! the problem linearizes into a 7Nx7N first-order state matrix with no
//! infinite eigenvalues ([`linearize`]); its spectrum is computed with a
//! dense QR solver ([`eig`]) and classified by the sign of the real parts
//! ([`classify`]).

mod qr;
mod residual;

pub use qr::{eigenvalues, SWEEPS_PER_DIM};
pub use residual::{backward_error_scale, eval_poly, smallest_singular_value};

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{droop_inverse_matrices, AdmittanceModel, DroopSetting, NetModelError};

/// Backward-error bound every reported eigenvalue must satisfy.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Relative scale of the zero-mode tolerance: eigenvalues with
/// `|lambda| <= 1e-6 * (1 + max |lambda|)` count as zero modes.
pub const ZERO_MODE_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SmallSignalError {
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("leading block is singular; droop floor should prevent this")]
    SingularLeadingBlock,
    #[error("eigensolver did not converge for dim {dim} within {sweeps} sweeps")]
    NoConvergence { dim: usize, sweeps: usize },
    #[error("eigenvalue backward error {residual:.3e} exceeds {RESIDUAL_TOL:.0e}")]
    ResidualTooLarge { residual: f64 },
    #[error("matrix contains non-finite entries")]
    NonFiniteMatrix,
    #[error(transparent)]
    Net(#[from] NetModelError),
}

/// The five real coefficient matrices of the quartic eigenproblem, plus
/// the scalars they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrixSet {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c_mat: DMatrix<f64>,
    pub d_mat: DMatrix<f64>,
    pub e_mat: DMatrix<f64>,
    /// Source count N; matrices are 2Nx2N.
    pub n: usize,
    /// Nominal power frequency in rad/s.
    pub omega0: f64,
    /// Power-filter time constant T = 1/omega_c in seconds.
    pub t_filt: f64,
}

impl PolyMatrixSet {
    /// Build directly from coefficient matrices. No closed-form checks are
    /// performed; intended for diagnostics and tests. `assemble` is the
    /// production constructor.
    pub fn from_raw(
        a_mat: DMatrix<f64>,
        b_mat: DMatrix<f64>,
        c_mat: DMatrix<f64>,
        d_mat: DMatrix<f64>,
        e_mat: DMatrix<f64>,
        omega0: f64,
        t_filt: f64,
    ) -> Result<Self, SmallSignalError> {
        let dim = a_mat.nrows();
        for m in [&a_mat, &b_mat, &c_mat, &d_mat, &e_mat] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(SmallSignalError::DimensionMismatch {
                    context: "coefficient matrices must share one square shape".into(),
                });
            }
        }
        if dim % 2 != 0 {
            return Err(SmallSignalError::DimensionMismatch {
                context: "coefficient matrices must be 2Nx2N".into(),
            });
        }
        Ok(Self { a_mat, b_mat, c_mat, d_mat, e_mat, n: dim / 2, omega0, t_filt })
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Dimension of the linearized state matrix.
    pub fn state_dim(&self) -> usize {
        7 * self.n
    }
}

/// Computed eigenvalues with their backward-error residuals.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub residuals: Vec<f64>,
}

impl Spectrum {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.norm()).fold(0.0, f64::max)
    }
}

/// Stability classification of one droop setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub stable: bool,
    /// Largest real part over eigenvalues that are not zero modes;
    /// `-inf` if every eigenvalue is a zero mode.
    pub max_real_nonzero: f64,
    pub n_zero_modes: usize,
}

/// Assemble the quartic coefficient matrices from an admittance model and
/// a droop setting.
pub fn assemble(
    adm: &AdmittanceModel,
    droops: &DroopSetting,
) -> Result<PolyMatrixSet, SmallSignalError> {
    let n = adm.n_nodes();
    if droops.n_sources() != n {
        return Err(SmallSignalError::DimensionMismatch {
            context: format!("{} nodes vs {} droop entries", n, droops.n_sources()),
        });
    }
    let (l_p, l_q) = droop_inverse_matrices(droops)?;
    let b = &adm.b_mat;
    let rho = adm.rho;
    let omega0 = 2.0 * std::f64::consts::PI * droops.f0;
    let t = 1.0 / droops.omega_c;
    let r2p1 = rho * rho + 1.0;

    let dim = 2 * n;
    let mut a_mat = DMatrix::zeros(dim, dim);
    let mut b_mat = DMatrix::zeros(dim, dim);
    let mut c_mat = DMatrix::zeros(dim, dim);
    let mut d_mat = DMatrix::zeros(dim, dim);
    let mut e_mat = DMatrix::zeros(dim, dim);

    let ct = r2p1 * t + 2.0 * rho / omega0;
    let dt = 1.0 / (omega0 * omega0) + 2.0 * rho * t / omega0;
    let et = t / (omega0 * omega0);

    for i in 0..n {
        for j in 0..n {
            let bij = b[(i, j)];
            a_mat[(i, j)] = -r2p1 * bij;
            a_mat[(i, n + j)] = -rho * r2p1 * bij;
            a_mat[(n + i, j)] = rho * r2p1 * bij;
            a_mat[(n + i, n + j)] = r2p1 * (l_q[(i, j)] - bij);

            b_mat[(i, j)] = r2p1 * l_p[(i, j)];
            b_mat[(i, n + j)] = -r2p1 * bij / omega0;
            b_mat[(n + i, j)] = r2p1 * bij / omega0;
            b_mat[(n + i, n + j)] = ct * l_q[(i, j)];

            c_mat[(i, j)] = ct * l_p[(i, j)];
            c_mat[(n + i, n + j)] = dt * l_q[(i, j)];

            d_mat[(i, j)] = dt * l_p[(i, j)];
            d_mat[(n + i, n + j)] = et * l_q[(i, j)];

            e_mat[(i, j)] = et * l_p[(i, j)];
        }
    }

    Ok(PolyMatrixSet { a_mat, b_mat, c_mat, d_mat, e_mat, n, omega0, t_filt: t })
}

/// Structure-exploiting first-order form of the quartic problem.
///
/// The theta block-row is solved for the fourth derivative and the V
/// block-row for the third, over the state
/// `[dtheta, dtheta', dtheta'', dtheta''', dV, dV', dV'']`. The
/// eigenvalues of the returned 7Nx7N matrix are exactly the finite roots
/// of the polynomial problem.
pub fn linearize(pms: &PolyMatrixSet) -> Result<DMatrix<f64>, SmallSignalError> {
    let n = pms.n;
    let dim = 7 * n;
    let block = |m: &DMatrix<f64>, bi: usize, bj: usize| -> DMatrix<f64> {
        m.view((bi * n, bj * n), (n, n)).into_owned()
    };

    let e11_inv = block(&pms.e_mat, 0, 0)
        .try_inverse()
        .ok_or(SmallSignalError::SingularLeadingBlock)?;
    let d22_inv = block(&pms.d_mat, 1, 1)
        .try_inverse()
        .ok_or(SmallSignalError::SingularLeadingBlock)?;

    let mut m = DMatrix::zeros(dim, dim);
    // Chain rows: theta -> theta', theta' -> theta'', theta'' -> theta''',
    // V -> V', V' -> V''.
    for (row, col) in [(0, 1), (1, 2), (2, 3), (4, 5), (5, 6)] {
        for i in 0..n {
            m[(row * n + i, col * n + i)] = 1.0;
        }
    }
    // theta''' row: -E11^-1 [A11 B11 C11 D11 | A12 B12 0].
    let theta_cols = [
        (0usize, block(&pms.a_mat, 0, 0)),
        (1, block(&pms.b_mat, 0, 0)),
        (2, block(&pms.c_mat, 0, 0)),
        (3, block(&pms.d_mat, 0, 0)),
        (4, block(&pms.a_mat, 0, 1)),
        (5, block(&pms.b_mat, 0, 1)),
    ];
    for (col, blk) in theta_cols {
        let product = -&e11_inv * blk;
        m.view_mut((3 * n, col * n), (n, n)).copy_from(&product);
    }
    // V'' row: -D22^-1 [A21 B21 0 0 | A22 B22 C22].
    let v_cols = [
        (0usize, block(&pms.a_mat, 1, 0)),
        (1, block(&pms.b_mat, 1, 0)),
        (4, block(&pms.a_mat, 1, 1)),
        (5, block(&pms.b_mat, 1, 1)),
        (6, block(&pms.c_mat, 1, 1)),
    ];
    for (col, blk) in v_cols {
        let product = -&d22_inv * blk;
        m.view_mut((6 * n, col * n), (n, n)).copy_from(&product);
    }
    Ok(m)
}

/// Eigenvalues of the linearized problem, each annotated with its
/// backward-error residual against the polynomial coefficients.
pub fn eig(pms: &PolyMatrixSet) -> Result<Spectrum, SmallSignalError> {
    let companion = linearize(pms)?;
    eig_with_companion(pms, &companion)
}

/// As [`eig`], for callers that already hold the linearization.
pub fn eig_with_companion(
    pms: &PolyMatrixSet,
    companion: &DMatrix<f64>,
) -> Result<Spectrum, SmallSignalError> {
    if companion.nrows() != pms.state_dim() {
        return Err(SmallSignalError::DimensionMismatch {
            context: format!(
                "companion is {}x{}, expected {}",
                companion.nrows(),
                companion.ncols(),
                pms.state_dim()
            ),
        });
    }
    let eigs = eigenvalues(companion)?;
    let residuals = residual::residuals(pms, &eigs);
    let spectrum = Spectrum { eigenvalues: eigs, residuals };
    let worst = spectrum.max_residual();
    if !(worst <= RESIDUAL_TOL) {
        return Err(SmallSignalError::ResidualTooLarge { residual: worst });
    }
    Ok(spectrum)
}

/// Apply the stability rule: at most one zero mode (the angle-reference
/// invariance) and strictly negative real parts everywhere else.
pub fn classify(spectrum: &Spectrum) -> StabilityVerdict {
    let tol_zero = ZERO_MODE_REL_TOL * (1.0 + spectrum.max_abs());
    let mut n_zero_modes = 0usize;
    let mut max_real_nonzero = f64::NEG_INFINITY;
    for e in &spectrum.eigenvalues {
        if e.norm() <= tol_zero {
            n_zero_modes += 1;
        } else if e.re > max_real_nonzero {
            max_real_nonzero = e.re;
        }
    }
    StabilityVerdict {
        stable: n_zero_modes <= 1 && max_real_nonzero < 0.0,
        max_real_nonzero,
        n_zero_modes,
    }
}

/// Full pipeline for one operating point.
pub fn classify_point(
    adm: &AdmittanceModel,
    droops: &DroopSetting,
) -> Result<StabilityVerdict, SmallSignalError> {
    let pms = assemble(adm, droops)?;
    let spectrum = eig(&pms)?;
    Ok(classify(&spectrum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_admittance, NetworkConfig};
    use approx::assert_relative_eq;

    fn ring5_nominal_pms() -> PolyMatrixSet {
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        assemble(&adm, &DroopSetting::ring5_nominal()).unwrap()
    }

    #[test]
    fn filter_time_constant() {
        let pms = ring5_nominal_pms();
        assert_relative_eq!(pms.t_filt, 1.0 / 31.41, max_relative = 1e-12);
        assert!((pms.t_filt - 0.031837).abs() < 1e-6);
        assert_relative_eq!(pms.omega0, 100.0 * std::f64::consts::PI, max_relative = 1e-12);
    }

    #[test]
    fn c_block_scalar_multiplier() {
        // rho = 1, T = 1/31.41, omega0 = 100 pi:
        // (rho^2+1) T + 2 rho / omega0 = 0.070041 to the printed precision.
        let pms = ring5_nominal_pms();
        let l_p_00 = 1.0 / 0.0015;
        let ct = pms.c_mat[(0, 0)] / l_p_00;
        assert!((ct - 0.070041).abs() < 1e-5, "ct = {ct}");
    }

    #[test]
    fn e_lower_right_block_is_zero() {
        let pms = ring5_nominal_pms();
        let n = pms.n;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(pms.e_mat[(n + i, n + j)], 0.0);
            }
        }
    }

    #[test]
    fn off_diagonal_blocks_of_cde_are_zero() {
        let pms = ring5_nominal_pms();
        let n = pms.n;
        for m in [&pms.c_mat, &pms.d_mat, &pms.e_mat] {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m[(i, n + j)], 0.0);
                    assert_eq!(m[(n + i, j)], 0.0);
                }
            }
        }
    }

    /// Decoupled scalar surrogate: theta carries a chosen quartic, V a
    /// chosen cubic, by direct construction of the coefficient set.
    fn scalar_surrogate(quartic: [f64; 5], cubic: [f64; 4]) -> PolyMatrixSet {
        let diag2 = |a: f64, b: f64| DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
        PolyMatrixSet::from_raw(
            diag2(quartic[0], cubic[0]),
            diag2(quartic[1], cubic[1]),
            diag2(quartic[2], cubic[2]),
            diag2(quartic[3], cubic[3]),
            diag2(quartic[4], 0.0),
            100.0 * std::f64::consts::PI,
            0.0318,
        )
        .unwrap()
    }

    #[test]
    fn linearize_encodes_scalar_companions() {
        // theta: (s+1)(s+2)(s+3)(s+4); V: (s+5)(s+6)(s+7).
        let pms = scalar_surrogate([24.0, 50.0, 35.0, 10.0, 1.0], [210.0, 107.0, 18.0, 1.0]);
        let m = linearize(&pms).unwrap();
        assert_eq!(m.nrows(), 7);
        // theta sub-companion last row.
        for (j, want) in [(0, -24.0), (1, -50.0), (2, -35.0), (3, -10.0)] {
            assert_relative_eq!(m[(3, j)], want, max_relative = 1e-12);
        }
        let eigs = eigenvalues(&m).unwrap();
        let got: Vec<f64> = eigs.iter().map(|e| e.re).collect();
        for (g, want) in got.iter().zip([-7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0]) {
            assert!((g - want).abs() < 1e-7, "{g} vs {want}");
        }
    }

    #[test]
    fn cubic_companion_block_shape() {
        let pms = scalar_surrogate([24.0, 50.0, 35.0, 10.0, 1.0], [210.0, 107.0, 18.0, 1.0]);
        let m = linearize(&pms).unwrap();
        // V'' row: -[a0, a1, a2] over the V chain columns 4..6.
        for (j, want) in [(4, -210.0), (5, -107.0), (6, -18.0)] {
            assert_relative_eq!(m[(6, j)], want, max_relative = 1e-12);
        }
    }

    #[test]
    fn ring5_nominal_spectrum_residuals_and_zero_mode() {
        let pms = ring5_nominal_pms();
        let spectrum = eig(&pms).unwrap();
        assert_eq!(spectrum.eigenvalues.len(), 35);
        assert!(
            spectrum.max_residual() <= RESIDUAL_TOL,
            "max residual {}",
            spectrum.max_residual()
        );
        // Exactly one structural zero mode from B * ones = 0.
        let near_zero = spectrum.eigenvalues.iter().filter(|e| e.norm() < 1e-6).count();
        assert_eq!(near_zero, 1);
        let verdict = classify(&spectrum);
        assert_eq!(verdict.n_zero_modes, 1);
    }

    #[test]
    fn classify_rules() {
        let spectrum = |eigs: Vec<Complex64>| Spectrum {
            residuals: vec![0.0; eigs.len()],
            eigenvalues: eigs,
        };
        let c = |re: f64, im: f64| Complex64::new(re, im);

        let v = classify(&spectrum(vec![c(0.0, 0.0), c(-3.0, 7.0), c(-3.0, -7.0), c(-0.2, 0.0)]));
        assert!(v.stable);
        assert_eq!(v.n_zero_modes, 1);
        assert_relative_eq!(v.max_real_nonzero, -0.2);

        let v = classify(&spectrum(vec![c(0.0, 0.0), c(0.01, 0.0), c(-5.0, 0.0)]));
        assert!(!v.stable);

        let v = classify(&spectrum(vec![c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]));
        assert!(!v.stable);
        assert_eq!(v.n_zero_modes, 2);
    }

    #[test]
    fn marginal_imaginary_pair_is_unstable() {
        let spectrum = Spectrum {
            eigenvalues: vec![
                Complex64::new(0.0, 5.0),
                Complex64::new(0.0, -5.0),
                Complex64::new(-1.0, 0.0),
            ],
            residuals: vec![0.0; 3],
        };
        assert!(!classify(&spectrum).stable);
    }

    #[test]
    fn exceptional_shift_regression() {
        // This droop setting once drove the QR iteration through an
        // exceptional shift that was credited to unshifted rows, moving
        // the whole spectrum by a constant. The residual bound catches
        // any such corruption.
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        let mut droops = DroopSetting::uniform(5, 0.1, 2.0, 31.41, 50.0, 4160.0);
        droops.k_f_pct[0] = 0.18539775532286276;
        droops.k_v_pct[0] = 3.47207445999919484;
        let pms = assemble(&adm, &droops).unwrap();
        let spectrum = eig(&pms).unwrap();
        assert!(spectrum.max_residual() <= RESIDUAL_TOL, "{}", spectrum.max_residual());
        let verdict = classify(&spectrum);
        assert!(!verdict.stable);
        assert_eq!(verdict.n_zero_modes, 1);
        assert!((verdict.max_real_nonzero - 20.537879).abs() < 1e-3);
    }

    #[test]
    fn spectrum_matches_external_schur_solver() {
        // Cross-check the in-house QR against nalgebra's Schur route on a
        // batch of settings around the stability boundary.
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        for trial in 0..25 {
            let mut droops = DroopSetting::uniform(5, 0.1, 2.0, 31.41, 50.0, 4160.0);
            droops.k_f_pct[0] = 0.01 + 0.39 * (trial as f64) / 25.0;
            droops.k_v_pct[0] = 0.05 + 3.9 * ((trial * 7 % 25) as f64) / 25.0;
            let pms = assemble(&adm, &droops).unwrap();
            let companion = linearize(&pms).unwrap();
            let mine = eigenvalues(&companion).unwrap();
            let mut theirs: Vec<Complex64> =
                companion.clone().complex_eigenvalues().iter().copied().collect();
            let scale = mine.iter().map(|e| e.norm()).fold(1.0, f64::max);
            // Greedy nearest-match pairing; clustered eigenvalues defeat
            // a sort-and-zip comparison.
            for a in &mine {
                let (best, dist) = theirs
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, (a - b).norm()))
                    .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                    .unwrap();
                assert!(dist <= 1e-6 * scale, "trial {trial}: {a} unmatched (dist {dist})");
                theirs.swap_remove(best);
            }
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        let mut droops = DroopSetting::ring5_nominal();
        droops.k_f_pct.pop();
        droops.k_v_pct.pop();
        assert!(matches!(
            assemble(&adm, &droops),
            Err(SmallSignalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_low_droop_point_is_stable() {
        // The fixed setting of the single-inverter experiment (all sources
        // at kf = 0.1 %, kv = 2 %) lies inside the stable region.
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        let droops = DroopSetting::uniform(5, 0.1, 2.0, 31.41, 50.0, 4160.0);
        let verdict = classify_point(&adm, &droops).unwrap();
        assert!(verdict.stable, "{verdict:?}");
        assert_eq!(verdict.n_zero_modes, 1);

        // Raising every voltage droop to 4 % destabilizes the ring.
        let droops = DroopSetting::uniform(5, 0.1, 4.0, 31.41, 50.0, 4160.0);
        let verdict = classify_point(&adm, &droops).unwrap();
        assert!(!verdict.stable, "{verdict:?}");
    }
}
