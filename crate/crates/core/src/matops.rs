//! Dense numerical kernels: spectral radius, discrete Lyapunov and Riccati
//! solvers, right pseudoinverse and null-space projector.

use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative rank threshold: singular values below `RANK_TOL * sigma_max`
/// count as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Margin used when classifying `rho < 1` as Schur stable.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Largest matrix order for which the Lyapunov equation is solved through
/// the Kronecker-vectorized linear system.
pub const KRONECKER_MAX_ORDER: usize = 32;

/// DARE fixed-point stopping threshold on the Frobenius change between iterates.
pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITERS: usize = 100_000;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumReport {
    pub radius: f64,
    pub is_schur_stable: bool,
}

impl SpectrumReport {
    pub fn of(m: &DMatrix<f64>) -> Result<Self> {
        let radius = spectral_radius(m)?;
        Ok(Self {
            radius,
            is_schur_stable: radius < 1.0 - STABILITY_MARGIN,
        })
    }
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Maximum eigenvalue modulus, via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    require_square(m, "spectral radius argument")?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or(Error::NoConvergence {
            solver: "Schur decomposition",
            iters: 10_000,
            last_change: f64::NAN,
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn is_schur_stable(m: &DMatrix<f64>) -> Result<bool> {
    Ok(SpectrumReport::of(m)?.is_schur_stable)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    SVD::new(m.clone(), false, false).singular_values
}

/// Numerical rank under the relative `RANK_TOL` threshold, together with
/// the smallest of the leading `min(rows, cols)` singular values.
pub fn rank_with_min_sv(m: &DMatrix<f64>) -> (usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, 0.0);
    }
    let sv = singular_values(m);
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = RANK_TOL * max;
    let rank = if max == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > threshold).count()
    };
    (rank, min)
}

fn require_full_row_rank(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.nrows() > m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be wide ({}x{} has more rows than columns)",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} has non-finite entries")));
    }
    let (rank, min_sv) = rank_with_min_sv(m);
    if rank < m.nrows() {
        let max = singular_values(m).iter().copied().fold(0.0, f64::max);
        return Err(Error::Rank {
            what,
            min_singular_value: min_sv,
            threshold: RANK_TOL * max,
        });
    }
    Ok(())
}

/// Right inverse `m^T (m m^T)^{-1}` of a full-row-rank matrix.
pub fn right_pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_full_row_rank(m, "right-inverse argument")?;
    let gram = m * m.transpose();
    let chol = Cholesky::new(gram).ok_or(Error::Rank {
        what: "right-inverse argument",
        min_singular_value: 0.0,
        threshold: 0.0,
    })?;
    // (m m^T)^{-1} m, transposed.
    Ok(chol.solve(m).transpose())
}

/// Orthogonal projector `I - m^+ m` onto the null space of a wide,
/// full-row-rank matrix.
pub fn projector_nullspace(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_full_row_rank(m, "projector argument")?;
    // Orthonormal basis of the row space; avoids squaring the condition number.
    let basis = m.transpose().qr().q();
    let k = m.ncols();
    Ok(symmetrize(&(DMatrix::identity(k, k) - &basis * basis.transpose())))
}

fn check_symmetric(q: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = q.norm().max(1.0);
    if asymmetry(q) > SYMMETRY_TOL * scale {
        return Err(Error::Input(format!(
            "{what} is not symmetric (asymmetry {:.3e})",
            asymmetry(q)
        )));
    }
    Ok(())
}

/// Solves `P = q + f^T P f` for Schur-stable `f`.
pub fn solve_dlyap(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square(f, "Lyapunov closed-loop matrix")?;
    require_square(q, "Lyapunov constant term")?;
    if f.nrows() != q.nrows() {
        return Err(Error::Dimension(format!(
            "Lyapunov operands disagree: f is {}x{}, q is {}x{}",
            f.nrows(),
            f.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    check_symmetric(q, "Lyapunov constant term")?;
    let report = SpectrumReport::of(f)?;
    if !report.is_schur_stable {
        return Err(Error::Unstable { rho: report.radius });
    }
    let p = if f.nrows() <= KRONECKER_MAX_ORDER {
        dlyap_kronecker(f, q)?
    } else {
        dlyap_doubling(f, q)?
    };
    Ok(symmetrize(&p))
}

/// Solves `S = q + f S f^T` (the state-covariance form).
pub fn solve_dlyap_transposed(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_dlyap(&f.transpose(), q)
}

fn dlyap_kronecker(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let ft = f.transpose();
    // Column-major vec: vec(F^T P F) = (F^T kron F^T) vec(P).
    let lhs = DMatrix::identity(n * n, n * n) - ft.kronecker(&ft);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs).ok_or_else(|| {
        Error::Degenerate("Lyapunov operator is singular".into())
    })?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Squared Smith iteration: `P_{k+1} = P_k + F_k^T P_k F_k`, `F_{k+1} = F_k^2`.
fn dlyap_doubling(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    const MAX_DOUBLINGS: usize = 200;
    let mut p = q.clone();
    let mut fk = f.clone();
    for _ in 0..MAX_DOUBLINGS {
        let inc = fk.transpose() * &p * &fk;
        let change = inc.norm();
        p += inc;
        fk = &fk * &fk;
        if change <= f64::EPSILON * p.norm().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence {
        solver: "Lyapunov doubling",
        iters: MAX_DOUBLINGS,
        last_change: f64::NAN,
    })
}

/// Residual `||P - q - f^T P f||_F` of a Lyapunov solution.
pub fn dlyap_residual(f: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (p - q - f.transpose() * p * f).norm()
}

/// Riccati right-hand side `A^T P A - A^T P B (B^T P B + R)^{-1} B^T P A + Q`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let gram = r + &bt_p * b;
    let chol = Cholesky::new(symmetrize(&gram))
        .ok_or_else(|| Error::Degenerate("B^T P B + R is not positive definite".into()))?;
    let bt_p_a = &bt_p * a;
    let gain_term = bt_p_a.transpose() * chol.solve(&bt_p_a);
    Ok(symmetrize(&(a.transpose() * p * a - gain_term + q)))
}

/// Residual of the discrete algebraic Riccati equation at `p`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok((riccati_map(a, b, q, r, p)? - p).norm())
}

/// Optimal gain `-(B^T P B + R)^{-1} B^T P A` for a Riccati solution `p`.
pub fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let chol = Cholesky::new(symmetrize(&(r + &bt_p * b)))
        .ok_or_else(|| Error::Degenerate("B^T P B + R is not positive definite".into()))?;
    Ok(-chol.solve(&(bt_p * a)))
}

/// Stabilizing solution of the DARE by fixed-point iteration from `P_0 = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    require_square(a, "state matrix")?;
    require_square(q, "state penalty")?;
    require_square(r, "input penalty")?;
    let (n, m) = (a.nrows(), b.ncols());
    if b.nrows() != n || q.nrows() != n || r.nrows() != m {
        return Err(Error::Dimension(format!(
            "DARE operands disagree: a {n}x{n}, b {}x{}, q {}x{}, r {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    check_symmetric(q, "state penalty")?;
    check_symmetric(r, "input penalty")?;
    if min_sym_eigenvalue(q) <= 0.0 {
        return Err(Error::Input("state penalty Q must be positive definite".into()));
    }
    if min_sym_eigenvalue(r) <= 0.0 {
        return Err(Error::Input("input penalty R must be positive definite".into()));
    }

    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..DARE_MAX_ITERS {
        let next = riccati_map(a, b, q, r, &p)?;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        change = (&next - &p).norm();
        p = next;
        if change < DARE_TOL * p.norm().max(1.0) {
            // Relative convergence can also be met by a diverging iterate,
            // so the limit must actually stabilize the loop.
            let closed = a + b * riccati_gain(a, b, r, &p)?;
            let report = SpectrumReport::of(&closed)?;
            if !report.is_schur_stable {
                return Err(Error::Unstable { rho: report.radius });
            }
            return Ok(p);
        }
    }
    Err(Error::NoConvergence {
        solver: "Riccati fixed-point iteration",
        iters: DARE_MAX_ITERS,
        last_change: change,
    })
}

/// Rank of the controllability matrix `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    rank_with_min_sv(&ctrb).0
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn scaled_to_radius(m: DMatrix<f64>, rho: f64) -> DMatrix<f64> {
        let cur = spectral_radius(&m).unwrap();
        m * (rho / cur)
    }

    #[test]
    fn spectral_radius_of_trivial_matrices() {
        for n in 1..6 {
            let r = spectral_radius(&DMatrix::identity(n, n)).unwrap();
            assert!((r - 1.0).abs() < 1e-14);
        }
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(spectral_radius(&nil).unwrap().abs() < 1e-14);
    }

    #[test]
    fn spectral_radius_of_rotation_is_modulus() {
        let (c, s) = (0.3_f64.cos() * 0.9, 0.3_f64.sin() * 0.9);
        let m = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((spectral_radius(&m).unwrap() - 0.9).abs() < 1e-14);
    }

    #[test]
    fn spectral_radius_rejects_rectangular() {
        assert!(matches!(
            spectral_radius(&DMatrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spectrum_report_respects_margin() {
        let m = DMatrix::from_element(1, 1, 1.0 - 1e-12);
        let rep = SpectrumReport::of(&m).unwrap();
        assert!(rep.radius < 1.0);
        assert!(!rep.is_schur_stable);
        let rep = SpectrumReport::of(&DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!(rep.is_schur_stable);
    }

    #[test]
    fn dlyap_zero_dynamics_returns_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_dlyap(&DMatrix::zeros(2, 2), &q).unwrap();
        assert!((p - q).norm() < 1e-15);
    }

    #[test]
    fn dlyap_scalar_closed_form() {
        // p = q / (1 - f^2) = 3 / 0.75
        let p = solve_dlyap(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert!((p[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn dlyap_random_residual_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let f = scaled_to_radius(randn(&mut rng, 4, 4), 0.9);
            let g = randn(&mut rng, 4, 4);
            let q = &g * g.transpose();
            let p = solve_dlyap(&f, &q).unwrap();
            assert!(dlyap_residual(&f, &q, &p) <= 1e-10 * p.norm().max(1.0));
            assert!(min_sym_eigenvalue(&p) >= -1e-10);
            let s = solve_dlyap_transposed(&f, &q).unwrap();
            assert!((&s - &q - &f * &s * f.transpose()).norm() <= 1e-10 * s.norm().max(1.0));
        }
    }

    #[test]
    fn dlyap_doubling_matches_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = scaled_to_radius(randn(&mut rng, 6, 6), 0.95);
        let g = randn(&mut rng, 6, 6);
        let q = &g * g.transpose();
        let direct = dlyap_kronecker(&f, &q).unwrap();
        let doubled = dlyap_doubling(&f, &q).unwrap();
        assert!((direct - doubled).norm() <= 1e-10 * q.norm());
    }

    #[test]
    fn dlyap_large_order_uses_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = KRONECKER_MAX_ORDER + 3;
        let f = scaled_to_radius(randn(&mut rng, n, n), 0.8);
        let q = DMatrix::identity(n, n);
        let p = solve_dlyap(&f, &q).unwrap();
        assert!(dlyap_residual(&f, &q, &p) <= 1e-10 * p.norm());
    }

    #[test]
    fn dlyap_errors() {
        let q = DMatrix::identity(2, 2);
        let unstable = DMatrix::from_diagonal_element(2, 2, 1.1);
        assert!(matches!(solve_dlyap(&unstable, &q), Err(Error::Unstable { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            solve_dlyap(&DMatrix::zeros(2, 2), &asym),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dare_zero_dynamics_returns_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let p = solve_dare(&DMatrix::zeros(2, 2), &b, &q, &DMatrix::identity(1, 1)).unwrap();
        assert!((p - q).norm() < 1e-14);
    }

    #[test]
    fn dare_scalar_golden_ratio() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = solve_dare(&one, &one, &one, &one).unwrap();
        let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-10);
    }

    #[test]
    fn dare_random_residual_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = randn(&mut rng, 4, 4);
            let b = randn(&mut rng, 4, 2);
            let q = DMatrix::identity(4, 4);
            let r = DMatrix::identity(2, 2);
            let p = solve_dare(&a, &b, &q, &r).unwrap();
            assert!(dare_residual(&a, &b, &q, &r, &p).unwrap() <= 1e-10 * p.norm().max(1.0));
            let k = riccati_gain(&a, &b, &r, &p).unwrap();
            assert!(spectral_radius(&(&a + &b * k)).unwrap() < 1.0);
        }
    }

    #[test]
    fn dare_rejects_indefinite_penalties() {
        let a = DMatrix::identity(2, 2) * 0.5;
        let b = DMatrix::identity(2, 2);
        let bad = DMatrix::from_diagonal_element(2, 2, -1.0);
        let id = DMatrix::identity(2, 2);
        assert!(matches!(solve_dare(&a, &b, &bad, &id), Err(Error::Input(_))));
        assert!(matches!(solve_dare(&a, &b, &id, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn dare_uncontrollable_unstable_mode_fails() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.2]));
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let id2 = DMatrix::identity(2, 2);
        let id1 = DMatrix::identity(1, 1);
        assert!(solve_dare(&a, &b, &id2, &id1).is_err());
    }

    #[test]
    fn right_pinv_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((right_pinv(&id).unwrap() - &id).norm() < 1e-15);
        let row = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let pinv = right_pinv(&row).unwrap();
        assert!((pinv[(0, 0)] - 0.12).abs() < 1e-15);
        assert!((pinv[(1, 0)] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn right_pinv_rank_error_reports_min_sv() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        match right_pinv(&m) {
            Err(Error::Rank { min_singular_value, .. }) => assert!(min_singular_value < 1e-12),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn projector_of_state_block() {
        // [0 I_n] selects the state rows of the stacked [U; X] layout.
        let (m, n) = (2, 3);
        let mut x0 = DMatrix::zeros(n, m + n);
        x0.view_mut((0, m), (n, n)).fill_with_identity();
        let pi = projector_nullspace(&x0).unwrap();
        let mut expected = DMatrix::zeros(m + n, m + n);
        expected.view_mut((0, 0), (m, m)).fill_with_identity();
        assert!((pi - expected).norm() < 1e-15);
    }

    #[test]
    fn projector_properties_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x0 = randn(&mut rng, 4, 6);
            let pi = projector_nullspace(&x0).unwrap();
            assert!(asymmetry(&pi) < 1e-10);
            assert!((&pi * &pi - &pi).norm() < 1e-10);
            assert!((&x0 * &pi).norm() < 1e-10);
            assert!((pi.trace() - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn controllability_rank_detects_uncontrollable_pair() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.3]));
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(controllability_rank(&a, &b), 1);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(controllability_rank(&a, &b), 2);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]);
        let m = &g * g.transpose();
        let s = psd_sqrt(&m);
        assert!((&s * &s - m).norm() < 1e-12);
    }
}
