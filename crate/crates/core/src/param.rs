//! Covariance parameterization of affine tracking policies.
//!
//! A gain policy `u = K x + l` is represented on the data side by
//! `xi = [V h]` satisfying
//!
//! ```text
//! Lambda V = [K; I_n],    Lambda h = [l; 0]
//! ```
//!
//! where `Lambda = D0 D0^T / T` is the sample covariance of the stacked
//! input/state data `D0 = [U0; X0]`. The first block rows give back
//! `K = U0_bar V` and `l = U0_bar h`; the second block rows are the
//! equality constraints `X0_bar V = I`, `X0_bar h = 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::matops;
use crate::plant::OfflineDataset;

/// Absolute tolerance on the Frobenius residuals of the equality constraints.
pub const FEAS_TOL: f64 = 1e-8;

/// Largest accepted condition number of the sample covariance.
pub const MAX_LAMBDA_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct GainPolicy {
    /// Feedback gain `K` (m x n).
    pub k_gain: DMatrix<f64>,
    /// Feedforward offset `l` (m).
    pub l_ff: DVector<f64>,
}

impl GainPolicy {
    pub fn new(k_gain: DMatrix<f64>, l_ff: DVector<f64>) -> Result<Self> {
        if k_gain.nrows() != l_ff.len() {
            return Err(Error::Dimension(format!(
                "K is {}x{} but l has length {}",
                k_gain.nrows(),
                k_gain.ncols(),
                l_ff.len()
            )));
        }
        if k_gain.iter().chain(l_ff.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("gain policy has non-finite entries".into()));
        }
        Ok(Self { k_gain, l_ff })
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self {
            k_gain: DMatrix::zeros(m, n),
            l_ff: DVector::zeros(m),
        }
    }

    pub fn n(&self) -> usize {
        self.k_gain.ncols()
    }

    pub fn m(&self) -> usize {
        self.k_gain.nrows()
    }

    /// `[K l]` as one m x (n+1) matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, n) = (self.m(), self.n());
        let mut out = DMatrix::zeros(m, n + 1);
        out.view_mut((0, 0), (m, n)).copy_from(&self.k_gain);
        out.set_column(n, &self.l_ff);
        out
    }

    pub fn from_stacked(theta: &DMatrix<f64>) -> Result<Self> {
        if theta.ncols() == 0 {
            return Err(Error::Dimension("stacked gain policy has no columns".into()));
        }
        let n = theta.ncols() - 1;
        Self::new(theta.columns(0, n).into_owned(), theta.column(n).into_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariancePolicy {
    /// `V`, (m+n) x n.
    pub v_mat: DMatrix<f64>,
    /// `h`, (m+n).
    pub h_vec: DVector<f64>,
}

impl CovariancePolicy {
    pub fn new(v_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if v_mat.nrows() != h_vec.len() {
            return Err(Error::Dimension(format!(
                "V is {}x{} but h has length {}",
                v_mat.nrows(),
                v_mat.ncols(),
                h_vec.len()
            )));
        }
        if v_mat.nrows() < v_mat.ncols() {
            return Err(Error::Dimension(format!(
                "V must have at least as many rows as columns, got {}x{}",
                v_mat.nrows(),
                v_mat.ncols()
            )));
        }
        if v_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("covariance policy has non-finite entries".into()));
        }
        Ok(Self { v_mat, h_vec })
    }

    pub fn n(&self) -> usize {
        self.v_mat.ncols()
    }

    pub fn m(&self) -> usize {
        self.v_mat.nrows() - self.v_mat.ncols()
    }

    /// `[V h]` as one (m+n) x (n+1) matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (rows, n) = (self.v_mat.nrows(), self.n());
        let mut out = DMatrix::zeros(rows, n + 1);
        out.view_mut((0, 0), (rows, n)).copy_from(&self.v_mat);
        out.set_column(n, &self.h_vec);
        out
    }

    pub fn from_stacked(xi: &DMatrix<f64>) -> Result<Self> {
        if xi.ncols() == 0 {
            return Err(Error::Dimension("stacked covariance policy has no columns".into()));
        }
        let n = xi.ncols() - 1;
        Self::new(xi.columns(0, n).into_owned(), xi.column(n).into_owned())
    }

    /// Frobenius distance between the stacked representations.
    pub fn distance(&self, other: &Self) -> f64 {
        ((&self.v_mat - &other.v_mat).norm_squared() + (&self.h_vec - &other.h_vec).norm_squared())
            .sqrt()
    }
}

/// Covariance `Lambda` and the averaged data matrices derived from a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrices {
    pub lambda: DMatrix<f64>,
    pub x0_bar: DMatrix<f64>,
    pub u0_bar: DMatrix<f64>,
    pub x1_bar: DMatrix<f64>,
    pub w0_bar: Option<DMatrix<f64>>,
}

impl DataMatrices {
    pub fn n(&self) -> usize {
        self.x0_bar.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0_bar.nrows()
    }

    pub fn lambda_cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        let eig = SymmetricEigen::new(matops::symmetrize(&self.lambda)).eigenvalues;
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::Rank {
                what: "data covariance",
                min_singular_value: min.max(0.0),
                threshold: 0.0,
            });
        }
        let condition = max / min;
        if condition > MAX_LAMBDA_CONDITION {
            return Err(Error::Conditioning {
                what: "data covariance",
                condition,
            });
        }
        Cholesky::new(matops::symmetrize(&self.lambda)).ok_or(Error::Rank {
            what: "data covariance",
            min_singular_value: min,
            threshold: 0.0,
        })
    }

    /// Projector onto the null space of `X0_bar`.
    pub fn projector(&self) -> Result<DMatrix<f64>> {
        matops::projector_nullspace(&self.x0_bar)
    }

    /// `[U0_bar; X0_bar]`, which equals `Lambda` by construction.
    pub fn stacked_u0_x0(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(m + n, m + n);
        out.view_mut((0, 0), (m, m + n)).copy_from(&self.u0_bar);
        out.view_mut((m, 0), (n, m + n)).copy_from(&self.x0_bar);
        out
    }
}

pub fn build_data_matrices(ds: &OfflineDataset) -> Result<DataMatrices> {
    let pe = crate::plant::check_pe(ds);
    if !pe.is_pe {
        let max = matops::singular_values(&ds.d0()).iter().copied().fold(0.0, f64::max);
        return Err(Error::Rank {
            what: "stacked data D0",
            min_singular_value: pe.min_singular_value,
            threshold: matops::RANK_TOL * max,
        });
    }
    let d0 = ds.d0();
    let d0t = d0.transpose();
    let scale = 1.0 / ds.t_len() as f64;
    Ok(DataMatrices {
        lambda: matops::symmetrize(&(&d0 * &d0t * scale)),
        x0_bar: &ds.x0_seq * &d0t * scale,
        u0_bar: &ds.u0_seq * &d0t * scale,
        x1_bar: &ds.x1_seq * &d0t * scale,
        w0_bar: ds.w0_seq.as_ref().map(|w| w * &d0t * scale),
    })
}

fn check_policy_dims(n: usize, m: usize, dm: &DataMatrices, what: &str) -> Result<()> {
    if n != dm.n() || m != dm.m() {
        return Err(Error::Dimension(format!(
            "{what} has n={n}, m={m} but the data has n={}, m={}",
            dm.n(),
            dm.m()
        )));
    }
    Ok(())
}

/// Maps `(K, l)` to `V = Lambda^{-1} [K; I]`, `h = Lambda^{-1} [l; 0]`.
pub fn lift_policy(theta: &GainPolicy, dm: &DataMatrices) -> Result<CovariancePolicy> {
    let (n, m) = (theta.n(), theta.m());
    check_policy_dims(n, m, dm, "gain policy")?;
    let chol = dm.lambda_cholesky()?;
    let mut rhs_v = DMatrix::zeros(m + n, n);
    rhs_v.view_mut((0, 0), (m, n)).copy_from(&theta.k_gain);
    rhs_v.view_mut((m, 0), (n, n)).fill_with_identity();
    let mut rhs_h = DVector::zeros(m + n);
    rhs_h.rows_mut(0, m).copy_from(&theta.l_ff);
    Ok(CovariancePolicy {
        v_mat: chol.solve(&rhs_v),
        h_vec: chol.solve(&rhs_h),
    })
}

/// Maps a feasible `xi` back to `K = U0_bar V`, `l = U0_bar h`.
pub fn recover_policy(xi: &CovariancePolicy, dm: &DataMatrices) -> Result<GainPolicy> {
    let (v_residual, h_residual) = equality_residuals(xi, dm)?;
    if v_residual > FEAS_TOL || h_residual > FEAS_TOL {
        let rho = matops::spectral_radius(&(&dm.x1_bar * &xi.v_mat)).unwrap_or(f64::NAN);
        return Err(Error::Infeasible {
            v_residual,
            h_residual,
            rho,
        });
    }
    Ok(GainPolicy {
        k_gain: &dm.u0_bar * &xi.v_mat,
        l_ff: &dm.u0_bar * &xi.h_vec,
    })
}

/// `(||X0_bar V - I||_F, ||X0_bar h||)`.
pub fn equality_residuals(xi: &CovariancePolicy, dm: &DataMatrices) -> Result<(f64, f64)> {
    if xi.v_mat.nrows() != dm.m() + dm.n() || xi.n() != dm.n() {
        return Err(Error::Dimension(format!(
            "policy V is {}x{} but the data expects {}x{}",
            xi.v_mat.nrows(),
            xi.v_mat.ncols(),
            dm.m() + dm.n(),
            dm.n()
        )));
    }
    let n = dm.n();
    let v_res = (&dm.x0_bar * &xi.v_mat - DMatrix::<f64>::identity(n, n)).norm();
    let h_res = (&dm.x0_bar * &xi.h_vec).norm();
    Ok((v_res, h_res))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub in_set: bool,
    pub v_residual: f64,
    pub h_residual: f64,
    /// Spectral radius of the data-based closed loop `X1_bar V`.
    pub rho: f64,
}

/// Membership test for the feasible set: both equality residuals within
/// `tol` and `rho(X1_bar V) < 1`. Dimension mismatches report infinite
/// residuals.
pub fn check_feasible(xi: &CovariancePolicy, dm: &DataMatrices, tol: f64) -> FeasibilityReport {
    let Ok((v_residual, h_residual)) = equality_residuals(xi, dm) else {
        return FeasibilityReport {
            in_set: false,
            v_residual: f64::INFINITY,
            h_residual: f64::INFINITY,
            rho: f64::INFINITY,
        };
    };
    let rho = matops::spectral_radius(&(&dm.x1_bar * &xi.v_mat)).unwrap_or(f64::INFINITY);
    FeasibilityReport {
        in_set: v_residual <= tol
            && h_residual <= tol
            && rho < 1.0 - matops::STABILITY_MARGIN,
        v_residual,
        h_residual,
        rho,
    }
}

/// Least-squares model estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct LsEstimate {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
}

fn split_estimate(ba: DMatrix<f64>, m: usize, n: usize) -> LsEstimate {
    LsEstimate {
        b_hat: ba.columns(0, m).into_owned(),
        a_hat: ba.columns(m, n).into_owned(),
    }
}

/// `[B_hat A_hat] = X1 D0^T (D0 D0^T)^{-1}`.
pub fn identify_ls(ds: &OfflineDataset) -> Result<LsEstimate> {
    let dm = build_data_matrices(ds)?;
    let d0 = ds.d0();
    let chol = dm.lambda_cholesky()?;
    let t = ds.t_len() as f64;
    // (D0 D0^T)^{-1} D0 X1^T = Lambda^{-1} (D0 X1^T / T)
    let rhs = &d0 * ds.x1_seq.transpose() / t;
    let ba = chol.solve(&rhs).transpose();
    Ok(split_estimate(ba, ds.m(), ds.n()))
}

/// The same estimate expressed through the averaged matrices:
/// `[B_hat A_hat] = X1_bar Lambda^{-1}`.
pub fn identify_from_data_matrices(dm: &DataMatrices) -> Result<LsEstimate> {
    let chol = dm.lambda_cholesky()?;
    let ba = chol.solve(&dm.x1_bar.transpose()).transpose();
    Ok(split_estimate(ba, dm.m(), dm.n()))
}
