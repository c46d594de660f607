//! Closed-form average cost and policy gradients for setpoint tracking.
//!
//! Data side: under `xi = [V h]` the certainty-equivalent closed loop is
//! `x+ = X1_bar V x + X1_bar h + w`, `u = U0_bar V x + U0_bar h`.
//! Model side: under `theta = [K l]` and a model `(A, B)` it is
//! `x+ = (A + BK) x + B l + w`, `u = K x + l`.
//!
//! Both sides share the same structure: a Lyapunov value matrix `P`, a
//! linear value term `g`, the stationary mean `x_bar` and covariance `Sigma`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matops;
use crate::param::{self, CovariancePolicy, DataMatrices, GainPolicy};

/// Largest accepted condition number of `I - F` for a closed loop `F`.
pub const MAX_RESOLVENT_CONDITION: f64 = 1e12;

/// Quadratic tracking cost and noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct CostParams {
    pub q_mat: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
    /// Setpoint.
    pub delta: DVector<f64>,
    pub w_cov: DMatrix<f64>,
}

impl CostParams {
    pub fn new(
        q_mat: DMatrix<f64>,
        r_mat: DMatrix<f64>,
        delta: DVector<f64>,
        w_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = q_mat.nrows();
        let m = r_mat.nrows();
        if q_mat.ncols() != n
            || r_mat.ncols() != m
            || delta.len() != n
            || w_cov.nrows() != n
            || w_cov.ncols() != n
        {
            return Err(Error::Dimension(format!(
                "cost operands disagree: Q {}x{}, R {}x{}, delta {}, W {}x{}",
                q_mat.nrows(),
                q_mat.ncols(),
                r_mat.nrows(),
                r_mat.ncols(),
                delta.len(),
                w_cov.nrows(),
                w_cov.ncols()
            )));
        }
        let finite = q_mat
            .iter()
            .chain(r_mat.iter())
            .chain(delta.iter())
            .chain(w_cov.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Input("cost parameters have non-finite entries".into()));
        }
        for (mat, name) in [(&q_mat, "Q"), (&r_mat, "R"), (&w_cov, "W")] {
            if matops::asymmetry(mat) > 1e-12 * mat.norm().max(1.0) {
                return Err(Error::Input(format!("{name} must be symmetric")));
            }
        }
        if matops::min_sym_eigenvalue(&q_mat) <= 0.0 {
            return Err(Error::Input("Q must be positive definite".into()));
        }
        if matops::min_sym_eigenvalue(&r_mat) <= 0.0 {
            return Err(Error::Input("R must be positive definite".into()));
        }
        if matops::min_sym_eigenvalue(&w_cov) < -1e-12 {
            return Err(Error::Input("W must be positive semidefinite".into()));
        }
        Ok(Self {
            q_mat,
            r_mat,
            delta,
            w_cov,
        })
    }

    /// `Q = I_n`, `R = I_m`, `W = 0`.
    pub fn identity(n: usize, m: usize, delta: DVector<f64>) -> Self {
        assert_eq!(delta.len(), n, "setpoint length must equal n");
        Self {
            q_mat: DMatrix::identity(n, n),
            r_mat: DMatrix::identity(m, m),
            delta,
            w_cov: DMatrix::zeros(n, n),
        }
    }

    pub fn with_noise(mut self, w_cov: DMatrix<f64>) -> Result<Self> {
        self.w_cov = w_cov;
        Self::new(self.q_mat, self.r_mat, self.delta, self.w_cov)
    }

    pub fn n(&self) -> usize {
        self.q_mat.nrows()
    }

    pub fn m(&self) -> usize {
        self.r_mat.nrows()
    }

    fn setpoint_cost(&self) -> f64 {
        self.delta.dot(&(&self.q_mat * &self.delta))
    }
}

/// Policy-dependent quantities for a covariance policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    /// Value matrix `P_V`, n x n.
    pub p_v: DMatrix<f64>,
    /// Resolvent `(I - X1_bar V)^{-1}`.
    pub y_v: DMatrix<f64>,
    /// `(U0_bar^T R U0_bar + X1_bar^T P_V X1_bar) V`, (m+n) x n.
    pub e_v: DMatrix<f64>,
    /// Linear value term, n.
    pub g_xi: DVector<f64>,
    /// `X1_bar^T g + U0_bar^T R U0_bar h + X1_bar^T P_V X1_bar h`, (m+n).
    pub g_cap: DVector<f64>,
    /// Stationary state covariance, n x n.
    pub sigma_v: DMatrix<f64>,
    /// Stationary state mean `Y_V X1_bar h`.
    pub x_bar: DVector<f64>,
    /// `[[Sigma + x_bar x_bar^T, x_bar], [x_bar^T, 1]]`.
    pub phi: DMatrix<f64>,
    pub cost: f64,
}

impl PolicyEvaluation {
    /// `2 [E_V G] Phi`, shaped like `[V h]`.
    pub fn gradient(&self) -> DMatrix<f64> {
        let rows = self.e_v.nrows();
        let n = self.e_v.ncols();
        let mut eg = DMatrix::zeros(rows, n + 1);
        eg.view_mut((0, 0), (rows, n)).copy_from(&self.e_v);
        eg.set_column(n, &self.g_cap);
        eg * &self.phi * 2.0
    }
}

/// `[[Sigma + x x^T, x], [x^T, 1]]`.
pub fn second_moment(sigma: &DMatrix<f64>, x_bar: &DVector<f64>) -> DMatrix<f64> {
    let n = x_bar.len();
    let mut phi = DMatrix::zeros(n + 1, n + 1);
    phi.view_mut((0, 0), (n, n))
        .copy_from(&(sigma + x_bar * x_bar.transpose()));
    phi.view_mut((0, n), (n, 1)).copy_from(x_bar);
    phi.view_mut((n, 0), (1, n)).copy_from(&x_bar.transpose());
    phi[(n, n)] = 1.0;
    phi
}

/// Shared closed-loop computations, independent of the representation.
struct ClosedLoop {
    p: DMatrix<f64>,
    y: DMatrix<f64>,
    g: DVector<f64>,
    sigma: DMatrix<f64>,
    x_bar: DVector<f64>,
    cost: f64,
}

/// `closed` is the state map, `gain` the state-to-input map, `offset` the
/// constant state drive and `u_offset` the constant input.
fn closed_loop(
    closed: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    offset: &DVector<f64>,
    u_offset: &DVector<f64>,
    cp: &CostParams,
) -> Result<ClosedLoop> {
    let n = closed.nrows();
    let report = matops::SpectrumReport::of(closed)?;
    if !report.is_schur_stable {
        return Err(Error::Unstable { rho: report.radius });
    }
    let r_gain = &cp.r_mat * gain;
    let stage = matops::symmetrize(&(&cp.q_mat + gain.transpose() * &r_gain));
    let p = matops::solve_dlyap(closed, &stage)?;

    let resolvent = DMatrix::<f64>::identity(n, n) - closed;
    let y = resolvent
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("I - closed loop is singular".into()))?;
    let condition = resolvent.norm() * y.norm();
    if !(condition <= MAX_RESOLVENT_CONDITION) {
        return Err(Error::Conditioning {
            what: "closed-loop resolvent",
            condition,
        });
    }

    // g^T (I - F) = -delta^T Q + u_off^T R gain + offset^T P F
    let rhs = -(&cp.q_mat * &cp.delta)
        + r_gain.transpose() * u_offset
        + closed.transpose() * (&p * offset);
    let lu_t = resolvent.transpose().lu();
    let g = lu_t
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("I - closed loop is singular".into()))?;
    let x_bar = resolvent
        .lu()
        .solve(offset)
        .ok_or_else(|| Error::Degenerate("I - closed loop is singular".into()))?;
    let sigma = matops::solve_dlyap_transposed(closed, &cp.w_cov)?;

    let cost = cp.setpoint_cost()
        + u_offset.dot(&(&cp.r_mat * u_offset))
        + offset.dot(&(&p * offset))
        + 2.0 * g.dot(offset)
        + (&p * &cp.w_cov).trace();
    Ok(ClosedLoop {
        p,
        y,
        g,
        sigma,
        x_bar,
        cost,
    })
}

fn check_cost_dims(n: usize, m: usize, cp: &CostParams) -> Result<()> {
    if cp.n() != n || cp.m() != m {
        return Err(Error::Dimension(format!(
            "cost has n={}, m={} but the policy has n={n}, m={m}",
            cp.n(),
            cp.m()
        )));
    }
    Ok(())
}

/// Evaluates `xi` after checking membership in the feasible set.
pub fn evaluate_xi(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
) -> Result<PolicyEvaluation> {
    let rep = param::check_feasible(xi, dm, param::FEAS_TOL);
    if !rep.in_set {
        return Err(Error::Infeasible {
            v_residual: rep.v_residual,
            h_residual: rep.h_residual,
            rho: rep.rho,
        });
    }
    evaluate_xi_relaxed(xi, dm, cp)
}

/// Evaluates the data-based closed loop of `xi` without the equality
/// constraints; only `rho(X1_bar V) < 1` is required. The cost is a smooth
/// function of every entry of `xi` on that open set.
pub fn evaluate_xi_relaxed(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
) -> Result<PolicyEvaluation> {
    let (n, m) = (dm.n(), dm.m());
    if xi.v_mat.nrows() != m + n || xi.n() != n {
        return Err(Error::Dimension(format!(
            "policy V is {}x{} but the data expects {}x{n}",
            xi.v_mat.nrows(),
            xi.v_mat.ncols(),
            m + n
        )));
    }
    check_cost_dims(n, m, cp)?;

    let closed = &dm.x1_bar * &xi.v_mat;
    let gain = &dm.u0_bar * &xi.v_mat;
    let offset = &dm.x1_bar * &xi.h_vec;
    let u_offset = &dm.u0_bar * &xi.h_vec;
    let cl = closed_loop(&closed, &gain, &offset, &u_offset, cp)?;

    let ru = &cp.r_mat * &dm.u0_bar;
    let px1 = &cl.p * &dm.x1_bar;
    let e_v = (dm.u0_bar.transpose() * &ru + dm.x1_bar.transpose() * &px1) * &xi.v_mat;
    let g_cap = dm.x1_bar.transpose() * &cl.g
        + dm.u0_bar.transpose() * (&ru * &xi.h_vec)
        + dm.x1_bar.transpose() * (&px1 * &xi.h_vec);
    let phi = second_moment(&cl.sigma, &cl.x_bar);
    Ok(PolicyEvaluation {
        p_v: cl.p,
        y_v: cl.y,
        e_v,
        g_xi: cl.g,
        g_cap,
        sigma_v: cl.sigma,
        x_bar: cl.x_bar,
        phi,
        cost: cl.cost,
    })
}

/// `grad_xi J = 2 [E_V G] Phi` for a feasible `xi`.
pub fn gradient_xi(xi: &CovariancePolicy, dm: &DataMatrices, cp: &CostParams) -> Result<DMatrix<f64>> {
    Ok(evaluate_xi(xi, dm, cp)?.gradient())
}

/// The cost written through the stationary law,
/// `tr((Q + K^T R K)(Sigma + x x^T)) + 2(-delta^T Q + u_off^T R K) x + delta^T Q delta + u_off^T R u_off`,
/// with `K = U0_bar V`, `u_off = U0_bar h`.
pub fn stationary_cost(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    eval: &PolicyEvaluation,
) -> f64 {
    let gain = &dm.u0_bar * &xi.v_mat;
    let u_off = &dm.u0_bar * &xi.h_vec;
    let weight = &cp.q_mat + gain.transpose() * &cp.r_mat * &gain;
    let moment = &eval.sigma_v + &eval.x_bar * eval.x_bar.transpose();
    let linear = -(&cp.q_mat * &cp.delta) + gain.transpose() * (&cp.r_mat * &u_off);
    (weight * moment).trace()
        + 2.0 * linear.dot(&eval.x_bar)
        + cp.setpoint_cost()
        + u_off.dot(&(&cp.r_mat * &u_off))
}

/// Term-by-term gradient expressions in the raw data matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedGradient {
    /// Gradient in `V` from differentiating the stationary-law cost.
    pub grad_v: DMatrix<f64>,
    /// Gradient in `h`, value-function (P_V) form.
    pub grad_h: DVector<f64>,
    /// Gradient in `h`, stationary-law form (no P_V terms).
    pub grad_h_stationary: DVector<f64>,
}

pub fn expanded_gradient(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    eval: &PolicyEvaluation,
) -> ExpandedGradient {
    let v = &xi.v_mat;
    let h = &xi.h_vec;
    let x1 = &dm.x1_bar;
    let x1t = x1.transpose();
    let y = &eval.y_v;
    let yt = y.transpose();
    let p = &eval.p_v;
    let xb = &eval.x_bar;
    let q_delta = &cp.q_mat * &cp.delta;
    let uru = dm.u0_bar.transpose() * &cp.r_mat * &dm.u0_bar;
    let vt = v.transpose();
    let x1pv = &x1t * p * x1;

    let grad_h = (&uru * h
        + &x1pv * h
        + &uru * v * y * x1 * h
        + &x1t * &yt * &vt * &uru * h
        + &x1pv * v * y * x1 * h
        + &x1t * &yt * &vt * &x1pv * h
        - &x1t * &yt * &q_delta)
        * 2.0;

    let grad_h_stationary = (&x1t * &yt * (&cp.q_mat + &vt * &uru * v) * xb
        + &uru * h
        - &x1t * &yt * &q_delta
        + &uru * v * xb
        + &x1t * &yt * &vt * &uru * h)
        * 2.0;

    let xx = xb * xb.transpose();
    let grad_v = (&eval.e_v * &eval.sigma_v
        + &x1t * &yt * &cp.q_mat * &xx
        + &uru * v * &xx
        + &x1t * &yt * &vt * &uru * v * &xx
        - &x1t * &yt * &q_delta * xb.transpose()
        + &uru * h * xb.transpose()
        + &x1t * &yt * &vt * &uru * h * xb.transpose())
        * 2.0;

    ExpandedGradient {
        grad_v,
        grad_h,
        grad_h_stationary,
    }
}

/// Policy-dependent quantities for a gain policy under a model `(A, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainEvaluation {
    pub p: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub g: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub x_bar: DVector<f64>,
    /// `R K + B^T P (A + B K)`, m x n.
    pub e_k: DMatrix<f64>,
    /// `B^T g + R l + B^T P B l`, m.
    pub g_l: DVector<f64>,
    pub cost: f64,
}

impl GainEvaluation {
    pub fn phi(&self) -> DMatrix<f64> {
        second_moment(&self.sigma, &self.x_bar)
    }

    /// `(grad_K J, grad_l J)`.
    pub fn gradient(&self) -> (DMatrix<f64>, DVector<f64>) {
        let moment = &self.sigma + &self.x_bar * self.x_bar.transpose();
        let grad_k = (&self.e_k * moment + &self.g_l * self.x_bar.transpose()) * 2.0;
        let grad_l = (&self.e_k * &self.x_bar + &self.g_l) * 2.0;
        (grad_k, grad_l)
    }

    /// Gradient stacked as `[grad_K grad_l]`, m x (n+1).
    pub fn gradient_stacked(&self) -> DMatrix<f64> {
        let (k, l) = self.gradient();
        let (m, n) = (k.nrows(), k.ncols());
        let mut out = DMatrix::zeros(m, n + 1);
        out.view_mut((0, 0), (m, n)).copy_from(&k);
        out.set_column(n, &l);
        out
    }
}

pub fn evaluate_theta(
    theta: &GainPolicy,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cp: &CostParams,
) -> Result<GainEvaluation> {
    let (n, m) = (theta.n(), theta.m());
    if a.nrows() != n || a.ncols() != n || b.nrows() != n || b.ncols() != m {
        return Err(Error::Dimension(format!(
            "model A {}x{}, B {}x{} does not match policy n={n}, m={m}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    check_cost_dims(n, m, cp)?;
    let closed = a + b * &theta.k_gain;
    let offset = b * &theta.l_ff;
    let cl = closed_loop(&closed, &theta.k_gain, &offset, &theta.l_ff, cp)?;
    let bt = b.transpose();
    let e_k = &cp.r_mat * &theta.k_gain + &bt * &cl.p * &closed;
    let g_l = &bt * &cl.g + &cp.r_mat * &theta.l_ff + &bt * (&cl.p * &offset);
    Ok(GainEvaluation {
        p: cl.p,
        y: cl.y,
        g: cl.g,
        sigma: cl.sigma,
        x_bar: cl.x_bar,
        e_k,
        g_l,
        cost: cl.cost,
    })
}

pub fn gradient_theta(
    theta: &GainPolicy,
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    cp: &CostParams,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    Ok(evaluate_theta(theta, a_hat, b_hat, cp)?.gradient())
}
