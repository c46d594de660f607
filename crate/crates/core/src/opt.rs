//! Projected policy-gradient iteration on covariance policies, its
//! model-based counterpart, and the certainty-equivalence optimum it
//! converges to.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqt::{self, CostParams, PolicyEvaluation};
use crate::matops;
use crate::param::{self, CovariancePolicy, DataMatrices, GainPolicy};

/// `M` is declared degenerate when its smallest eigenvalue falls below
/// this fraction of its largest.
pub const M_PD_TOL: f64 = 1e-12;

/// Halvings allowed per iteration in backtracking mode.
pub const MAX_BACKTRACKS: usize = 60;

/// Relative cost increase tolerated by backtracking (round-off in `J`).
pub const COST_INCREASE_SLACK: f64 = 1e-13;

/// Preconditioner `M = U0_bar Pi U0_bar^T` relating the projected data-side
/// step to a model-side gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerM {
    pub m_mat: DMatrix<f64>,
    /// `N = U0_bar Pi`, so that `M = N N^T`.
    pub n_mat: DMatrix<f64>,
    pub min_eig: f64,
}

pub fn compute_m(dm: &DataMatrices) -> Result<PreconditionerM> {
    let proj = dm.projector()?;
    let n_mat = &dm.u0_bar * &proj;
    let m_mat = matops::symmetrize(&(&n_mat * dm.u0_bar.transpose()));
    let eig = SymmetricEigen::new(m_mat.clone()).eigenvalues;
    let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max_eig = eig.iter().copied().fold(0.0, f64::max);
    if !(min_eig > M_PD_TOL * max_eig) || max_eig == 0.0 {
        return Err(Error::Degenerate(format!(
            "M is not positive definite (min eigenvalue {min_eig:.3e}); data is effectively not persistently exciting"
        )));
    }
    Ok(PreconditionerM {
        m_mat,
        n_mat,
        min_eig,
    })
}

fn projected_step(
    xi: &CovariancePolicy,
    projected_grad: &DMatrix<f64>,
    eta: f64,
) -> Result<CovariancePolicy> {
    CovariancePolicy::from_stacked(&(xi.stacked() - projected_grad * eta))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Input(format!("stepsize must be finite and >= 0, got {eta}")));
    }
    Ok(())
}

/// One projected-gradient step `xi+ = xi - eta Pi grad J(xi)`.
///
/// The step keeps the equality constraints (up to round-off) but does not
/// enforce stability; an unstable successor is reported as `Error::Unstable`.
pub fn deepo_step(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    eta: f64,
) -> Result<CovariancePolicy> {
    check_eta(eta)?;
    let grad = lqt::gradient_xi(xi, dm, cp)?;
    let proj = dm.projector()?;
    let next = projected_step(xi, &(proj * grad), eta)?;
    let rho = matops::spectral_radius(&(&dm.x1_bar * &next.v_mat))?;
    if !(rho < 1.0 - matops::STABILITY_MARGIN) {
        return Err(Error::Unstable { rho });
    }
    Ok(next)
}

/// One preconditioned model-based step `theta+ = theta - eta M grad J(theta)`.
pub fn model_po_step(
    theta: &GainPolicy,
    m_mat: &DMatrix<f64>,
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    cp: &CostParams,
    eta: f64,
) -> Result<GainPolicy> {
    check_eta(eta)?;
    if m_mat.nrows() != theta.m() || m_mat.ncols() != theta.m() {
        return Err(Error::Dimension(format!(
            "M is {}x{} but the policy has m={}",
            m_mat.nrows(),
            m_mat.ncols(),
            theta.m()
        )));
    }
    let (grad_k, grad_l) = lqt::gradient_theta(theta, a_hat, b_hat, cp)?;
    GainPolicy::new(
        &theta.k_gain - m_mat * grad_k * eta,
        &theta.l_ff - m_mat * grad_l * eta,
    )
}

/// Optimal tracking policy for a model `(A, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndirectOptimum {
    pub k_hat: DMatrix<f64>,
    pub l_hat: DVector<f64>,
    pub p_hat: DMatrix<f64>,
}

impl IndirectOptimum {
    pub fn policy(&self) -> GainPolicy {
        GainPolicy {
            k_gain: self.k_hat.clone(),
            l_ff: self.l_hat.clone(),
        }
    }
}

/// Riccati feedback plus the setpoint feedforward
/// `l = (B^T P B + R)^{-1} B^T (I - A - B K)^{-T} Q delta`.
pub fn indirect_optimal(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    cp: &CostParams,
) -> Result<IndirectOptimum> {
    let n = a_hat.nrows();
    if cp.n() != n || cp.m() != b_hat.ncols() {
        return Err(Error::Dimension(format!(
            "cost has n={}, m={} but the model has n={n}, m={}",
            cp.n(),
            cp.m(),
            b_hat.ncols()
        )));
    }
    let p_hat = matops::solve_dare(a_hat, b_hat, &cp.q_mat, &cp.r_mat)?;
    let k_hat = matops::riccati_gain(a_hat, b_hat, &cp.r_mat, &p_hat)?;
    let resolvent = DMatrix::<f64>::identity(n, n) - a_hat - b_hat * &k_hat;
    let costate = resolvent
        .transpose()
        .lu()
        .solve(&(&cp.q_mat * &cp.delta))
        .ok_or_else(|| {
            Error::Degenerate("I - A - BK is singular; the setpoint cannot be tracked".into())
        })?;
    let gram = matops::symmetrize(&(&cp.r_mat + b_hat.transpose() * &p_hat * b_hat));
    let l_hat = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("B^T P B + R is not positive definite".into()))?
        .solve(&(b_hat.transpose() * costate));
    Ok(IndirectOptimum {
        k_hat,
        l_hat,
        p_hat,
    })
}

/// Suboptimality through the performance-difference identity
/// `J(theta) - J* = tr(H D Phi D^T)` with `D = [K - K*, l - l*]`,
/// `H = R + B^T P* B` and `Phi` the stationary second moment under `theta`.
/// Unlike `J(theta) - J*`, this stays accurate when the gap is far below
/// the round-off level of `J*`.
pub fn optimality_gap(
    theta: &GainPolicy,
    optimum: &IndirectOptimum,
    b_hat: &DMatrix<f64>,
    r_mat: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> f64 {
    let h = r_mat + b_hat.transpose() * &optimum.p_hat * b_hat;
    let diff = theta.stacked() - optimum.policy().stacked();
    (h * &diff * phi * diff.transpose()).trace()
}

/// Stepsize and stopping rules for [`run_deepo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once `||Pi grad J||_F <= grad_tol` (checked before stepping).
    pub grad_tol: f64,
    pub record_every: usize,
    /// Halve `eta` on cost increase or instability; never grow it.
    pub backtracking: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            eta: 0.02,
            max_iters: 5000,
            grad_tol: 1e-10,
            record_every: 1,
            backtracking: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iter: usize,
    pub cost: f64,
    pub cost_gap: f64,
    pub policy_error: f64,
    pub grad_norm: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    /// The step out of iterate `iter` left the stable set.
    Infeasible { iter: usize, rho: f64 },
}

/// Certainty-equivalence optimum of the data: the fixed point of the iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CeReference {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub optimum: IndirectOptimum,
    pub xi_star: CovariancePolicy,
    pub j_star: f64,
}

impl CeReference {
    pub fn from_data(dm: &DataMatrices, cp: &CostParams) -> Result<Self> {
        let est = param::identify_from_data_matrices(dm)?;
        let optimum = indirect_optimal(&est.a_hat, &est.b_hat, cp)?;
        let xi_star = param::lift_policy(&optimum.policy(), dm)?;
        let j_star = lqt::evaluate_xi(&xi_star, dm, cp)?.cost;
        Ok(Self {
            a_hat: est.a_hat,
            b_hat: est.b_hat,
            optimum,
            xi_star,
            j_star,
        })
    }

    /// Suboptimality of a feasible `xi` given its evaluation.
    pub fn gap(
        &self,
        xi: &CovariancePolicy,
        dm: &DataMatrices,
        cp: &CostParams,
        eval: &PolicyEvaluation,
    ) -> f64 {
        let theta = GainPolicy {
            k_gain: &dm.u0_bar * &xi.v_mat,
            l_ff: &dm.u0_bar * &xi.h_vec,
        };
        optimality_gap(&theta, &self.optimum, &self.b_hat, &cp.r_mat, &eval.phi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterateTrace {
    pub records: Vec<IterateRecord>,
    pub status: RunStatus,
    pub final_policy: CovariancePolicy,
    /// Stepsize in force at the end (differs from the configured one only
    /// after backtracking).
    pub final_eta: f64,
    pub j_star: f64,
    pub xi_star: CovariancePolicy,
}

impl IterateTrace {
    pub fn last(&self) -> Option<&IterateRecord> {
        self.records.last()
    }
}

struct Iterate {
    xi: CovariancePolicy,
    eval: PolicyEvaluation,
    projected_grad: DMatrix<f64>,
}

fn evaluate_iterate(
    xi: CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    proj: &DMatrix<f64>,
) -> Result<Iterate> {
    let eval = lqt::evaluate_xi(&xi, dm, cp)?;
    let projected_grad = proj * eval.gradient();
    Ok(Iterate {
        xi,
        eval,
        projected_grad,
    })
}

/// Runs the projected-gradient iteration from a feasible `xi0`.
///
/// A step that leaves the stable set ends the run with
/// `RunStatus::Infeasible` (or, with backtracking, shrinks `eta`).
pub fn run_deepo(
    xi0: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    sc: &StepConfig,
) -> Result<IterateTrace> {
    let reference = CeReference::from_data(dm, cp)?;
    run_deepo_with_reference(xi0, dm, cp, sc, &reference)
}

pub fn run_deepo_with_reference(
    xi0: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    sc: &StepConfig,
    reference: &CeReference,
) -> Result<IterateTrace> {
    if !(sc.eta > 0.0 && sc.eta.is_finite()) {
        return Err(Error::Input(format!("stepsize must be positive, got {}", sc.eta)));
    }
    let record_every = sc.record_every.max(1);
    let proj = dm.projector()?;
    let mut current = evaluate_iterate(xi0.clone(), dm, cp, &proj)?;
    let mut eta = sc.eta;
    let mut records = Vec::with_capacity(sc.max_iters / record_every + 2);

    let make_record = |iter: usize, it: &Iterate| -> Result<IterateRecord> {
        Ok(IterateRecord {
            iter,
            cost: it.eval.cost,
            cost_gap: reference.gap(&it.xi, dm, cp, &it.eval),
            policy_error: it.xi.distance(&reference.xi_star),
            grad_norm: it.projected_grad.norm(),
            rho: matops::spectral_radius(&(&dm.x1_bar * &it.xi.v_mat))?,
        })
    };

    let mut iter = 0;
    let status = loop {
        let record = make_record(iter, &current)?;
        let done = record.grad_norm <= sc.grad_tol || iter >= sc.max_iters;
        if iter % record_every == 0 || done {
            records.push(record);
        }
        if record.grad_norm <= sc.grad_tol {
            break RunStatus::Converged;
        }
        if iter >= sc.max_iters {
            break RunStatus::MaxIters;
        }

        let mut attempts = 0;
        let next = loop {
            let candidate = projected_step(&current.xi, &current.projected_grad, eta)?;
            let rho = matops::spectral_radius(&(&dm.x1_bar * &candidate.v_mat))?;
            let stepped = match evaluate_iterate(candidate, dm, cp, &proj) {
                Ok(it) => Some(it),
                Err(e) if e.is_numerical() => None,
                Err(e) => return Err(e),
            };
            let slack = COST_INCREASE_SLACK * current.eval.cost.abs().max(1.0);
            match stepped {
                Some(it) if !sc.backtracking || it.eval.cost <= current.eval.cost + slack => {
                    break Ok(it)
                }
                _ if sc.backtracking && attempts < MAX_BACKTRACKS => {
                    eta *= 0.5;
                    attempts += 1;
                }
                _ => break Err(RunStatus::Infeasible { iter, rho }),
            }
        };
        match next {
            Ok(it) => current = it,
            Err(status) => break status,
        }
        iter += 1;
    };

    Ok(IterateTrace {
        records,
        status,
        final_policy: current.xi,
        final_eta: eta,
        j_star: reference.j_star,
        xi_star: reference.xi_star.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Per-iteration contraction `exp(slope)` of the cost gap.
    pub rate: f64,
    pub r_squared: f64,
    /// Number of records used by the fit.
    pub points: usize,
}

/// Least-squares fit of `ln(cost_gap)` against the iteration index, after
/// dropping the first `burn_in_frac` of the records.
///
/// Only the prefix before the gap falls to the resolution of the cost
/// (`eps * |J*|`) is used; past that point the gap is round-off.
pub fn fit_convergence_rate(trace: &IterateTrace, burn_in_frac: f64) -> Result<RateFit> {
    fit_log_linear(
        trace.records.iter().map(|r| (r.iter as f64, r.cost_gap)),
        trace.records.len(),
        burn_in_frac,
        f64::EPSILON * trace.j_star.abs(),
    )
}

/// Fits the prefix of `points` (after burn-in) whose gap stays above `floor`.
pub fn fit_log_linear(
    points: impl Iterator<Item = (f64, f64)>,
    len: usize,
    burn_in_frac: f64,
    floor: f64,
) -> Result<RateFit> {
    if !(0.0..1.0).contains(&burn_in_frac) {
        return Err(Error::Input(format!(
            "burn-in fraction must lie in [0, 1), got {burn_in_frac}"
        )));
    }
    let skip = (burn_in_frac * len as f64).floor() as usize;
    let pts: Vec<(f64, f64)> = points
        .skip(skip)
        .take_while(|&(_, gap)| gap > floor.max(0.0) && gap.is_finite())
        .map(|(x, gap)| (x, gap.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::Degenerate(format!(
            "rate fit needs at least 10 positive post-burn-in gaps, got {}",
            pts.len()
        )));
    }
    let count = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / count;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if sxx == 0.0 || syy <= f64::EPSILON * mean_y.abs().max(1.0) * count {
        return Err(Error::Degenerate(
            "cost gap is constant; no contraction rate can be fitted".into(),
        ));
    }
    let slope = sxy / sxx;
    let r_squared = (sxy * sxy) / (sxx * syy);
    Ok(RateFit {
        rate: slope.exp(),
        r_squared,
        points: pts.len(),
    })
}
