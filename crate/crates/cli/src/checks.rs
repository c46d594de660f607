//! Verification reports behind `gradcheck`, `equivcheck` and `compare`.

use deepo_lqt::lqt::{self, CostParams};
use deepo_lqt::opt::{self, CeReference};
use deepo_lqt::param::{self, CovariancePolicy, DataMatrices, GainPolicy};
use deepo_lqt::plant::LinearSystem;
use deepo_lqt::{matops, Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub const FD_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const EQUIVCHECK_TOL: f64 = 1e-10;

const MAX_DRAWS: usize = 1000;

/// Central differences of the cost in every raw entry of `[V h]`.
pub fn finite_difference_gradient(
    xi: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    step: f64,
) -> Result<DMatrix<f64>> {
    let base = xi.stacked();
    let mut grad = DMatrix::zeros(base.nrows(), base.ncols());
    for j in 0..base.ncols() {
        for i in 0..base.nrows() {
            let eval_at = |offset: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted[(i, j)] += offset;
                let pol = CovariancePolicy::from_stacked(&shifted)?;
                Ok(lqt::evaluate_xi_relaxed(&pol, dm, cp)?.cost)
            };
            grad[(i, j)] = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// A feasible covariance policy whose gain is a random perturbation of
/// the certainty-equivalence optimum.
pub fn random_feasible_policy(
    dm: &DataMatrices,
    reference: &CeReference,
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> Result<CovariancePolicy> {
    let theta_star = reference.optimum.policy();
    let (m, n) = (theta_star.m(), theta_star.n());
    for _ in 0..MAX_DRAWS {
        let dk = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * scale;
        let dl = nalgebra::DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)) * scale;
        let theta = GainPolicy::new(&theta_star.k_gain + dk, &theta_star.l_ff + dl)?;
        let closed = &reference.a_hat + &reference.b_hat * &theta.k_gain;
        if matops::spectral_radius(&closed)? < 0.95 {
            return param::lift_policy(&theta, dm);
        }
    }
    Err(Error::Degenerate(format!(
        "no stabilizing perturbation of scale {scale} in {MAX_DRAWS} draws"
    )))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub samples: usize,
    pub step: f64,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient with central differences at the initial
/// policy and at `samples - 1` random feasible policies.
pub fn gradcheck(
    xi0: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let reference = CeReference::from_data(dm, cp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = vec![xi0.clone()];
    while policies.len() < samples.max(1) {
        policies.push(random_feasible_policy(dm, &reference, &mut rng, 0.1)?);
    }
    let mut relative_errors = Vec::with_capacity(policies.len());
    for xi in &policies {
        let analytic = lqt::evaluate_xi(xi, dm, cp)?.gradient();
        let numeric = finite_difference_gradient(xi, dm, cp, FD_STEP)?;
        relative_errors.push((&analytic - &numeric).norm() / analytic.norm().max(f64::MIN_POSITIVE));
    }
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        samples: policies.len(),
        step: FD_STEP,
        relative_errors,
        max_relative_error,
        tolerance: GRADCHECK_TOL,
        passed: max_relative_error <= GRADCHECK_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivcheckReport {
    pub steps: usize,
    pub eta: f64,
    /// Per step, `|| recover(deepo_step(xi)) - model_po_step(recover(xi)) ||_F`.
    pub discrepancies: Vec<f64>,
    pub max_discrepancy: f64,
    pub m_factor_residual: f64,
    pub m_min_eig: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs DeePO from `xi0` and compares each step with the preconditioned
/// model-based step on the least-squares estimates.
pub fn equivcheck(
    xi0: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    eta: f64,
    steps: usize,
) -> Result<EquivcheckReport> {
    let est = param::identify_from_data_matrices(dm)?;
    let m = opt::compute_m(dm)?;
    let m_factor_residual = (&m.m_mat - &m.n_mat * m.n_mat.transpose()).norm();
    let mut xi = xi0.clone();
    let mut discrepancies = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = opt::deepo_step(&xi, dm, cp, eta)?;
        let data_side = param::recover_policy(&next, dm)?;
        let theta = param::recover_policy(&xi, dm)?;
        let model_side = opt::model_po_step(&theta, &m.m_mat, &est.a_hat, &est.b_hat, cp, eta)?;
        discrepancies.push((data_side.stacked() - model_side.stacked()).norm());
        xi = next;
    }
    let max_discrepancy = discrepancies.iter().copied().fold(0.0, f64::max);
    Ok(EquivcheckReport {
        steps,
        eta,
        discrepancies,
        max_discrepancy,
        m_factor_residual,
        m_min_eig: m.min_eig,
        tolerance: EQUIVCHECK_TOL,
        passed: max_discrepancy <= EQUIVCHECK_TOL && m_factor_residual <= 1e-12 && m.min_eig > 0.0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyCosts {
    /// Cost under the certainty-equivalent model `(A_hat, B_hat)`.
    pub model_cost: Option<f64>,
    /// Cost on the true plant.
    pub true_cost: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub deepo: PolicyCosts,
    pub indirect: PolicyCosts,
    pub true_optimal: PolicyCosts,
    /// `|| theta_deepo - theta_indirect ||_F`.
    pub deepo_vs_indirect: f64,
    /// `|| theta_indirect - theta_true ||_F`, the identification error.
    pub indirect_vs_true: f64,
}

pub fn compare(
    deepo_policy: &CovariancePolicy,
    dm: &DataMatrices,
    cp: &CostParams,
    system: &LinearSystem,
) -> Result<CompareReport> {
    let reference = CeReference::from_data(dm, cp)?;
    let truth = opt::indirect_optimal(&system.a, &system.b, cp)?;
    let costs = |theta: &GainPolicy| PolicyCosts {
        model_cost: lqt::evaluate_theta(theta, &reference.a_hat, &reference.b_hat, cp)
            .ok()
            .map(|e| e.cost),
        true_cost: lqt::evaluate_theta(theta, &system.a, &system.b, cp)
            .ok()
            .map(|e| e.cost),
    };
    let theta_deepo = param::recover_policy(deepo_policy, dm)?;
    let theta_ce = reference.optimum.policy();
    let theta_true = truth.policy();
    Ok(CompareReport {
        deepo: costs(&theta_deepo),
        indirect: costs(&theta_ce),
        true_optimal: costs(&theta_true),
        deepo_vs_indirect: (theta_deepo.stacked() - theta_ce.stacked()).norm(),
        indirect_vs_true: (theta_ce.stacked() - theta_true.stacked()).norm(),
    })
}
