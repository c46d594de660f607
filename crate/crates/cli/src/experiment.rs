//! End-to-end pipeline: plant, data, cost, DeePO run, summary.

use std::fs;
use std::path::{Path, PathBuf};

use deepo_lqt::io;
use deepo_lqt::lqt::{self, CostParams};
use deepo_lqt::opt::{self, CeReference, IterateTrace, RateFit, RunStatus};
use deepo_lqt::param::{self, CovariancePolicy, DataMatrices, GainPolicy};
use deepo_lqt::plant::{self, LinearSystem, OfflineDataset};
use deepo_lqt::{Error, Result};
use serde::Serialize;

use crate::config::{ExperimentConfig, SystemMode, TraceFormat};

/// Fraction of the trace skipped before fitting the contraction rate.
pub const BURN_IN_FRAC: f64 = 0.05;
/// Final policy error required by `reproduce`.
pub const REPRODUCE_POLICY_TOL: f64 = 1e-6;
pub const REPRODUCE_MIN_R2: f64 = 0.99;

/// Every object the run needs, built from a resolved config.
pub struct Setup {
    pub config: ExperimentConfig,
    pub system: LinearSystem,
    pub dataset: OfflineDataset,
    pub dm: DataMatrices,
    pub cp: CostParams,
    pub xi0: CovariancePolicy,
}

impl Setup {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolve()?;
        let w_cov = config.w_matrix()?;
        let system = build_system(&config)?.with_noise(w_cov.clone())?;
        let dataset = plant::collect_data(&system, config.data.t_len, config.data.seed, config.data.noise_on)?;
        Self::with_dataset(config, system, dataset)
    }

    /// Uses an externally supplied dataset in place of collecting one.
    pub fn with_dataset(
        config: ExperimentConfig,
        system: LinearSystem,
        dataset: OfflineDataset,
    ) -> Result<Self> {
        let cp = CostParams::new(
            config.q_matrix()?,
            config.r_matrix()?,
            config.delta()?,
            config.w_matrix()?,
        )?;
        let dm = param::build_data_matrices(&dataset)?;
        let theta0 = GainPolicy::new(config.init_k()?, config.init_l()?)?;
        let xi0 = param::lift_policy(&theta0, &dm)?;
        Ok(Self {
            config,
            system,
            dataset,
            dm,
            cp,
            xi0,
        })
    }
}

pub fn build_system(config: &ExperimentConfig) -> Result<LinearSystem> {
    match config.system.mode {
        SystemMode::Paper => Ok(plant::paper_system()),
        SystemMode::Random => plant::generate_system(
            config.system.n,
            config.system.m,
            config.system.seed,
            config.system.target_rho,
        ),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    #[serde(flatten)]
    pub status: RunStatus,
    pub iterations: usize,
    pub final_cost: f64,
    pub final_cost_gap: f64,
    pub final_policy_error: f64,
    pub final_grad_norm: f64,
    pub j_star: f64,
    pub xi_star_norm: f64,
    pub rate: Option<f64>,
    pub r_squared: Option<f64>,
    pub rate_fit_error: Option<String>,
    /// Largest increase of the cost gap between consecutive records.
    pub max_gap_increase: f64,
    /// Cost of the final policy on the true plant.
    pub true_cost_final: Option<f64>,
    /// True-plant cost of the certainty-equivalence optimum.
    pub true_cost_ce: Option<f64>,
    /// Optimal cost of the true plant.
    pub true_cost_optimal: Option<f64>,
}

pub struct RunOutcome {
    pub trace: IterateTrace,
    pub fit: Result<RateFit>,
    pub summary: Summary,
    pub reference: CeReference,
}

pub fn run(setup: &Setup) -> Result<RunOutcome> {
    let reference = CeReference::from_data(&setup.dm, &setup.cp)?;
    let trace = opt::run_deepo_with_reference(
        &setup.xi0,
        &setup.dm,
        &setup.cp,
        &setup.config.optimizer,
        &reference,
    )?;
    let fit = opt::fit_convergence_rate(&trace, BURN_IN_FRAC);
    let summary = summarize(setup, &trace, &fit, &reference);
    Ok(RunOutcome {
        trace,
        fit,
        summary,
        reference,
    })
}

fn summarize(
    setup: &Setup,
    trace: &IterateTrace,
    fit: &Result<RateFit>,
    reference: &CeReference,
) -> Summary {
    let last = trace.last().copied().expect("a trace always holds the initial record");
    let max_gap_increase = trace
        .records
        .windows(2)
        .map(|w| w[1].cost_gap - w[0].cost_gap)
        .fold(f64::NEG_INFINITY, f64::max);
    let sys = &setup.system;
    let true_cost = |theta: &GainPolicy| {
        lqt::evaluate_theta(theta, &sys.a, &sys.b, &setup.cp).ok().map(|e| e.cost)
    };
    let final_theta = param::recover_policy(&trace.final_policy, &setup.dm).ok();
    let true_optimum = opt::indirect_optimal(&sys.a, &sys.b, &setup.cp).ok();
    Summary {
        status: trace.status.clone(),
        iterations: last.iter,
        final_cost: last.cost,
        final_cost_gap: last.cost_gap,
        final_policy_error: last.policy_error,
        final_grad_norm: last.grad_norm,
        j_star: trace.j_star,
        xi_star_norm: trace.xi_star.stacked().norm(),
        rate: fit.as_ref().ok().map(|f| f.rate),
        r_squared: fit.as_ref().ok().map(|f| f.r_squared),
        rate_fit_error: fit.as_ref().err().map(|e| e.to_string()),
        max_gap_increase,
        true_cost_final: final_theta.as_ref().and_then(true_cost),
        true_cost_ce: true_cost(&reference.optimum.policy()),
        true_cost_optimal: true_optimum.and_then(|o| true_cost(&o.policy())),
    }
}

/// Path of the resolved-config echo written beside a trace.
pub fn sidecar_path(trace_path: &Path) -> PathBuf {
    trace_path.with_extension("config.json")
}

/// Writes the trace in the configured format plus the config sidecar.
pub fn write_outputs(config: &ExperimentConfig, trace: &IterateTrace) -> Result<PathBuf> {
    let path = &config.output.trace_path;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let body = match config.output.format {
        TraceFormat::Csv => io::trace_to_csv(&trace.records),
        TraceFormat::Json => serde_json::to_string_pretty(&trace.records)?,
    };
    fs::write(path, body)?;
    fs::write(sidecar_path(path), config.to_json_pretty())?;
    Ok(path.clone())
}

/// Outcome of the acceptance check run by `reproduce`.
pub fn reproduce_verdict(outcome: &RunOutcome) -> std::result::Result<(), String> {
    let s = &outcome.summary;
    if let RunStatus::Infeasible { iter, rho } = s.status {
        return Err(format!(
            "iterate left the stable set after step {iter} (rho = {rho:.6})"
        ));
    }
    let mut problems = Vec::new();
    if !(s.final_policy_error <= REPRODUCE_POLICY_TOL) {
        problems.push(format!(
            "final policy error {:.3e} exceeds {REPRODUCE_POLICY_TOL:e}",
            s.final_policy_error
        ));
    }
    match &outcome.fit {
        Ok(fit) if fit.r_squared >= REPRODUCE_MIN_R2 => {}
        Ok(fit) => problems.push(format!(
            "rate fit R^2 = {:.6} is below {REPRODUCE_MIN_R2}",
            fit.r_squared
        )),
        Err(e) => problems.push(format!("rate fit failed: {e}")),
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Errors that are the user's fault map to exit code 2.
pub fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Input(_)
            | Error::Dimension(_)
            | Error::Parse(_)
            | Error::DataLength { .. }
            | Error::Io(_)
            | Error::Json(_)
    )
}
