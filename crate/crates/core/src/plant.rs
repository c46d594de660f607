//! Ground-truth LTI plant: system generation, offline data collection,
//! persistent-excitation checks and closed-loop simulation.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; Gaussian
//! samples use `rand_distr::StandardNormal` (ziggurat), and correlated
//! noise is `W^{1/2} z` with the symmetric square root. Monte-Carlo rollout
//! `i` uses ChaCha stream `i` of the same seed, so rollout 0 coincides with
//! a plain `rollout_policy` call.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lqt::CostParams;
use crate::matops;
use crate::param::GainPolicy;

/// State norm beyond which a rollout is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Redraws allowed when a generated pair is not controllable.
pub const MAX_GENERATION_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Process-noise covariance `W`.
    pub w_cov: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, w_cov: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || w_cov.nrows() != n || w_cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "system matrices disagree: A {}x{}, B {}x{}, W {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                w_cov.nrows(),
                w_cov.ncols()
            )));
        }
        if n == 0 || b.ncols() == 0 {
            return Err(Error::Dimension("system must have n >= 1 and m >= 1".into()));
        }
        if a.iter().chain(b.iter()).chain(w_cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("system matrices have non-finite entries".into()));
        }
        if matops::asymmetry(&w_cov) > 1e-12 * w_cov.norm().max(1.0)
            || matops::min_sym_eigenvalue(&w_cov) < -1e-12
        {
            return Err(Error::Input("noise covariance must be symmetric PSD".into()));
        }
        Ok(Self { a, b, w_cov })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_controllable(&self) -> bool {
        matops::controllability_rank(&self.a, &self.b) == self.n()
    }

    pub fn with_noise(mut self, w_cov: DMatrix<f64>) -> Result<Self> {
        self.w_cov = w_cov;
        Self::new(self.a, self.b, self.w_cov)
    }
}

/// The 4-state, 2-input benchmark plant, printed to three decimals.
pub fn paper_system() -> LinearSystem {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        -0.229, 0.247, -0.511, 0.493,
         0.846, 0.159,  0.722, 0.529,
        -0.018, 0.070,  0.300, 0.758,
         0.247, 0.546, -0.511, -0.176,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
        -0.631,  0.938,
         0.262, -0.796,
         0.461, -0.180,
         0.774,  0.112,
    ]);
    LinearSystem {
        a,
        b,
        w_cov: DMatrix::zeros(4, 4),
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill order is part of the reproducibility contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Standard-normal `(A, B)` with `A` rescaled to spectral radius
/// `target_rho`. Uncontrollable draws are retried with `seed + 1, seed + 2, ...`.
pub fn generate_system(n: usize, m: usize, seed: u64, target_rho: f64) -> Result<LinearSystem> {
    if n == 0 || m == 0 {
        return Err(Error::Dimension("system must have n >= 1 and m >= 1".into()));
    }
    if !(target_rho > 0.0 && target_rho < 1.0) {
        return Err(Error::Input(format!(
            "target spectral radius must lie in (0, 1), got {target_rho}"
        )));
    }
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let a = randn(&mut rng, n, n);
        let b = randn(&mut rng, n, m);
        let rho = matops::spectral_radius(&a)?;
        if rho <= f64::MIN_POSITIVE {
            continue;
        }
        let sys = LinearSystem {
            a: a * (target_rho / rho),
            b,
            w_cov: DMatrix::zeros(n, n),
        };
        if sys.is_controllable() {
            return Ok(sys);
        }
    }
    Err(Error::Generation {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

/// Offline trajectory record `X0`, `U0`, `X1` (and the noise `W0` when
/// it was sampled).
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub x0_seq: DMatrix<f64>,
    pub u0_seq: DMatrix<f64>,
    pub x1_seq: DMatrix<f64>,
    pub w0_seq: Option<DMatrix<f64>>,
}

impl OfflineDataset {
    pub fn new(
        x0_seq: DMatrix<f64>,
        u0_seq: DMatrix<f64>,
        x1_seq: DMatrix<f64>,
        w0_seq: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let t = x0_seq.ncols();
        let n = x0_seq.nrows();
        let ok = t > 0
            && n > 0
            && u0_seq.nrows() > 0
            && u0_seq.ncols() == t
            && x1_seq.ncols() == t
            && x1_seq.nrows() == n
            && w0_seq.as_ref().is_none_or(|w| w.nrows() == n && w.ncols() == t);
        if !ok {
            return Err(Error::Dimension(format!(
                "dataset blocks disagree: X0 {}x{}, U0 {}x{}, X1 {}x{}{}",
                x0_seq.nrows(),
                x0_seq.ncols(),
                u0_seq.nrows(),
                u0_seq.ncols(),
                x1_seq.nrows(),
                x1_seq.ncols(),
                w0_seq
                    .as_ref()
                    .map(|w| format!(", W0 {}x{}", w.nrows(), w.ncols()))
                    .unwrap_or_default()
            )));
        }
        let all = x0_seq
            .iter()
            .chain(u0_seq.iter())
            .chain(x1_seq.iter())
            .chain(w0_seq.iter().flat_map(|w| w.iter()));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset has non-finite entries".into()));
        }
        Ok(Self {
            x0_seq,
            u0_seq,
            x1_seq,
            w0_seq,
        })
    }

    pub fn n(&self) -> usize {
        self.x0_seq.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0_seq.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.x0_seq.ncols()
    }

    /// Stacked `D0 = [U0; X0]`.
    pub fn d0(&self) -> DMatrix<f64> {
        let (n, m, t) = (self.n(), self.m(), self.t_len());
        let mut d0 = DMatrix::zeros(m + n, t);
        d0.view_mut((0, 0), (m, t)).copy_from(&self.u0_seq);
        d0.view_mut((m, 0), (n, t)).copy_from(&self.x0_seq);
        d0
    }
}

/// Draws `x_0` and all inputs i.i.d. standard normal and propagates the
/// plant. Noise `N(0, W)` is sampled and recorded only when `noise_on`.
pub fn collect_data(
    sys: &LinearSystem,
    t_len: usize,
    seed: u64,
    noise_on: bool,
) -> Result<OfflineDataset> {
    let (n, m) = (sys.n(), sys.m());
    if t_len < n + m {
        return Err(Error::DataLength {
            t_len,
            required: n + m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_start = randn(&mut rng, n, 1);
    let u0_seq = randn(&mut rng, m, t_len);
    let w0_seq = if noise_on {
        let root = matops::psd_sqrt(&sys.w_cov);
        Some(&root * randn(&mut rng, n, t_len))
    } else {
        None
    };

    let mut x0_seq = DMatrix::zeros(n, t_len);
    let mut x1_seq = DMatrix::zeros(n, t_len);
    let mut x = x_start.column(0).into_owned();
    for t in 0..t_len {
        x0_seq.set_column(t, &x);
        let mut next = &sys.a * &x + &sys.b * u0_seq.column(t);
        if let Some(w) = &w0_seq {
            next += w.column(t);
        }
        x1_seq.set_column(t, &next);
        x = next;
    }
    OfflineDataset::new(x0_seq, u0_seq, x1_seq, w0_seq)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeReport {
    pub is_pe: bool,
    pub min_singular_value: f64,
}

/// Persistent excitation: `D0` has full row rank `n + m`.
pub fn check_pe(ds: &OfflineDataset) -> PeReport {
    let d0 = ds.d0();
    if d0.nrows() > d0.ncols() {
        return PeReport {
            is_pe: false,
            min_singular_value: 0.0,
        };
    }
    let (rank, min_sv) = matops::rank_with_min_sv(&d0);
    PeReport {
        is_pe: rank == d0.nrows(),
        min_singular_value: min_sv,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub seed: u64,
    pub noise_on: bool,
    /// Leading steps excluded from the cost average.
    pub burn_in: usize,
}

impl RolloutConfig {
    pub fn noiseless(horizon: usize) -> Self {
        Self {
            horizon,
            seed: 0,
            noise_on: false,
            burn_in: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// n x (H+1)
    pub states: DMatrix<f64>,
    /// m x H
    pub inputs: DMatrix<f64>,
    pub average_cost: f64,
}

struct Simulation {
    average_cost: f64,
    states: Option<DMatrix<f64>>,
    inputs: Option<DMatrix<f64>>,
}

fn check_rollout_dims(sys: &LinearSystem, policy: &GainPolicy, cp: &CostParams) -> Result<()> {
    if policy.n() != sys.n() || policy.m() != sys.m() || cp.n() != sys.n() || cp.m() != sys.m() {
        return Err(Error::Dimension(format!(
            "rollout operands disagree: system n={}, m={}; policy n={}, m={}; cost n={}, m={}",
            sys.n(),
            sys.m(),
            policy.n(),
            policy.m(),
            cp.n(),
            cp.m()
        )));
    }
    Ok(())
}

fn simulate(
    sys: &LinearSystem,
    policy: &GainPolicy,
    x_init: DVector<f64>,
    cp: &CostParams,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<Simulation> {
    let (n, m, horizon) = (sys.n(), sys.m(), cfg.horizon);
    if horizon == 0 || cfg.burn_in >= horizon {
        return Err(Error::Input(format!(
            "rollout horizon {horizon} must exceed burn-in {}",
            cfg.burn_in
        )));
    }
    if x_init.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has length {}, expected {n}",
            x_init.len()
        )));
    }
    let noise_root = cfg.noise_on.then(|| matops::psd_sqrt(&sys.w_cov));
    let mut states = record.then(|| DMatrix::zeros(n, horizon + 1));
    let mut inputs = record.then(|| DMatrix::zeros(m, horizon));

    let mut x = x_init;
    let mut u = DVector::zeros(m);
    let mut next = DVector::zeros(n);
    let mut err = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut total = 0.0;
    for t in 0..horizon {
        if let Some(s) = states.as_mut() {
            s.set_column(t, &x);
        }
        u.copy_from(&policy.l_ff);
        u.gemv(1.0, &policy.k_gain, &x, 1.0);
        if let Some(i) = inputs.as_mut() {
            i.set_column(t, &u);
        }
        if t >= cfg.burn_in {
            err.copy_from(&x);
            err -= &cp.delta;
            total += err.dot(&(&cp.q_mat * &err)) + u.dot(&(&cp.r_mat * &u));
        }
        next.gemv(1.0, &sys.a, &x, 0.0);
        next.gemv(1.0, &sys.b, &u, 1.0);
        if let Some(root) = &noise_root {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            next.gemv(1.0, root, &z, 1.0);
        }
        std::mem::swap(&mut x, &mut next);
        let norm = x.norm();
        if !(norm <= DIVERGENCE_GUARD) {
            return Err(Error::Divergence { step: t + 1, norm });
        }
    }
    if let Some(s) = states.as_mut() {
        s.set_column(horizon, &x);
    }
    Ok(Simulation {
        average_cost: total / (horizon - cfg.burn_in) as f64,
        states,
        inputs,
    })
}

/// Simulates `x_{t+1} = A x_t + B (K x_t + l) + w_t` and reports the time
/// average of `(x_t - delta)^T Q (x_t - delta) + u_t^T R u_t`.
pub fn rollout_policy(
    sys: &LinearSystem,
    policy: &GainPolicy,
    x_init: &DVector<f64>,
    cp: &CostParams,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    check_rollout_dims(sys, policy, cp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sim = simulate(sys, policy, x_init.clone(), cp, cfg, &mut rng, true)?;
    Ok(RolloutResult {
        states: sim.states.expect("recorded"),
        inputs: sim.inputs.expect("recorded"),
        average_cost: sim.average_cost,
    })
}

/// Where each Monte-Carlo rollout starts.
#[derive(Clone, Debug, PartialEq)]
pub enum StartState {
    Fixed(DVector<f64>),
    /// Draw `x_0 ~ N(x_bar, Sigma)` from the closed loop's stationary law,
    /// which removes the transient bias from the time average.
    Stationary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    pub noise_on: bool,
    pub burn_in: usize,
    pub start: StartState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Sample mean and standard error of the average cost over independent
/// rollouts. Rollouts run in parallel; the reduction is in rollout order.
pub fn monte_carlo_cost(
    sys: &LinearSystem,
    policy: &GainPolicy,
    cp: &CostParams,
    mc: &MonteCarloConfig,
) -> Result<CostEstimate> {
    check_rollout_dims(sys, policy, cp)?;
    if mc.n_rollouts == 0 {
        return Err(Error::Input("need at least one rollout".into()));
    }
    let stationary = match &mc.start {
        StartState::Fixed(_) => None,
        StartState::Stationary => {
            let closed = &sys.a + &sys.b * &policy.k_gain;
            let n = sys.n();
            let resolvent = DMatrix::<f64>::identity(n, n) - &closed;
            let mean = resolvent
                .lu()
                .solve(&(&sys.b * &policy.l_ff))
                .ok_or_else(|| Error::Degenerate("I - (A + BK) is singular".into()))?;
            let root = if mc.noise_on {
                matops::psd_sqrt(&matops::solve_dlyap_transposed(&closed, &sys.w_cov)?)
            } else {
                DMatrix::zeros(n, n)
            };
            Some((mean, root))
        }
    };
    let cfg = RolloutConfig {
        horizon: mc.horizon,
        seed: mc.seed,
        noise_on: mc.noise_on,
        burn_in: mc.burn_in,
    };
    let costs: Vec<f64> = (0..mc.n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(i as u64);
            let x_init = match (&mc.start, &stationary) {
                (StartState::Fixed(x), _) => x.clone(),
                (StartState::Stationary, Some((mean, root))) => {
                    let z = DVector::from_fn(sys.n(), |_, _| rng.sample(StandardNormal));
                    mean + root * z
                }
                (StartState::Stationary, None) => unreachable!("stationary law computed above"),
            };
            simulate(sys, policy, x_init, cp, &cfg, &mut rng, false).map(|s| s.average_cost)
        })
        .collect::<Result<_>>()?;

    let count = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / count;
    let std_err = if costs.len() > 1 {
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok(CostEstimate { mean, std_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqt::CostParams;

    #[test]
    fn paper_system_is_controllable_and_stable() {
        let sys = paper_system();
        assert!(sys.is_controllable());
        let rho = matops::spectral_radius(&sys.a).unwrap();
        // Three-decimal rounding moves the radius off the nominal 0.8.
        assert!((rho - 0.800_377_521_566).abs() < 1e-9, "rho = {rho}");
        assert!((rho - 0.8).abs() < 5e-4);
    }

    #[test]
    fn generated_systems_hit_target_radius_and_are_controllable() {
        for seed in 0..50 {
            let sys = generate_system(4, 2, seed, 0.8).unwrap();
            let rho = matops::spectral_radius(&sys.a).unwrap();
            assert!((rho - 0.8).abs() <= 1e-9);
            assert_eq!(matops::controllability_rank(&sys.a, &sys.b), 4);
        }
    }

    #[test]
    fn generation_validates_arguments() {
        assert!(matches!(generate_system(0, 1, 0, 0.5), Err(Error::Dimension(_))));
        assert!(matches!(generate_system(2, 1, 0, 1.0), Err(Error::Input(_))));
        assert!(matches!(generate_system(2, 1, 0, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_system(3, 2, 9, 0.5).unwrap(),
            generate_system(3, 2, 9, 0.5).unwrap()
        );
    }

    #[test]
    fn noiseless_collection_follows_dynamics_exactly() {
        let sys = paper_system();
        let ds = collect_data(&sys, 10, 3, false).unwrap();
        assert!(ds.w0_seq.is_none());
        let resid = &ds.x1_seq - &sys.a * &ds.x0_seq - &sys.b * &ds.u0_seq;
        assert!(resid.norm() < 1e-14);
        assert_eq!(matops::rank_with_min_sv(&ds.d0()).0, 6);
        // x_{t+1} of one column is x_t of the next.
        for t in 0..9 {
            assert_eq!(ds.x1_seq.column(t), ds.x0_seq.column(t + 1));
        }
    }

    #[test]
    fn noisy_collection_records_the_noise() {
        let sys = paper_system().with_noise(DMatrix::identity(4, 4) * 0.3).unwrap();
        let ds = collect_data(&sys, 20, 3, true).unwrap();
        let w = ds.w0_seq.as_ref().unwrap();
        let resid = &ds.x1_seq - &sys.a * &ds.x0_seq - &sys.b * &ds.u0_seq;
        assert!((resid - w).norm() < 1e-13);
        assert!(w.norm() > 0.0);
    }

    #[test]
    fn collection_requires_enough_samples() {
        let sys = paper_system();
        assert!(matches!(
            collect_data(&sys, 5, 0, false),
            Err(Error::DataLength { t_len: 5, required: 6 })
        ));
    }

    #[test]
    fn collection_is_deterministic() {
        let sys = paper_system();
        assert_eq!(
            collect_data(&sys, 10, 42, false).unwrap(),
            collect_data(&sys, 10, 42, false).unwrap()
        );
    }

    #[test]
    fn pe_checks() {
        let sys = paper_system();
        for seed in 0..100 {
            let ds = collect_data(&sys, 10, seed, false).unwrap();
            let rep = check_pe(&ds);
            assert!(rep.is_pe && rep.min_singular_value > 0.0);
        }
        let zero = OfflineDataset::new(
            DMatrix::zeros(4, 10),
            DMatrix::zeros(2, 10),
            DMatrix::zeros(4, 10),
            None,
        )
        .unwrap();
        assert!(!check_pe(&zero).is_pe);
    }

    #[test]
    fn zero_trajectory_has_zero_cost() {
        let sys = paper_system();
        let cp = CostParams::identity(4, 2, DVector::zeros(4));
        let k = DMatrix::from_fn(2, 4, |i, j| if i == j { -0.1 } else { 0.0 });
        let policy = GainPolicy::new(k, DVector::zeros(2)).unwrap();
        let res =
            rollout_policy(&sys, &policy, &DVector::zeros(4), &cp, &RolloutConfig::noiseless(100))
                .unwrap();
        assert_eq!(res.average_cost, 0.0);
        assert_eq!(res.states.ncols(), 101);
        assert_eq!(res.inputs.ncols(), 100);
    }

    #[test]
    fn unstable_loop_diverges() {
        let sys = paper_system();
        let cp = CostParams::identity(4, 2, DVector::zeros(4));
        let k = DMatrix::from_fn(2, 4, |_, _| 5.0);
        let policy = GainPolicy::new(k, DVector::zeros(2)).unwrap();
        assert!(matops::spectral_radius(&(&sys.a + &sys.b * &policy.k_gain)).unwrap() > 1.0);
        let err = rollout_policy(
            &sys,
            &policy,
            &DVector::from_element(4, 1.0),
            &cp,
            &RolloutConfig::noiseless(10_000),
        )
        .unwrap_err();
        match err {
            Error::Divergence { step, norm } => assert!(step > 0 && norm > DIVERGENCE_GUARD),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_rollout_monte_carlo_matches_rollout() {
        let sys = paper_system().with_noise(DMatrix::identity(4, 4) * 0.01).unwrap();
        let cp = CostParams::identity(4, 2, DVector::from_element(4, 1.0));
        let policy = GainPolicy::zero(4, 2);
        let x0 = DVector::from_element(4, 0.5);
        let cfg = RolloutConfig {
            horizon: 500,
            seed: 77,
            noise_on: true,
            burn_in: 0,
        };
        let single = rollout_policy(&sys, &policy, &x0, &cp, &cfg).unwrap();
        let mc = monte_carlo_cost(
            &sys,
            &policy,
            &cp,
            &MonteCarloConfig {
                horizon: 500,
                n_rollouts: 1,
                seed: 77,
                noise_on: true,
                burn_in: 0,
                start: StartState::Fixed(x0),
            },
        )
        .unwrap();
        assert_eq!(mc.mean, single.average_cost);
        assert_eq!(mc.std_err, 0.0);
    }

    #[test]
    fn noiseless_monte_carlo_has_no_spread() {
        let sys = paper_system();
        let cp = CostParams::identity(4, 2, DVector::from_element(4, 1.0));
        let policy = GainPolicy::zero(4, 2);
        let x0 = DVector::from_element(4, 0.2);
        let single =
            rollout_policy(&sys, &policy, &x0, &cp, &RolloutConfig::noiseless(300)).unwrap();
        let mc = monte_carlo_cost(
            &sys,
            &policy,
            &cp,
            &MonteCarloConfig {
                horizon: 300,
                n_rollouts: 8,
                seed: 5,
                noise_on: false,
                burn_in: 0,
                start: StartState::Fixed(x0),
            },
        )
        .unwrap();
        assert_eq!(mc.std_err, 0.0);
        assert_eq!(mc.mean, single.average_cost);
    }
}
