//! Reference computations used as oracles by the integration tests. They
//! deliberately avoid the library's solvers: Lyapunov equations go through
//! an explicit Kronecker solve, the Riccati equation through plain value
//! iteration, and the feedforward through the steady-state KKT system.
#![allow(dead_code)]

use deepo_lqt::lqt::CostParams;
use deepo_lqt::param;
use deepo_lqt::plant::{self, LinearSystem, OfflineDataset};
use deepo_lqt::param::{CovariancePolicy, DataMatrices, GainPolicy};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `S = f S f^T + w` via `(I - f kron f) vec(S) = vec(w)`.
pub fn stationary_covariance(f: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.nrows();
    let lhs = DMatrix::identity(n * n, n * n) - f.kronecker(f);
    let sol = lhs
        .full_piv_lu()
        .solve(&DVector::from_column_slice(w.as_slice()))
        .expect("stable f gives a nonsingular operator");
    DMatrix::from_column_slice(n, n, sol.as_slice())
}

/// Average cost of `u = K x + l` on `x+ = A x + B u + w` computed from the
/// stationary mean and covariance.
pub fn model_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    l: &DVector<f64>,
    cp: &CostParams,
) -> f64 {
    let n = a.nrows();
    let f = a + b * k;
    let mean = (DMatrix::identity(n, n) - &f)
        .full_piv_lu()
        .solve(&(b * l))
        .expect("I - F invertible");
    let sigma = stationary_covariance(&f, &cp.w_cov);
    let u_mean = k * &mean + l;
    let err = &mean - &cp.delta;
    (&cp.q_mat * &sigma).trace()
        + (k.transpose() * &cp.r_mat * k * &sigma).trace()
        + err.dot(&(&cp.q_mat * &err))
        + u_mean.dot(&(&cp.r_mat * &u_mean))
}

/// The same average cost written in the data-based closed loop of `xi`,
/// valid for any `xi` with `rho(X1_bar V) < 1` (feasible or not).
pub fn data_cost(xi: &CovariancePolicy, dm: &DataMatrices, cp: &CostParams) -> f64 {
    let n = dm.n();
    let f = &dm.x1_bar * &xi.v_mat;
    let k = &dm.u0_bar * &xi.v_mat;
    let offset = &dm.x1_bar * &xi.h_vec;
    let u_off = &dm.u0_bar * &xi.h_vec;
    let mean = (DMatrix::identity(n, n) - &f)
        .full_piv_lu()
        .solve(&offset)
        .expect("I - F invertible");
    let sigma = stationary_covariance(&f, &cp.w_cov);
    let u_mean = &k * &mean + &u_off;
    let err = &mean - &cp.delta;
    (&cp.q_mat * &sigma).trace()
        + (k.transpose() * &cp.r_mat * &k * &sigma).trace()
        + err.dot(&(&cp.q_mat * &err))
        + u_mean.dot(&(&cp.r_mat * &u_mean))
}

/// Central differences of `data_cost` in every raw entry of `[V h]`.
pub fn fd_gradient(xi: &CovariancePolicy, dm: &DataMatrices, cp: &CostParams, step: f64) -> DMatrix<f64> {
    let base = xi.stacked();
    DMatrix::from_fn(base.nrows(), base.ncols(), |i, j| {
        let at = |d: f64| {
            let mut s = base.clone();
            s[(i, j)] += d;
            data_cost(&CovariancePolicy::from_stacked(&s).unwrap(), dm, cp)
        };
        (at(step) - at(-step)) / (2.0 * step)
    })
}

/// Riccati value iteration `P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`.
pub fn dare_value_iteration(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..200_000 {
        let btpa = b.transpose() * &p * a;
        let gram = r + b.transpose() * &p * b;
        let next = q + a.transpose() * &p * a
            - btpa.transpose() * gram.clone().try_inverse().unwrap() * &btpa;
        let next = (&next + next.transpose()) * 0.5;
        let done = (&next - &p).norm() <= 1e-14 * next.norm();
        p = next;
        if done {
            break;
        }
    }
    p
}

pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let btpa = b.transpose() * p * a;
    let gram = r + b.transpose() * p * b;
    let rhs = q + a.transpose() * p * a - btpa.transpose() * gram.try_inverse().unwrap() * &btpa;
    (p - rhs).norm()
}

/// Optimal affine policy for a model: Riccati gain plus the feedforward
/// that places the closed-loop mean at the steady-state optimum of
/// `min (x - delta)' Q (x - delta) + u' R u  s.t.  x = A x + B u`.
pub fn optimal_policy(a: &DMatrix<f64>, b: &DMatrix<f64>, cp: &CostParams) -> GainPolicy {
    let (n, m) = (a.nrows(), b.ncols());
    let p = dare_value_iteration(a, b, &cp.q_mat, &cp.r_mat);
    let gram = &cp.r_mat + b.transpose() * &p * b;
    let k = -gram.try_inverse().unwrap() * b.transpose() * &p * a;

    // KKT system in (x, u, multiplier).
    let dim = 2 * n + m;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(&cp.q_mat * 2.0));
    kkt.view_mut((n, n), (m, m)).copy_from(&(&cp.r_mat * 2.0));
    let constraint_x = DMatrix::identity(n, n) - a;
    let constraint_u = -b;
    kkt.view_mut((n + m, 0), (n, n)).copy_from(&constraint_x);
    kkt.view_mut((n + m, n), (n, m)).copy_from(&constraint_u);
    kkt.view_mut((0, n + m), (n, n)).copy_from(&constraint_x.transpose());
    kkt.view_mut((n, n + m), (m, n)).copy_from(&constraint_u.transpose());
    rhs.rows_mut(0, n).copy_from(&(&cp.q_mat * &cp.delta * 2.0));
    let sol = kkt.full_piv_lu().solve(&rhs).unwrap();
    let xs = sol.rows(0, n).into_owned();
    let us = sol.rows(n, m).into_owned();
    let l = us - &k * xs;
    GainPolicy { k_gain: k, l_ff: l }
}

/// `Lambda^{-1} [K l; I 0]` through a dense solve.
pub fn lift(theta: &GainPolicy, dm: &DataMatrices) -> CovariancePolicy {
    let (n, m) = (dm.n(), dm.m());
    let mut rhs = DMatrix::zeros(m + n, n + 1);
    rhs.view_mut((0, 0), (m, n)).copy_from(&theta.k_gain);
    rhs.view_mut((0, n), (m, 1)).copy_from(&theta.l_ff);
    rhs.view_mut((m, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let xi = dm.lambda.clone().full_piv_lu().solve(&rhs).unwrap();
    CovariancePolicy::from_stacked(&xi).unwrap()
}

/// Projector onto the null space of `x0_bar` built from the eigenvectors
/// of `x0_bar^T x0_bar` with zero eigenvalue.
pub fn nullspace_projector(x0_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = (x0_bar.nrows(), x0_bar.ncols());
    let eig = SymmetricEigen::new(x0_bar.transpose() * x0_bar);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut basis = DMatrix::zeros(cols, cols - rows);
    for (c, &idx) in order.iter().take(cols - rows).enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(idx));
    }
    &basis * basis.transpose()
}

/// `[B_hat A_hat] = X1 D0^+` through the SVD pseudoinverse.
pub fn least_squares(x1: &DMatrix<f64>, d0: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let pinv = d0.clone().pseudo_inverse(1e-14).unwrap();
    let ba = x1 * pinv;
    let n = x1.nrows();
    (ba.columns(m, n).into_owned(), ba.columns(0, m).into_owned())
}

/// A random gain policy with `rho(A + B K) < max_rho`, obtained by
/// perturbing `base`.
pub fn random_stabilizing(
    rng: &mut ChaCha8Rng,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    base: &GainPolicy,
    scale: f64,
    max_rho: f64,
) -> GainPolicy {
    let (m, n) = (base.m(), base.n());
    loop {
        let k = &base.k_gain + randn(rng, m, n) * scale;
        if spectral_radius(&(a + b * &k)) < max_rho {
            let l = &base.l_ff + randn_vec(rng, m) * scale;
            return GainPolicy { k_gain: k, l_ff: l };
        }
    }
}

/// Random controllable system with noiseless, well-excited data.
pub fn random_problem(n: usize, m: usize, seed: u64) -> (LinearSystem, OfflineDataset, DataMatrices) {
    let sys = plant::generate_system(n, m, seed, 0.9).unwrap();
    let ds = plant::collect_data(&sys, 2 * (n + m) + 2, seed ^ 0x5eed, false).unwrap();
    let dm = param::build_data_matrices(&ds).unwrap();
    (sys, ds, dm)
}

/// Positive-definite weights and a random setpoint for an `n`-state, `m`-input problem.
pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize, noise: f64) -> CostParams {
    let g = randn(rng, n, n);
    let q = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
    let g = randn(rng, m, m);
    let r = &g * g.transpose() / m as f64 + DMatrix::identity(m, m) * 0.5;
    CostParams::new(q, r, randn_vec(rng, n), DMatrix::identity(n, n) * noise).unwrap()
}
