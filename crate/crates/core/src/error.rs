use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("matrix is not Schur stable (spectral radius {rho:.6})")]
    Unstable { rho: f64 },

    #[error("{what} is rank deficient (minimum singular value {min_singular_value:.3e}, threshold {threshold:.3e})")]
    Rank {
        what: &'static str,
        min_singular_value: f64,
        threshold: f64,
    },

    #[error("{solver} did not converge within {iters} iterations (last change {last_change:.3e})")]
    NoConvergence {
        solver: &'static str,
        iters: usize,
        last_change: f64,
    },

    #[error("system generation failed: no controllable draw after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("data length T = {t_len} is too short; need at least n + m = {required}")]
    DataLength { t_len: usize, required: usize },

    #[error("rollout diverged at step {step} (state norm {norm:.3e})")]
    Divergence { step: usize, norm: f64 },

    #[error("policy is infeasible: |X0 V - I| = {v_residual:.3e}, |X0 h| = {h_residual:.3e}, rho(X1 V) = {rho:.6}")]
    Infeasible {
        v_residual: f64,
        h_residual: f64,
        rho: f64,
    },

    #[error("ill-conditioned {what} (condition number {condition:.3e})")]
    Conditioning { what: &'static str, condition: f64 },

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (instability, divergence,
    /// singularity) rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Unstable { .. }
                | Error::Rank { .. }
                | Error::NoConvergence { .. }
                | Error::Divergence { .. }
                | Error::Infeasible { .. }
                | Error::Conditioning { .. }
                | Error::Degenerate(_)
                | Error::Generation { .. }
        )
    }
}
