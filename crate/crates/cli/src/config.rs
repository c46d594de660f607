//! Experiment configuration: JSON schema, defaults, dotted-path overrides.

use std::path::{Path, PathBuf};

use deepo_lqt::opt::StepConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use deepo_lqt::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemMode {
    /// The literal 4x2 plant of the reference experiment.
    Paper,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub mode: SystemMode,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub target_rho: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            mode: SystemMode::Paper,
            n: 4,
            m: 2,
            seed: 0,
            target_rho: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub t_len: usize,
    pub seed: u64,
    /// Inject process noise while collecting data.
    pub noise_on: bool,
    /// Scale of `W = w_scale * I` when `cost.w_cov` is `"scaled_identity"`.
    pub w_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            t_len: 10,
            seed: 0,
            noise_on: false,
            w_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedMatrix {
    Identity,
    Zero,
    ScaledIdentity,
}

/// A matrix given by name or by explicit rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Named(NamedMatrix),
    Rows(Vec<Vec<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedVector {
    Zero,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Named(NamedVector),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub delta: VectorSpec,
    pub w_cov: MatrixSpec,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q: MatrixSpec::Named(NamedMatrix::Identity),
            r: MatrixSpec::Named(NamedMatrix::Identity),
            delta: VectorSpec::Named(NamedVector::Ones),
            w_cov: MatrixSpec::Named(NamedMatrix::ScaledIdentity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub k: MatrixSpec,
    pub l: VectorSpec,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            k: MatrixSpec::Named(NamedMatrix::Zero),
            l: VectorSpec::Named(NamedVector::Zero),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub trace_path: PathBuf,
    pub format: TraceFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trace_path: PathBuf::from("trace.csv"),
            format: TraceFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub data: DataConfig,
    pub cost: CostConfig,
    pub optimizer: StepConfig,
    pub init: InitConfig,
    pub output: OutputConfig,
}

/// Short flags accepted in addition to full dotted paths.
pub const ALIASES: [(&str, &str); 4] = [
    ("eta", "optimizer.eta"),
    ("iters", "optimizer.max_iters"),
    ("seed", "data.seed"),
    ("out", "output.trace_path"),
];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// The reference experiment: runs every iteration instead of stopping
    /// on a small gradient.
    pub fn paper() -> Self {
        let mut cfg = Self::default();
        cfg.optimizer.grad_tol = 0.0;
        cfg
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("{e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Applies `(path, value)` overrides through the JSON form. Values are
    /// parsed as JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let path = ALIASES
                .iter()
                .find(|(alias, _)| alias == path)
                .map_or(path.as_str(), |(_, full)| full);
            set_path(&mut doc, path, raw)?;
        }
        serde_json::from_value(doc).map_err(|e| config_err(format!("after overrides: {e}")))
    }

    pub fn dims(&self) -> (usize, usize) {
        match self.system.mode {
            SystemMode::Paper => (4, 2),
            SystemMode::Random => (self.system.n, self.system.m),
        }
    }

    /// Validates the config and replaces every named quantity that depends
    /// on the dimensions by its explicit value.
    pub fn resolve(&self) -> Result<Self> {
        let (n, m) = self.dims();
        if self.system.mode == SystemMode::Paper && (self.system.n, self.system.m) != (4, 2) {
            return Err(config_err(format!(
                "system.mode = \"paper\" fixes n = 4, m = 2 (got n = {}, m = {})",
                self.system.n, self.system.m
            )));
        }
        if n == 0 || m == 0 {
            return Err(config_err("system dimensions must be positive"));
        }
        if !(self.system.target_rho > 0.0 && self.system.target_rho.is_finite()) {
            return Err(config_err("system.target_rho must be positive"));
        }
        if self.data.t_len < n + m {
            return Err(config_err(format!(
                "data.t_len = {} must be at least n + m = {}",
                self.data.t_len,
                n + m
            )));
        }
        if !(self.data.w_scale >= 0.0 && self.data.w_scale.is_finite()) {
            return Err(config_err("data.w_scale must be nonnegative"));
        }
        let sc = &self.optimizer;
        if !(sc.eta > 0.0 && sc.eta.is_finite()) {
            return Err(config_err(format!("optimizer.eta must be positive, got {}", sc.eta)));
        }
        if !(sc.grad_tol >= 0.0) {
            return Err(config_err("optimizer.grad_tol must be nonnegative"));
        }
        if sc.record_every == 0 {
            return Err(config_err("optimizer.record_every must be at least 1"));
        }

        let mut out = self.clone();
        out.system.n = n;
        out.system.m = m;
        out.cost.q = MatrixSpec::Rows(rows(&self.q_matrix()?));
        out.cost.r = MatrixSpec::Rows(rows(&self.r_matrix()?));
        out.cost.delta = VectorSpec::Values(self.delta()?.as_slice().to_vec());
        out.cost.w_cov = MatrixSpec::Rows(rows(&self.w_matrix()?));
        out.init.k = MatrixSpec::Rows(rows(&self.init_k()?));
        out.init.l = VectorSpec::Values(self.init_l()?.as_slice().to_vec());
        Ok(out)
    }

    pub fn q_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.dims().0;
        matrix(&self.cost.q, n, n, 1.0, "cost.q", &[NamedMatrix::Identity])
    }

    pub fn r_matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.dims().1;
        matrix(&self.cost.r, m, m, 1.0, "cost.r", &[NamedMatrix::Identity])
    }

    pub fn w_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.dims().0;
        matrix(
            &self.cost.w_cov,
            n,
            n,
            self.data.w_scale,
            "cost.w_cov",
            &[NamedMatrix::Zero, NamedMatrix::ScaledIdentity],
        )
    }

    pub fn delta(&self) -> Result<DVector<f64>> {
        vector(&self.cost.delta, self.dims().0, "cost.delta")
    }

    pub fn init_k(&self) -> Result<DMatrix<f64>> {
        let (n, m) = self.dims();
        matrix(&self.init.k, m, n, 1.0, "init.k", &[NamedMatrix::Zero])
    }

    pub fn init_l(&self) -> Result<DVector<f64>> {
        vector(&self.init.l, self.dims().1, "init.l")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(
    spec: &MatrixSpec,
    nrows: usize,
    ncols: usize,
    scale: f64,
    what: &str,
    allowed: &[NamedMatrix],
) -> Result<DMatrix<f64>> {
    match spec {
        MatrixSpec::Named(name) if !allowed.contains(name) => Err(config_err(format!(
            "{what} does not accept {:?}",
            serde_json::to_value(name).expect("name serializes")
        ))),
        MatrixSpec::Named(NamedMatrix::Identity) => Ok(DMatrix::identity(nrows, ncols)),
        MatrixSpec::Named(NamedMatrix::Zero) => Ok(DMatrix::zeros(nrows, ncols)),
        MatrixSpec::Named(NamedMatrix::ScaledIdentity) => Ok(DMatrix::identity(nrows, ncols) * scale),
        MatrixSpec::Rows(r) => {
            if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
                return Err(config_err(format!("{what} must be {nrows}x{ncols}")));
            }
            let flat: Vec<f64> = r.iter().flatten().copied().collect();
            Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
        }
    }
}

fn vector(spec: &VectorSpec, len: usize, what: &str) -> Result<DVector<f64>> {
    match spec {
        VectorSpec::Named(NamedVector::Zero) => Ok(DVector::zeros(len)),
        VectorSpec::Named(NamedVector::Ones) => Ok(DVector::from_element(len, 1.0)),
        VectorSpec::Values(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        VectorSpec::Values(v) => Err(config_err(format!(
            "{what} must have length {len}, got {}",
            v.len()
        ))),
    }
}

fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = doc;
    let mut walked = Vec::new();
    for key in path.split('.') {
        walked.push(key);
        node = node
            .as_object_mut()
            .and_then(|obj| obj.get_mut(key))
            .ok_or_else(|| config_err(format!("unknown config key `{}`", walked.join("."))))?;
    }
    if node.is_object() {
        return Err(config_err(format!("`{path}` is a section, not a field")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

/// Splits `--a.b value` / `--a.b=value` pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("expected `--key value`, got `{arg}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_owned(), v.to_owned())),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| config_err(format!("`--{key}` needs a value")))?;
                out.push((key.to_owned(), value.clone()));
            }
        }
    }
    Ok(out)
}
