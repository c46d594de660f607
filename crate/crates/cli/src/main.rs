use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepo_cli::checks;
use deepo_cli::config::{parse_override_args, ExperimentConfig};
use deepo_cli::experiment::{self, Setup};
use deepo_lqt::io::{self, PolicyDoc};
use deepo_lqt::opt::RunStatus;
use deepo_lqt::param::{self, GainPolicy};
use deepo_lqt::plant::{self, MonteCarloConfig, RolloutConfig, StartState};
use deepo_lqt::{lqt, Error};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "deepo", version, about = "Data-enabled policy optimization for linear quadratic tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides as `--section.field value` (aliases: --eta, --iters, --seed, --out).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the reference 4x2 experiment and check linear convergence.
    Reproduce(Common),
    /// Run DeePO with a general config.
    Run(Common),
    /// Roll out a gain policy on the configured plant.
    Simulate {
        /// Gain policy JSON ({n, m, K, l}); defaults to the configured initial policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        rollouts: usize,
        #[arg(long)]
        noise: bool,
        #[arg(long = "rollout-seed", default_value_t = 0)]
        rollout_seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Collect an offline dataset from the configured plant.
    Collect {
        /// Output `.json` file, or a directory of matrix CSVs with `--format csv`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = DataFormat::Json)]
        format: DataFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Least-squares estimates from a dataset.
    Identify {
        /// Dataset `.json` file or directory of matrix CSVs.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a policy on a dataset (cost and all policy quantities).
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Gain ({K, l}) or covariance ({V, h}) policy JSON.
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long = "draw-seed", default_value_t = 0)]
        draw_seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Compare DeePO steps with preconditioned model-based steps.
    Equivcheck {
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// DeePO vs indirect vs true-model policies and costs.
    Compare(Common),
    /// Run one experiment per value of a config field, in parallel.
    Sweep {
        /// Dotted config path to vary, e.g. `optimizer.eta`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Each run writes into `<out-dir>/run_<index>/`.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Json,
    Csv,
}

enum Failure {
    Config(String),
    Numerical(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if experiment::is_config_error(&e) {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::from(Error::from(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(base: ExperimentConfig, common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => base,
    };
    let cfg = cfg.with_overrides(&parse_override_args(&common.overrides)?)?;
    cfg.resolve()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::from(e).into()),
        _ => Ok(()),
    }
}

fn cmd_run(cfg: ExperimentConfig, check: bool) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    let outcome = experiment::run(&setup)?;
    let path = experiment::write_outputs(&setup.config, &outcome.trace)?;
    eprintln!("trace written to {}", path.display());
    print_json(&outcome.summary)?;
    if let RunStatus::Infeasible { iter, rho } = outcome.summary.status {
        return Err(Failure::Numerical(format!(
            "step out of iterate {iter} left the stable set (rho = {rho:.6})"
        )));
    }
    if check {
        experiment::reproduce_verdict(&outcome).map_err(Failure::Check)?;
    }
    Ok(())
}

fn read_gain_policy(path: &Path, setup: Option<&Setup>) -> std::result::Result<GainPolicy, Failure> {
    match io::parse_policy_json(&fs::read_to_string(path).map_err(Error::from)?)? {
        PolicyDoc::Gain(g) => Ok(g),
        PolicyDoc::Covariance(c) => match setup {
            Some(s) => Ok(param::recover_policy(&c, &s.dm)?),
            None => Err(Failure::Config("a covariance policy needs a dataset".into())),
        },
    }
}

fn cmd_simulate(
    policy: Option<PathBuf>,
    horizon: usize,
    rollouts: usize,
    noise: bool,
    rollout_seed: u64,
    cfg: ExperimentConfig,
) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    let theta = match policy {
        Some(p) => read_gain_policy(&p, Some(&setup))?,
        None => GainPolicy::new(cfg.init_k()?, cfg.init_l()?)?,
    };
    let n = setup.system.n();
    let cp = if noise {
        setup.cp.clone()
    } else {
        setup.cp.clone().with_noise(DMatrix::zeros(n, n))?
    };
    let closed_form = lqt::evaluate_theta(&theta, &setup.system.a, &setup.system.b, &cp)
        .map(|e| e.cost)
        .ok();
    let report = if rollouts <= 1 {
        let rc = RolloutConfig {
            horizon,
            seed: rollout_seed,
            noise_on: noise,
            burn_in: 0,
        };
        let x0 = DVector::zeros(setup.system.n());
        let res = plant::rollout_policy(&setup.system, &theta, &x0, &setup.cp, &rc)?;
        let final_state: Vec<f64> = res.states.column(horizon).iter().copied().collect();
        json!({
            "horizon": horizon,
            "average_cost": res.average_cost,
            "closed_form_cost": closed_form,
            "final_state": final_state,
        })
    } else {
        let mc = MonteCarloConfig {
            horizon,
            n_rollouts: rollouts,
            seed: rollout_seed,
            noise_on: noise,
            burn_in: 0,
            start: StartState::Stationary,
        };
        let est = plant::monte_carlo_cost(&setup.system, &theta, &setup.cp, &mc)?;
        json!({
            "horizon": horizon,
            "rollouts": rollouts,
            "mean_cost": est.mean,
            "std_err": est.std_err,
            "closed_form_cost": closed_form,
        })
    };
    print_json(&report)
}

fn cmd_collect(output: &Path, format: DataFormat, cfg: ExperimentConfig) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    match format {
        DataFormat::Json => {
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(Error::from)?;
            }
            fs::write(output, io::dataset_to_json(&setup.dataset)).map_err(Error::from)?;
        }
        DataFormat::Csv => io::write_dataset_csv(output, &setup.dataset)?,
    }
    let pe = plant::check_pe(&setup.dataset);
    print_json(&json!({
        "output": output,
        "n": setup.dataset.n(),
        "m": setup.dataset.m(),
        "T": setup.dataset.t_len(),
        "pe_min_singular_value": pe.min_singular_value,
        "persistently_exciting": pe.is_pe,
    }))
}

fn cmd_identify(data: &Path) -> CmdResult {
    let ds = io::read_dataset(data)?;
    let pe = plant::check_pe(&ds);
    let est = param::identify_ls(&ds)?;
    let dm = param::build_data_matrices(&ds)?;
    let residual = (&est.a_hat * &dm.x0_bar + &est.b_hat * &dm.u0_bar - &dm.x1_bar).norm();
    print_json(&json!({
        "A_hat": io::matrix_json(&est.a_hat),
        "B_hat": io::matrix_json(&est.b_hat),
        "pe_min_singular_value": pe.min_singular_value,
        "identity_residual": residual,
    }))
}

fn cmd_evaluate(data: &Path, policy: &Path, cfg: ExperimentConfig) -> CmdResult {
    let ds = io::read_dataset(data)?;
    let system = experiment::build_system(&cfg)?;
    let setup = Setup::with_dataset(cfg.resolve()?, system, ds)?;
    let xi = match io::parse_policy_json(&fs::read_to_string(policy).map_err(Error::from)?)? {
        PolicyDoc::Covariance(c) => c,
        PolicyDoc::Gain(g) => param::lift_policy(&g, &setup.dm)?,
    };
    let eval = lqt::evaluate_xi(&xi, &setup.dm, &setup.cp)?;
    print_json(&io::evaluation_to_json(&eval))
}

fn cmd_gradcheck(samples: usize, draw_seed: u64, cfg: ExperimentConfig) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    let report = checks::gradcheck(&setup.xi0, &setup.dm, &setup.cp, samples, draw_seed)?;
    print_json(&report)?;
    if !report.passed {
        return Err(Failure::Check(format!(
            "max relative gradient error {:.3e} exceeds {:e}",
            report.max_relative_error, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_equivcheck(steps: usize, cfg: ExperimentConfig) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    let report = checks::equivcheck(&setup.xi0, &setup.dm, &setup.cp, cfg.optimizer.eta, steps)?;
    print_json(&report)?;
    if !report.passed {
        return Err(Failure::Check(format!(
            "max step discrepancy {:.3e} exceeds {:e}",
            report.max_discrepancy, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_compare(cfg: ExperimentConfig) -> CmdResult {
    let setup = Setup::build(&cfg)?;
    let outcome = experiment::run(&setup)?;
    let report = checks::compare(&outcome.trace.final_policy, &setup.dm, &setup.cp, &setup.system)?;
    print_json(&json!({ "summary": outcome.summary, "comparison": report }))
}

fn cmd_sweep(param: &str, values: &[String], out_dir: &Path, cfg: ExperimentConfig) -> CmdResult {
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = cfg.with_overrides(&[(param.to_owned(), v.clone())])?;
            let name = c
                .output
                .trace_path
                .file_name()
                .map_or_else(|| "trace.csv".into(), |f| f.to_owned());
            c.output.trace_path = out_dir.join(format!("run_{i}")).join(name);
            c.resolve()
        })
        .collect::<deepo_lqt::Result<Vec<_>>>()?;
    let results: Vec<_> = configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, v)| {
            let outcome = Setup::build(c).and_then(|s| {
                let o = experiment::run(&s)?;
                experiment::write_outputs(&s.config, &o.trace)?;
                Ok(o.summary)
            });
            match outcome {
                Ok(summary) => json!({ "value": v, "trace": c.output.trace_path, "summary": summary }),
                Err(e) => json!({ "value": v, "error": e.to_string() }),
            }
        })
        .collect();
    print_json(&results)
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Reproduce(common) => cmd_run(load_config(ExperimentConfig::paper(), &common)?, true),
        Command::Run(common) => cmd_run(load_config(ExperimentConfig::default(), &common)?, false),
        Command::Simulate {
            policy,
            horizon,
            rollouts,
            noise,
            rollout_seed,
            common,
        } => cmd_simulate(
            policy,
            horizon,
            rollouts,
            noise,
            rollout_seed,
            load_config(ExperimentConfig::default(), &common)?,
        ),
        Command::Collect {
            output,
            format,
            common,
        } => cmd_collect(&output, format, load_config(ExperimentConfig::default(), &common)?),
        Command::Identify { data } => cmd_identify(&data),
        Command::Evaluate {
            data,
            policy,
            common,
        } => cmd_evaluate(&data, &policy, load_config(ExperimentConfig::default(), &common)?),
        Command::Gradcheck {
            samples,
            draw_seed,
            common,
        } => cmd_gradcheck(samples, draw_seed, load_config(ExperimentConfig::default(), &common)?),
        Command::Equivcheck { steps, common } => {
            cmd_equivcheck(steps, load_config(ExperimentConfig::default(), &common)?)
        }
        Command::Compare(common) => cmd_compare(load_config(ExperimentConfig::default(), &common)?),
        Command::Sweep {
            param,
            values,
            out_dir,
            common,
        } => cmd_sweep(&param, &values, &out_dir, load_config(ExperimentConfig::default(), &common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
