//! Command-line front end: `train`, `gradcheck` and `sweep`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::check::{render_table, run_suite, DEFAULT_FD_STEP};
use crate::error::{Error, Result};
use crate::train::{
    bd_csv, bd_sweep, dynamic_csv, dynamic_sweep, scale_csv, scale_sweep, train_run, MeshMode, TrainConfig,
    DEFAULT_DYNAMIC_ITERATIONS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const THREADS_ENV: &str = "ZO_MESHOPT_THREADS";
const DEFAULT_OUT: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "zo-meshopt", version, about = "Hybrid coarse-solver and correction-network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoint and field CSVs.
    Train(TrainArgs),
    /// Run the gradient check suite and print a pass/fail table.
    Gradcheck(GradcheckArgs),
    /// Run an experiment sweep and write one combined CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[arg(long, value_name = "MODE", value_parser = parse_mode)]
    mesh_mode: Option<MeshMode>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "warm-start")]
    warm_start: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Central-difference step for the network and cotangent checks.
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    fd_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    Scales,
    Dynamic,
    Bd,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_mode(s: &str) -> std::result::Result<MeshMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Sweep options accepted next to the training fields in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    /// `[coarse_n, fine_n]` pairs.
    pub scales: Vec<[usize; 2]>,
    pub alpha_series: Vec<f64>,
    pub dynamic_iterations: usize,
    pub bd_b: Vec<usize>,
    pub bd_d: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            scales: vec![[5, 33], [7, 33], [9, 33]],
            alpha_series: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            dynamic_iterations: DEFAULT_DYNAMIC_ITERATIONS,
            bd_b: vec![1, 2, 4, 8],
            bd_d: vec![4, 8, 16],
        }
    }
}

const SWEEP_KEYS: [&str; 5] = ["scales", "alpha_series", "dynamic_iterations", "bd_b", "bd_d"];

/// A config file: every [`TrainConfig`] field plus the sweep options.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub sweep: SweepSettings,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        let object = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut sweep = serde_json::Map::new();
        for key in SWEEP_KEYS {
            if let Some(v) = object.remove(key) {
                sweep.insert(key.into(), v);
            }
        }
        let train = serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let sweep = serde_json::from_value(serde_json::Value::Object(sweep))
            .map_err(|e| Error::Config(format!("invalid sweep settings: {e}")))?;
        Ok(Self { train, sweep })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Overrides {
    /// Loads the file, applies flags on top, and creates the output directory.
    fn resolve(&self) -> Result<(CliConfig, PathBuf)> {
        let mut cfg = CliConfig::load(&self.config)?;
        let t = &mut cfg.train;
        if let Some(m) = self.mesh_mode {
            t.mesh_mode = m;
        }
        if let Some(mu) = self.mu {
            t.estimator.mu = mu;
        }
        if let Some(b) = self.b {
            t.estimator.b = b;
        }
        if let Some(d) = self.d {
            t.estimator.d = d;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(w) = self.warm_start {
            t.warm_start_epochs = w;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        let out = self.out.clone().or_else(|| t.out_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        t.validate()?;
        fs::create_dir_all(&out)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok((cfg, out))
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Solver { .. } | Error::NonFinite(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
    crate::init_thread_pool(threads);

    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let (cfg, out) = args.overrides.resolve()?;
    let train = TrainConfig { out_dir: Some(out.clone()), ..cfg.train };
    let outcome = train_run(train)?;
    if let Some(m) = outcome.final_metrics() {
        println!(
            "epochs {}  train_loss {:.6e}  test_rmse {:.6e}  n_solver_evals {}",
            outcome.metrics.len(),
            m.train_loss,
            m.test_rmse,
            m.n_solver_evals
        );
    }
    println!("outputs written to {}", out.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if !(args.fd_step > 0.0 && args.fd_step.is_finite()) {
        return Err(Error::Config(format!("--fd-step must be positive, got {}", args.fd_step)));
    }
    let rows = run_suite(args.fd_step, args.seed)?;
    print!("{}", render_table(&rows));
    Ok(if rows.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let (cfg, out) = args.overrides.resolve()?;
    let train = TrainConfig { out_dir: None, ..cfg.train };
    let s = &cfg.sweep;
    let (name, csv) = match args.kind {
        SweepKind::Scales => {
            let scales: Vec<(usize, usize)> = s.scales.iter().map(|p| (p[0], p[1])).collect();
            ("scales.csv", scale_csv(&scale_sweep(&train, &scales)?))
        }
        SweepKind::Dynamic => ("dynamic.csv", dynamic_csv(&dynamic_sweep(&train, &s.alpha_series, s.dynamic_iterations)?)),
        SweepKind::Bd => ("bd.csv", bd_csv(&bd_sweep(&train, &s.bd_b, &s.bd_d)?)),
    };
    let path = out.join(name);
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_splits_sweep_keys() {
        let c = CliConfig::from_json(r#"{"epochs": 2, "bd_b": [1, 2], "scales": [[5, 17]]}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.sweep.bd_b, vec![1, 2]);
        assert_eq!(c.sweep.scales, vec![[5, 17]]);
        assert_eq!(c.sweep.bd_d, vec![4, 8, 16]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        for bad in [r#"{"epochz": 2}"#, r#"[1]"#, r#"{"bd_b": "x"}"#, "{"] {
            assert!(matches!(CliConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn exit_codes_by_error() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Solver { message: "x".into(), residual: 1.0 }), EXIT_SOLVER);
    }
}
