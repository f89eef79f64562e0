//! `esck` command-line driver.
//!
//! Settings come from an optional TOML file (`--config`) and are overridden
//! by flags. Exit codes: 0 success, 1 configuration or input error, 2 when
//! some benchmark cells failed (details in `<out>.errors.txt`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esck::experiment::{
    cmd_bench, cmd_sketch, cmd_sweep, errors_path, outcome_exit_code, sidecar_path, ExperimentConfig, ExperimentError,
    MethodName, SweepAxis,
};
use esck::io::ReportFormat;

#[derive(Parser)]
#[command(name = "esck", version, about = "Sparse matrix sketching benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sketch a LIBSVM file and write the result plus a JSON sidecar.
    Sketch(Common),
    /// Cross-validate every (method, r) over all seeds.
    Bench(Common),
    /// Accuracy and sparsity along r or the L1 radius.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `r` or `lambda`.
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with defaults for every option below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dataset in LIBSVM format.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of features (default: largest index in the file).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Vec<MethodName>,
    #[arg(long, value_delimiter = ',')]
    r: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// L1 radius grid for ESCK.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Constant ESCK step size (default: cluster-mean step).
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    c_grid: Vec<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
    /// Min-max scale features to [-1, 1] on each training fold.
    #[arg(long)]
    scale: bool,
    /// Plain (unstratified) folds.
    #[arg(long)]
    no_stratify: bool,
}

fn parse_method(s: &str) -> Result<MethodName, String> {
    s.parse().map_err(|e: ExperimentError| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: ExperimentError| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: esck::io::IoError| e.to_string())
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_toml_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.data {
            c.data = v;
        }
        if self.dim.is_some() {
            c.dim = self.dim;
        }
        if !self.method.is_empty() {
            c.methods = self.method;
        }
        if !self.r.is_empty() {
            c.r = self.r;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds;
        }
        if !self.lambda.is_empty() {
            c.lambda = self.lambda;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.iters {
            c.iters = v;
        }
        if self.learning_rate.is_some() {
            c.learning_rate = self.learning_rate;
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if !self.c_grid.is_empty() {
            c.c_grid = self.c_grid;
        }
        if let Some(v) = self.folds {
            c.folds = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.format {
            c.format = v;
        }
        if self.scale {
            c.scale = true;
        }
        if self.no_stratify {
            c.stratified = false;
        }
        Ok(c)
    }
}

fn run(command: Command) -> Result<i32, ExperimentError> {
    match command {
        Command::Sketch(common) => {
            let config = common.resolve()?;
            let sidecar = cmd_sketch(&config)?;
            println!(
                "{}: {} rows x {} ({}), sparsity {:.4}, sidecar {}",
                config.out.display(),
                sidecar.rows,
                sidecar.r,
                sidecar.method,
                sidecar.sparsity_rate,
                sidecar_path(&config.out).display()
            );
            Ok(0)
        }
        Command::Bench(common) => {
            let config = common.resolve()?;
            let outcome = cmd_bench(&config)?;
            for r in &outcome.reports {
                println!(
                    "{} r={} acc {:.4} +- {:.4} sparsity {:.4}",
                    r.method, r.r, r.accuracy_mean, r.accuracy_std, r.sketch_sparsity_rate
                );
            }
            report_failures(&config, outcome.failures.len());
            Ok(outcome_exit_code(&outcome.failures))
        }
        Command::Sweep { common, axis } => {
            let mut config = common.resolve()?;
            if let Some(axis) = axis {
                config.axis = axis;
            }
            let outcome = cmd_sweep(&config)?;
            println!("{}: {} points", config.out.display(), outcome.points.len());
            report_failures(&config, outcome.failures.len());
            Ok(outcome_exit_code(&outcome.failures))
        }
    }
}

fn report_failures(config: &ExperimentConfig, count: usize) {
    if count > 0 {
        eprintln!("{count} cell(s) failed, see {}", errors_path(&config.out).display());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
