//! Command-line driver: simulate, fit, select, encode, evaluate.
//!
//! Every command is deterministic given its flags; all randomness flows from
//! `--seed`. Summary lines go to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 failure, 2 finished without meeting the convergence
//! tolerance (results are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mltcn::ecm::{fit, FitConfig};
use mltcn::error::Error;
use mltcn::eval::evaluation_report;
use mltcn::model::{sample_mltcn, MltcnParams};
use mltcn::io;
use mltcn::select::grid_select;

#[derive(Parser)]
#[command(
    name = "mltcn",
    version,
    about = "Cluster binary response data with latent trait mixtures that flag extreme response patterns"
)]
struct Cli {
    /// Worker threads (default: all cores; env LTR_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the generative model and write it with its
    /// ground truth.
    Simulate(SimulateArgs),
    /// Fit one (G, D) configuration.
    Fit(FitArgs),
    /// Fit a (G, D) grid and report the BIC-minimal configuration.
    Select(SelectArgs),
    /// Expand a yes/no/undecided vote table into paired binary variables.
    Encode(EncodeArgs),
    /// Score a fit against true labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Observations to draw.
    #[arg(long)]
    n: usize,
    /// Binary variables.
    #[arg(long, default_value_t = 25)]
    m: usize,
    /// Mixture components.
    #[arg(long, default_value_t = 2)]
    g: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Mixing weights, comma separated (default: uniform).
    #[arg(long, value_delimiter = ',')]
    pi: Option<Vec<f64>>,
    /// Normal-branch weight per component; one value broadcasts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.8])]
    tau: Vec<f64>,
    /// Variance inflation per component; one value broadcasts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2.5])]
    eta: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path; ground truth goes to `<out>.truth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (binary; header and label column are auto-detected).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    g: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Aitken stopping tolerance.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Minimum share of normal patterns.
    #[arg(long, default_value_t = 0.5)]
    tau_floor: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Count k without the G*D*(D-1)/2 slope rotation freedom.
    #[arg(long, default_value_t = false)]
    bic_rotation_adjust: bool,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Component range, inclusive `lo:hi`.
    #[arg(long, value_parser = parse_range)]
    g_range: (usize, usize),
    /// Latent dimension range, inclusive `lo:hi`.
    #[arg(long, value_parser = parse_range)]
    d_range: (usize, usize),
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_floor: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    bic_rotation_adjust: bool,
    /// Output JSON path; `<stem>.csv` and `<stem>.series.csv` are written
    /// alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// Raw vote CSV with cells in {y, n, ?}; a party column passes through.
    #[arg(long)]
    raw: PathBuf,
    /// Encoded dataset CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fit JSON produced by `fit` or extracted from a grid.
    #[arg(long)]
    fit: PathBuf,
    /// True labels: plain text, one per line, or a CSV with a label column.
    #[arg(long)]
    labels: PathBuf,
    /// Report JSON path; the cross-tabulation lands in `<stem>.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got '{s}'"))?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad bound '{lo}'"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad bound '{hi}'"))?;
    if lo == 0 || hi < lo {
        return Err(format!("range {lo}:{hi} is empty or starts at zero"));
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print on stdout with success.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("LTR_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(threads) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }

    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::FitFailed { reasons } = &e {
                for (i, reason) in reasons.iter().enumerate() {
                    eprintln!("  restart {i}: {reason}");
                }
            }
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn broadcast(values: &[f64], g: usize, what: &str) -> Result<Vec<f64>, Error> {
    match values.len() {
        1 => Ok(vec![values[0]; g]),
        n if n == g => Ok(values.to_vec()),
        n => Err(Error::ParameterDomain(format!(
            "--{what} needs 1 or {g} values, got {n}"
        ))),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let pi = match args.pi {
        Some(pi) => {
            if pi.len() != args.g {
                return Err(Error::ParameterDomain(format!(
                    "--pi needs {} values, got {}",
                    args.g,
                    pi.len()
                )));
            }
            pi
        }
        None => vec![1.0 / args.g as f64; args.g],
    };
    let tau = broadcast(&args.tau, args.g, "tau")?;
    let eta = broadcast(&args.eta, args.g, "eta")?;
    let params = MltcnParams::synthetic_design(args.g, args.d, args.m, pi, tau, eta)?;
    let (data, assignment) = sample_mltcn(&params, args.n, args.seed)?;

    io::write_binary_csv(&data, &args.out)?;
    let truth = io::SimulationTruth::from_assignment(&params, args.seed, &assignment);
    io::write_truth(&truth, &truth_path(&args.out))?;
    println!(
        "simulated n={} m={} g={} d={} seed={} -> {}",
        args.n,
        args.m,
        args.g,
        args.d,
        args.seed,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn truth_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".truth.json");
    out.with_file_name(name)
}

fn fit_config(args: &FitArgs) -> FitConfig {
    FitConfig {
        g: args.g,
        d: args.d,
        max_iter: args.max_iter,
        aitken_epsilon: args.epsilon,
        restarts: args.restarts,
        seed: args.seed,
        tau_floor: args.tau_floor,
        bic_rotation_adjust: args.bic_rotation_adjust,
        ..FitConfig::new(args.g, args.d)
    }
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode, Error> {
    let data = io::read_binary_csv_auto(&args.data)?;
    let config = fit_config(&args);
    let result = fit(&data, &config)?;
    io::write_fit(&result, &args.out)?;
    println!(
        "bound={:.6} bic={:.3} iterations={} converged={} extremes={}",
        result.bound(),
        result.bic,
        result.iterations,
        result.converged,
        result.n_extreme()
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_select(args: SelectArgs) -> Result<ExitCode, Error> {
    let data = io::read_binary_csv_auto(&args.data)?;
    let base = FitConfig {
        max_iter: args.max_iter,
        aitken_epsilon: args.epsilon,
        restarts: args.restarts,
        seed: args.seed,
        tau_floor: args.tau_floor,
        bic_rotation_adjust: args.bic_rotation_adjust,
        ..FitConfig::new(args.g_range.0, args.d_range.0)
    };
    let g_values: Vec<usize> = (args.g_range.0..=args.g_range.1).collect();
    let d_values: Vec<usize> = (args.d_range.0..=args.d_range.1).collect();
    let grid = grid_select(&data, &g_values, &d_values, &base)?;

    io::write_grid(&grid, &args.out)?;
    io::write_grid_csv(&grid, &sibling(&args.out, "csv"))?;
    io::write_grid_series_csv(&grid, &sibling(&args.out, "series.csv"))?;

    let (g, d) = grid.best.expect("grid_select guarantees a best cell");
    let best = grid.best_cell().and_then(|c| c.bic()).unwrap();
    println!("best g={g} d={d} bic={best:.3}");
    for cell in grid.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell g={} d={} failed: {}",
            cell.g,
            cell.d,
            cell.error.as_deref().unwrap_or("unknown")
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn cmd_encode(args: EncodeArgs) -> Result<ExitCode, Error> {
    let raw = io::read_raw_votes(&args.raw)?;
    let encoded = io::encode_votes(&raw)?;
    io::write_binary_csv(&encoded, &args.out)?;
    println!(
        "encoded {} observations x {} issues -> {} binary variables",
        raw.n_rows(),
        raw.n_issues(),
        encoded.n_variables()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode, Error> {
    let result = io::read_fit(&args.fit)?;
    let labels = read_labels_flexible(&args.labels)?;
    let report = evaluation_report(&result, &labels);
    io::write_report(&report, &args.out)?;
    io::write_report_csv(&report, &sibling(&args.out, "csv"))?;
    println!(
        "rand={:.4} ari={:.4} misclassified={} extremes={}",
        report.rand, report.ari, report.n_misclassified, report.n_extreme
    );
    Ok(ExitCode::SUCCESS)
}

/// Labels come either as plain text (one per line) or as a CSV whose header
/// names a `label` or `party` column.
fn read_labels_flexible(path: &Path) -> Result<Vec<String>, Error> {
    if path.extension().is_some_and(|e| e == "csv") {
        if let Ok(data) = io::read_binary_csv_auto(path) {
            if let Some(labels) = data.labels {
                return Ok(labels);
            }
        }
    }
    io::read_labels(path)
}
