//! Batch command-line front end: simulate benchmark datasets, fit the
//! hierarchical FPC model, predict trajectories with bootstrap bands, estimate
//! the population-level Gaussian process, and run benchmark grids.
//!
//! Exit codes: 0 success, 2 input/parse error, 3 convergence failure,
//! 4 model/data integrity error, 5 internal numerical error. Failures emit a
//! machine-readable JSON object on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmfpc::{
    confidence_band, draw_bootstrap, generate, gp_empirical, gp_fpc, run_benchmark, select_gamma,
    BenchmarkConfig, Dgp, Error, FitOptions, FittedModel, LongitudinalDataset,
    PenalizedObjective, SimSpec,
};

#[derive(Parser)]
#[command(
    name = "hmfpc",
    about = "Hierarchical modelling with functional principal components for sparse longitudinal data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from one of the benchmark processes.
    Simulate(SimulateArgs),
    /// Tune and fit the model on a long-format CSV (`subject,time,value`).
    Fit(FitArgs),
    /// Trajectory and derivative confidence bands for a fitted model.
    Predict(PredictArgs),
    /// Population-level Gaussian-process estimates from a fitted model.
    Population(PopulationArgs),
    /// Run a simulation benchmark grid and tabulate metrics.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generating process: 2fpc, lmm-ri or sitar.
    #[arg(long)]
    dgp: String,
    /// Number of subjects.
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Observations per subject.
    #[arg(long = "n-i", default_value_t = 5)]
    n_i: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "output-dir")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV with header `subject,time,value`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "output-dir")]
    output_dir: PathBuf,
    /// Spline basis dimension.
    #[arg(long = "n-basis", default_value_t = 10)]
    n_basis: usize,
    /// Comma-separated smoothing-parameter grid; default 13 log-spaced
    /// points from 1e-4 to 1e4.
    #[arg(long = "gamma-grid")]
    gamma_grid: Option<String>,
    /// Fraction-of-variance-explained threshold for choosing K.
    #[arg(long = "t-fve", default_value_t = 0.999)]
    t_fve: f64,
    /// Seed for fit initialization streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refit from a saved model JSON at its stored (K, gamma), skipping tuning.
    #[arg(long = "warm-start")]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model JSON from `fit`.
    #[arg(long)]
    model: PathBuf,
    /// The data the model was fitted to (required for score re-sampling).
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "output-dir")]
    output_dir: PathBuf,
    /// Comma-separated subject ids; default all.
    #[arg(long)]
    subjects: Option<String>,
    /// Evaluation grid `lo:hi:count`; default 100 points over the basis domain.
    #[arg(long)]
    grid: Option<String>,
    /// Bootstrap draws.
    #[arg(long = "n-s", default_value_t = 1000)]
    n_s: usize,
    /// Band level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Derivative orders to emit (comma-separated subset of 0,1).
    #[arg(long, default_value = "0")]
    deriv: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PopulationArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "output-dir")]
    output_dir: PathBuf,
    /// fpc, empirical or both.
    #[arg(long, default_value = "both")]
    method: String,
    /// Number of equally spaced grid points.
    #[arg(long = "grid-size", default_value_t = 100)]
    grid_size: usize,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Grid spec: `full:<dgp>` for the full 18-cell replication grid, or
    /// `<dgp>:d=50,100:n=3,5` for explicit cells.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    /// Keep only these cells, e.g. `100x5,300x3`.
    #[arg(long)]
    cells: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-basis", default_value_t = 10)]
    n_basis: usize,
    #[arg(long = "gamma-grid")]
    gamma_grid: Option<String>,
    #[arg(long = "t-fve", default_value_t = 0.999)]
    t_fve: f64,
    /// Bootstrap draws per replicate.
    #[arg(long = "n-s", default_value_t = 1000)]
    n_s: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Worker threads (0 = logical cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long = "output-dir")]
    output_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Population(a) => cmd_population(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let payload = serde_json::json!({
                "error": error_kind(&e),
                "exit_code": code,
                "message": e.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::DegenerateDesign(_)
        | Error::EmptySubject { .. }
        | Error::Domain { .. } => 2,
        Error::Convergence { .. } => 3,
        Error::Integrity(_) | Error::UnknownSubject(_) => 4,
        _ => 5,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::DegenerateDesign(_) => "degenerate-design",
        Error::EmptySubject { .. } => "empty-subject",
        Error::Domain { .. } => "domain",
        Error::Convergence { .. } => "convergence",
        Error::Integrity(_) => "integrity",
        Error::UnknownSubject(_) => "unknown-subject",
        Error::IndefiniteHessian => "indefinite-hessian",
        Error::TuningFailure(_) => "tuning-failure",
        _ => "numerical",
    }
}

/// Write atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_gamma_grid(s: &Option<String>) -> Result<Vec<f64>, Error> {
    match s {
        None => Ok(hmfpc::tuning::default_gamma_grid()),
        Some(s) => {
            let mut out = Vec::new();
            for tok in s.split(',') {
                let v: f64 = tok.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad gamma value `{tok}`"))
                })?;
                out.push(v);
            }
            Ok(out)
        }
    }
}

fn default_grid_for(model: &FittedModel, spec: &Option<String>) -> Result<Vec<f64>, Error> {
    match spec {
        None => {
            let (lo, hi) = model.basis.domain();
            Ok(hmfpc::population::default_grid((lo, hi), 100))
        }
        Some(s) => {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "grid must be lo:hi:count, got `{s}`"
                )));
            }
            let lo: f64 = parts[0].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad grid lo `{}`", parts[0]))
            })?;
            let hi: f64 = parts[1].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad grid hi `{}`", parts[1]))
            })?;
            let n: usize = parts[2].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad grid count `{}`", parts[2]))
            })?;
            if !(hi > lo) || n < 2 {
                return Err(Error::InvalidArgument(
                    "grid must satisfy hi > lo, count >= 2".into(),
                ));
            }
            Ok(hmfpc::population::default_grid((lo, hi), n))
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let dgp: Dgp = a.dgp.parse()?;
    let spec = SimSpec::new(dgp, a.d, a.n_i, a.seed);
    let sim = generate(&spec);
    let mut csv = Vec::new();
    sim.data.write_csv(&mut csv)?;
    write_atomic(&a.output_dir.join("data.csv"), &csv)?;
    write_atomic(
        &a.output_dir.join("simspec.json"),
        serde_json::to_string_pretty(&spec)?.as_bytes(),
    )?;
    println!(
        "wrote {} subjects x {} observations to {}",
        spec.d,
        spec.n_i,
        a.output_dir.join("data.csv").display()
    );
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<(), Error> {
    let data = LongitudinalDataset::read_csv_path(&a.input)?;
    if data.n_subjects() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 subjects to fit".into(),
        ));
    }
    let opts = FitOptions {
        seed: a.seed,
        ..FitOptions::default()
    };
    let model = match &a.warm_start {
        Some(path) => {
            let prev = FittedModel::from_json(&std::fs::read_to_string(path)?)?;
            let expected = hmfpc::fit::model_data_hash(&prev.basis, &data);
            if expected != prev.data_hash {
                return Err(Error::Integrity(
                    "warm-start model was fitted to different data".into(),
                ));
            }
            let obj = PenalizedObjective::new(prev.basis.clone(), &data, prev.gamma)?;
            let mut m = hmfpc::maximize(&obj, prev.k, Some(prev.params.clone()), &opts)?;
            m.subject_ids = data.subjects().iter().map(|s| s.id.clone()).collect();
            m.data_hash = expected;
            m
        }
        None => {
            let basis = hmfpc::OrthoBasis::build(&data.pooled_times(), a.n_basis)?;
            let grid = parse_gamma_grid(&a.gamma_grid)?;
            let (trace, mut model) = select_gamma(&data, &basis, &grid, a.t_fve, &opts)?;
            model.subject_ids = data.subjects().iter().map(|s| s.id.clone()).collect();
            write_atomic(
                &a.output_dir.join("tuning_trace.json"),
                serde_json::to_string_pretty(&trace)?.as_bytes(),
            )?;
            println!("gamma        K   sigma2_K      criterion");
            for (i, &g) in trace.gamma_grid.iter().enumerate() {
                let k = trace.per_gamma_k[i]
                    .map(|k| k.to_string())
                    .unwrap_or_else(|| "-".into());
                let s2 = trace.per_gamma_sigma2[i]
                    .map(|s| format!("{s:<12.6e}"))
                    .unwrap_or_else(|| "-".into());
                let c = trace.laml_values[i]
                    .map(|c| format!("{c:.4}"))
                    .unwrap_or_else(|| "invalid".into());
                println!("{g:<12.4e} {k:<3} {s2} {c}");
            }
            println!(
                "chosen gamma {} (K = {}, sigma = {:.6})",
                trace.chosen_gamma,
                model.k,
                model.sigma2_hat.sqrt()
            );
            model
        }
    };
    write_atomic(&a.output_dir.join("model.json"), model.to_json()?.as_bytes())?;
    // fitted trajectories on the default grid
    let (lo, hi) = model.basis.domain();
    let grid = hmfpc::population::default_grid((lo, hi), 100);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "time", "estimate"])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    for (i, id) in model.subject_ids.clone().iter().enumerate() {
        let est = model.predict_trajectory(i, &grid, 0)?;
        for (t, v) in grid.iter().zip(est) {
            w.write_record([id.as_str(), &format!("{t}"), &format!("{v}")])
                .map_err(|e| Error::Numerical(e.to_string()))?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numerical(e.to_string()))?;
    write_atomic(&a.output_dir.join("fitted_trajectories.csv"), &bytes)?;
    println!(
        "wrote model.json and fitted_trajectories.csv to {}",
        a.output_dir.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Error> {
    let model = FittedModel::from_json(&std::fs::read_to_string(&a.model)?)?;
    let data = LongitudinalDataset::read_csv_path(&a.input)?;
    let expected = hmfpc::fit::model_data_hash(&model.basis, &data);
    if expected != model.data_hash {
        return Err(Error::Integrity(
            "model was fitted to different data (basis/data hash mismatch)".into(),
        ));
    }
    let subjects: Vec<usize> = match &a.subjects {
        None => (0..model.n_subjects()).collect(),
        Some(list) => {
            let mut out = Vec::new();
            for tok in list.split(',') {
                let id = tok.trim();
                let idx = model
                    .subject_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("unknown subject `{id}`"))
                    })?;
                out.push(idx);
            }
            out
        }
    };
    let derivs: Vec<usize> = a
        .deriv
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad deriv `{d}`")))
        })
        .collect::<Result<_, _>>()?;
    let grid = default_grid_for(&model, &a.grid)?;
    let obj = PenalizedObjective::new(model.basis.clone(), &data, model.gamma)?;
    let sample = draw_bootstrap(&model, &obj, a.n_s, a.seed)?;
    let mut buf = Vec::new();
    hmfpc::inference::write_bands_csv(
        &mut buf, &model, &sample, &subjects, &grid, a.level, &derivs,
    )?;
    write_atomic(&a.output_dir.join("bands.csv"), &buf)?;
    let warn =
        confidence_band(&sample, &model.basis, subjects[0], &grid[..1], a.level, 0)?
            .precision_warning;
    if warn {
        eprintln!(
            "warning: n_s = {} gives fewer than 5 draws per tail at level {}",
            a.n_s, a.level
        );
    }
    println!(
        "wrote bands for {} subject(s) x {} derivative order(s) to {}",
        subjects.len(),
        derivs.len(),
        a.output_dir.join("bands.csv").display()
    );
    Ok(())
}

fn cmd_population(a: PopulationArgs) -> Result<(), Error> {
    let model = FittedModel::from_json(&std::fs::read_to_string(&a.model)?)?;
    let (lo, hi) = model.basis.domain();
    let grid = hmfpc::population::default_grid((lo, hi), a.grid_size);
    let methods: Vec<&str> = match a.method.as_str() {
        "both" => vec!["fpc", "empirical"],
        "fpc" => vec!["fpc"],
        "empirical" => vec!["empirical"],
        other => {
            return Err(Error::InvalidArgument(format!(
                "method must be fpc, empirical or both, got `{other}`"
            )))
        }
    };
    for m in methods {
        let gp = match m {
            "fpc" => gp_fpc(&model, &grid),
            _ => gp_empirical(&model, &grid)?,
        };
        let mut mean_buf = Vec::new();
        let mut cov_buf = Vec::new();
        gp.write_csv(&mut mean_buf, &mut cov_buf)?;
        write_atomic(&a.output_dir.join(format!("gp_{m}_mean.csv")), &mean_buf)?;
        write_atomic(&a.output_dir.join(format!("gp_{m}_cov.csv")), &cov_buf)?;
        write_atomic(
            &a.output_dir.join(format!("gp_{m}.json")),
            serde_json::to_string_pretty(&gp)?.as_bytes(),
        )?;
        println!("wrote gp_{m}_mean.csv, gp_{m}_cov.csv, gp_{m}.json");
    }
    Ok(())
}

fn parse_benchmark_grid(spec: &str, seed: u64) -> Result<Vec<SimSpec>, Error> {
    if let Some(rest) = spec.strip_prefix("full:") {
        let dgp: Dgp = rest.parse()?;
        return Ok(SimSpec::replication_grid(dgp, seed));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.is_empty() || parts.len() > 3 {
        return Err(Error::InvalidArgument(format!(
            "grid must be `full:<dgp>` or `<dgp>:d=..:n=..`, got `{spec}`"
        )));
    }
    let dgp: Dgp = parts[0].parse()?;
    let mut ds = vec![100usize];
    let mut ns = vec![5usize];
    for part in &parts[1..] {
        let (key, vals) = part.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("expected key=v1,v2 in grid, got `{part}`"))
        })?;
        let parsed: Result<Vec<usize>, Error> = vals
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad grid value `{v}`")))
            })
            .collect();
        match key.trim() {
            "d" => ds = parsed?,
            "n" | "n_i" => ns = parsed?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown grid key `{other}`"
                )))
            }
        }
    }
    let mut cells = Vec::new();
    for &n_i in &ns {
        for &d in &ds {
            cells.push(SimSpec::new(dgp, d, n_i, seed));
        }
    }
    Ok(cells)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<(), Error> {
    let mut cells = parse_benchmark_grid(&a.grid, a.seed)?;
    if let Some(filter) = &a.cells {
        let mut keep = Vec::new();
        for tok in filter.split(',') {
            let (d, n) = tok.trim().split_once('x').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "cells entries look like 100x5, got `{tok}`"
                ))
            })?;
            let d: usize = d
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad cell `{tok}`")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad cell `{tok}`")))?;
            keep.push((d, n));
        }
        cells.retain(|c| keep.contains(&(c.d, c.n_i)));
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument("benchmark grid has no cells".into()));
    }
    let cfg = BenchmarkConfig {
        n_basis: a.n_basis,
        gamma_grid: parse_gamma_grid(&a.gamma_grid)?,
        t_fve: a.t_fve,
        n_s: a.n_s,
        level: a.level,
        grid_size: 100,
        workers: a.workers,
    };
    let report = run_benchmark(&cells, a.replicates, &cfg);
    let mut buf = Vec::new();
    report.write_metrics_csv(&mut buf)?;
    write_atomic(&a.output_dir.join("metrics.csv"), &buf)?;
    let mut buf = Vec::new();
    report.write_failures_csv(&mut buf)?;
    write_atomic(&a.output_dir.join("failures.csv"), &buf)?;
    for dump in &report.typical {
        let mut buf = Vec::new();
        hmfpc::simgen::BenchmarkReport::write_typical_csv(dump, &mut buf)?;
        write_atomic(
            &a.output_dir.join(format!(
                "typical_{}_d{}_n{}.csv",
                dump.dgp, dump.d, dump.n_i
            )),
            &buf,
        )?;
    }
    write_atomic(
        &a.output_dir.join("summary.txt"),
        report.summary_text().as_bytes(),
    )?;
    print!("{}", report.summary_text());
    Ok(())
}
