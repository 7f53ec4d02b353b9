//! Command-line front end.
//!
//! Exit codes: 0 all checks passed, 1 tolerance failure, 2 configuration
//! error, 3 runtime error.

use clap::{Args, Parser, Subcommand};
use fluctlab_harness::config::{ConfigError, ExperimentConfig};
use fluctlab_harness::report::emit_report;
use fluctlab_harness::{run_experiment, HarnessError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fluctlab",
    about = "Simulation and limit-law verification for multi-type weakly interacting diffusions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Config overrides as dotted key=value pairs.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one interacting ensemble and persist it.
    Simulate(CommonFlags),
    /// Operator-based limit covariance for the configured statistics.
    Covariance(CommonFlags),
    /// Replication CLT verification (variances, normality, chaos sweep).
    CltVerify(CommonFlags),
    /// Three-way covariance check for the two-population example.
    Example31(CommonFlags),
    /// Common-factor mixture verification.
    CommonFactor(CommonFlags),
    /// Degenerate-statistics limit check on synthetic populations.
    DynkinCheck(CommonFlags),
    /// Operator trace/solve diagnostics.
    OperatorDiag(CommonFlags),
    /// Chaos-sampler checks (isometries, exp(J), tilted law, J^N).
    MwiCheck(CommonFlags),
}

impl Command {
    fn flags(&self) -> &CommonFlags {
        match self {
            Command::Simulate(f)
            | Command::Covariance(f)
            | Command::CltVerify(f)
            | Command::Example31(f)
            | Command::CommonFactor(f)
            | Command::DynkinCheck(f)
            | Command::OperatorDiag(f)
            | Command::MwiCheck(f) => f,
        }
    }

    fn experiment_name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Covariance(_) => "covariance",
            Command::CltVerify(_) => "clt-verify",
            Command::Example31(_) => "example31",
            Command::CommonFactor(_) => "common-factor",
            Command::DynkinCheck(_) => "dynkin-check",
            Command::OperatorDiag(_) => "operator-diag",
            Command::MwiCheck(_) => "mwi-check",
        }
    }
}

fn load_config(cmd: &Command) -> Result<ExperimentConfig, ConfigError> {
    let flags = cmd.flags();
    let text = match &flags.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_toml_with_overrides(&text, &flags.overrides)?;
    cfg.experiment = cmd.experiment_name().to_string();
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.output.dir = Some(out.display().to_string());
    }
    Ok(cfg)
}

/// The `simulate` command: run one ensemble, persist binary (+ CSV when
/// small), and emit a summary report.
fn run_simulate(cfg: &ExperimentConfig) -> Result<fluctlab_harness::VerificationReport, HarnessError> {
    use fluctlab_core::simulate::{
        simulate_common_factor_interacting, simulate_interacting, write_ensemble_binary,
        write_ensemble_csv, SeedPair,
    };
    let layout = cfg.layout.build()?;
    let grid = cfg.grid.build()?;
    let mut report =
        fluctlab_harness::VerificationReport::new("simulate", cfg.hash(), cfg.seed);
    let dir = PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&dir)?;
    // `[model] kind = "common-factor"` selects the factor system.
    let ens = if cfg.model.kind == "common-factor" {
        let spec = cfg.factor_model.build()?;
        let counts = if layout.k() == spec.k() {
            layout.counts().to_vec()
        } else {
            vec![(layout.n_total() / spec.k()).max(1); spec.k()]
        };
        let flayout = fluctlab_core::model::PopulationLayout::from_counts(counts)
            .map_err(fluctlab_core::simulate::SimError::Model)?;
        simulate_common_factor_interacting(
            &spec,
            &flayout,
            grid,
            SeedPair {
                particles: cfg.seed,
                factor: cfg.seed ^ 0x5eed,
            },
        )?
    } else {
        let spec = cfg.model.build()?;
        simulate_interacting(&spec, &layout, grid, cfg.seed)?
    };
    let bin_path = dir.join("ensemble.bin");
    let mut f = std::fs::File::create(&bin_path)?;
    write_ensemble_binary(&ens, &mut f)?;
    report.push_estimate("particles", ens.n_particles() as f64, 0.0);
    report.push_estimate("grid-points", ens.grid.points() as f64, 0.0);
    if ens.n_particles() * ens.grid.points() <= 100_000 {
        let csv_path = dir.join("ensemble.csv");
        let mut f = std::fs::File::create(&csv_path)?;
        write_ensemble_csv(&ens, &mut f)?;
    }
    Ok(report)
}

/// The `covariance` command: operator-based limit covariance only.
fn run_covariance(
    cfg: &ExperimentConfig,
) -> Result<fluctlab_harness::VerificationReport, HarnessError> {
    use fluctlab_core::operators::{build_sample_operator, limit_covariance};
    use fluctlab_core::simulate::simulate_reference;
    use fluctlab_core::statistics::{center_functional, PathFunctional};
    let spec = cfg.model.build()?;
    let layout = cfg.layout.build()?;
    let grid = cfg.grid.build()?;
    let mut report =
        fluctlab_harness::VerificationReport::new("covariance", cfg.hash(), cfg.seed);
    let reference = simulate_reference(
        &spec,
        cfg.run.m_ref,
        grid,
        fluctlab_harness::experiments::rep_seed(cfg.seed, 1, 0),
        cfg.run.picard_iters,
    )?;
    let phis: Vec<(fluctlab_core::statistics::PathFunctional, usize)> =
        if cfg.statistics.is_empty() {
            (0..layout.k())
                .map(|alpha| (center_functional(&PathFunctional::terminal(), &reference, alpha), alpha))
                .collect()
        } else {
            cfg.statistics
                .iter()
                .map(|d| {
                    let raw = d.build(&cfg.model)?;
                    Ok((center_functional(&raw, &reference, d.type_index), d.type_index))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?
        };
    let op = build_sample_operator(
        &spec,
        &reference,
        layout.weights(),
        cfg.run.operator_m,
        fluctlab_harness::experiments::rep_seed(cfg.seed, 2, 0),
    )?;
    let cov = limit_covariance(&op, &phis)?;
    // Persist the full covariance artifact alongside the report.
    if let Some(dir) = &cfg.output.dir {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("covariance.json"),
            serde_json::to_string_pretty(&cov).expect("covariance serializes"),
        )?;
    }
    let n = cov.labels.len();
    let mut rows = Vec::new();
    for a in 0..n {
        let mut row = Vec::new();
        for b in 0..n {
            row.push(cov.entry(a, b));
        }
        rows.push(row);
    }
    report.tables.push(fluctlab_harness::report::TableData {
        name: "limit covariance".into(),
        columns: cov.labels.clone(),
        rows,
    });
    report.push_estimate("condition", cov.condition, 0.0);
    for (i, r) in cov.residuals.iter().enumerate() {
        report.push_estimate(format!("residual[{i}]"), *r, 0.0);
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let threads = cli.command.flags().threads;
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Simulate(_) => run_simulate(&cfg),
        Command::Covariance(_) => run_covariance(&cfg),
        _ => run_experiment(&cfg),
    };
    match result {
        Ok(report) => {
            let dir = PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| "out".into()));
            match emit_report(&report, &dir) {
                Ok(paths) => {
                    for c in &report.criteria {
                        println!(
                            "{}: {} (observed {}, target {}, tolerance {})",
                            c.name,
                            if c.passed { "pass" } else { "FAIL" },
                            c.observed,
                            c.target,
                            c.tolerance
                        );
                    }
                    println!("report written: {}", paths.join(", "));
                    if report.all_passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("failed to write report: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Err(HarnessError::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(3)
        }
    }
}
