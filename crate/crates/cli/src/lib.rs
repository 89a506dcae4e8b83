//! Command-line harness for hybrid training runs.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! failures while running.

use std::path::{Path, PathBuf};

use anyhow::Context;
use bbtrain_core::config::{ProbeConfig, RunConfig};
use bbtrain_core::data::{generate, write_csv, Generator};
use bbtrain_core::experiment::{
    run_probe, run_psi_test, run_sweep, run_training, write_probe_csv, write_tracking_csv, PsiTestConfig, SweepGrid,
};
use bbtrain_core::{Error, RngStream};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable holding the log filter, e.g. `info` or `debug`.
pub const LOG_ENV: &str = "ASTRALORA_LOG";

#[derive(Debug, Parser)]
#[command(name = "bbtrain", version, about = "Train networks containing query-only black-box layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration into a run directory.
    Train(TrainArgs),
    /// Train every rank × budget × seed cell and aggregate test accuracy.
    Sweep(SweepArgs),
    /// Measure estimator error against closed-form gradients.
    Probe(ProbeArgs),
    /// Write a synthetic two-class dataset as CSV.
    GenData(GenDataArgs),
    /// Check surrogate update exactness and drift tracking.
    PsiTest(PsiTestArgs),
}

#[derive(Debug, Args)]
pub struct RunDirArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Empty a non-empty output directory first.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub dir: RunDirArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ranks: Vec<usize>,
    /// Query budgets; each sets both m_bb and m_sm.
    #[arg(long, value_delimiter = ',', required = true)]
    pub budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub dir: RunDirArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// File with a [probe] table; other tables are ignored. Defaults apply
    /// when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub dir: RunDirArgs,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_generator)]
    pub kind: Generator,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PsiTestArgs {
    #[arg(long, default_value_t = 32)]
    pub d_inp: usize,
    #[arg(long, default_value_t = 32)]
    pub d_out: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub drift: f64,
    #[arg(long, default_value_t = 1000)]
    pub m_sm: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub dir: RunDirArgs,
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for anything the user can fix in the config or command line.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::RunDirNotEmpty(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Probe(a) => probe(a),
        Command::GenData(a) => gen_data(a),
        Command::PsiTest(a) => psi_test(a),
    }
}

fn read_config(path: &Path) -> anyhow::Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok((cfg, text))
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn output_dir(cli: Option<&PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli.cloned()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, mut text) = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        // Keep the run directory self-describing.
        text = format!("{text}\n# seed overridden on the command line: {seed}\n");
    }
    let out = output_dir(a.dir.out.as_ref(), &cfg);
    let outcome = run_training(&cfg, &text, &out, &config_base(&a.config), a.dir.force)?;
    let s = &outcome.summary;
    println!(
        "{}: final accuracy {:.4}, total queries {} (forward {}, zo {}, psi {})",
        out.display(),
        s.test_accuracy,
        s.queries.training(),
        s.queries.forward,
        s.queries.zo,
        s.queries.psi
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let (cfg, _) = read_config(&a.config)?;
    let grid = SweepGrid {
        ranks: a.ranks,
        budgets: a.budgets,
        seeds: a.seeds,
    };
    let out = a.dir.out.clone().unwrap_or_else(|| Path::new("runs").join(format!("{}-sweep", cfg.name)));
    let outcome = run_sweep(&cfg, &grid, &out, &config_base(&a.config), a.jobs, a.dir.force)?;
    println!("rank,budget,runs,failed,acc_mean,acc_min,acc_max");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in &outcome.aggregate {
        println!(
            "{},{},{},{},{},{},{}",
            r.rank,
            r.budget,
            r.runs,
            r.failed,
            fmt(r.acc_mean),
            fmt(r.acc_min),
            fmt(r.acc_max)
        );
    }
    match outcome.monotone {
        Some(m) => println!("monotone: {m}"),
        None => println!("monotone: unknown"),
    }
    let failed = outcome.cells.iter().filter(|c| c.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see {}", outcome.cells.len(), out.join("cells.csv").display());
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let mut pc = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            match table.get("probe") {
                Some(v) => v
                    .clone()
                    .try_into::<ProbeConfig>()
                    .map_err(|e| Error::Config(format!("{}: [probe]: {e}", path.display())))?,
                None => ProbeConfig::default(),
            }
        }
        None => ProbeConfig::default(),
    };
    if let Some(seed) = a.seed {
        pc.seed = seed;
    }
    let out = a.dir.out.clone().unwrap_or_else(|| PathBuf::from("runs/probe"));
    pc.validate()?;
    bbtrain_core::experiment::prepare_run_dir(&out, a.dir.force)?;
    let rows = run_probe(&pc)?;
    let path = out.join("probe.csv");
    write_probe_csv(&path, &rows)?;
    for r in rows.iter().filter(|r| r.slope.is_some()) {
        println!("{}: slope {:.3}", r.study, r.slope.unwrap_or(f64::NAN));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let ds = generate(a.kind, a.n, a.noise, &mut RngStream::new(a.seed, "data"))?;
    write_csv(&a.out, &ds).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} rows of {} features to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn psi_test(a: PsiTestArgs) -> anyhow::Result<()> {
    let pc = PsiTestConfig {
        d_inp: a.d_inp,
        d_out: a.d_out,
        rank: a.rank,
        pairs: a.pairs,
        steps: a.steps,
        drift: a.drift,
        m_sm: a.m_sm,
        seed: a.seed,
    };
    let rep = run_psi_test(&pc)?;
    println!("exactness: max error {:.3e} over {} pairs", rep.max_exact_err, pc.pairs);
    println!("orthonormality: max defect {:.3e}", rep.max_orthonormality_defect);
    println!(
        "queries per update: {} (expected {})",
        rep.update_queries, rep.predicted_queries
    );
    if let Some(last) = rep.tracking.last() {
        println!(
            "tracking after {} steps: relative error {:.4} (stale surrogate {:.4})",
            last.step, last.tracked_err, last.stale_err
        );
    }
    if let Some(out) = &a.dir.out {
        bbtrain_core::experiment::prepare_run_dir(out, a.dir.force)?;
        write_tracking_csv(&out.join("tracking.csv"), &rep.tracking)?;
        println!("wrote {}", out.join("tracking.csv").display());
    }
    Ok(())
}
