//! `fedpac run | verify | partition-stats`.
//!
//! Exit status: 0 on success, 1 when an experiment or check fails, 2 for
//! usage and configuration errors. Output directory precedence: `--out`,
//! then `out_dir` in the config file, then `$FEDPAC_OUT_DIR`, then `./out`.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ConfigFile;
use crate::data::label_heterogeneity;
use crate::error::{Error, Result};
use crate::orchestrator::{build_federation, run_stem, run_to_dir, Algorithm};
use crate::verify::{run_suite, Level, Options};

pub const OUT_DIR_ENV: &str = "FEDPAC_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fedpac", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct Overrides {
    /// Experiment file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics, weight matrices and checkpoints.
    Run(Overrides),
    /// Numerical self-checks.
    Verify {
        #[arg(long, default_value = "fast")]
        level: Level,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Per-client label histograms, no training.
    PartitionStats(Overrides),
}

fn load(o: &Overrides) -> Result<ConfigFile> {
    let mut cfg = match &o.config {
        Some(path) => ConfigFile::read(path)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = o.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(rounds) = o.rounds {
        cfg.experiment.rounds = rounds;
    }
    if let Some(name) = &o.algorithm {
        cfg.experiment.algorithm = name
            .parse::<Algorithm>()
            .map_err(|e| Error::config("algorithm", e.to_string()))?;
    }
    if let Some(workers) = o.workers {
        cfg.experiment.workers = workers;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ConfigFile) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Io { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn cmd_run(o: &Overrides, out: &mut dyn Write) -> Result<i32> {
    let cfg = load(o)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let exp = &cfg.experiment;
    let mut finals = Vec::with_capacity(exp.seeds.len());
    for &seed in &exp.seeds {
        let path = dir.join(format!("config_{}.txt", run_stem(exp.algorithm, seed)));
        std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
        let result = run_to_dir(exp, seed, &dir)?;
        let last = result.final_report();
        let _ = writeln!(
            out,
            "{} seed {seed}: final accuracy {:.2} ± {:.2} over {} clients after {} rounds",
            exp.algorithm,
            100.0 * last.mean_accuracy,
            100.0 * last.std_accuracy,
            last.accuracies.len(),
            last.round
        );
        finals.push(last.mean_accuracy);
    }
    if finals.len() > 1 {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let _ = writeln!(
            out,
            "{} over {} seeds: {:.2} ± {:.2}",
            exp.algorithm,
            finals.len(),
            100.0 * mean,
            100.0 * std
        );
    }
    let _ = writeln!(out, "outputs in {}", dir.display());
    Ok(EXIT_OK)
}

fn cmd_verify(level: Level, corrupt_gradient: bool, out: &mut dyn Write) -> Result<i32> {
    let results = run_suite(level, Options { corrupt_gradient })?;
    for r in &results {
        let _ = writeln!(out, "{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_partition_stats(o: &Overrides, out: &mut dyn Write) -> Result<i32> {
    let cfg = load(o)?;
    let exp = &cfg.experiment;
    let k = exp.dims.classes;
    for &seed in &exp.seeds {
        let datasets = build_federation(exp, seed)?;
        let _ = writeln!(
            out,
            "seed {seed}: {} clients, scheme {}",
            datasets.len(),
            exp.partition.scheme
        );
        let header: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let _ = writeln!(out, "client,group,n_train,n_test,{}", header.join(","));
        for d in &datasets {
            let hist: Vec<String> = d.train.label_histogram(k).iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                d.client_id,
                d.group_id,
                d.train.len(),
                d.test.len(),
                hist.join(",")
            );
        }
        let _ = writeln!(
            out,
            "mean total-variation distance to pooled labels: {:.4}",
            label_heterogeneity(&datasets, k)
        );
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command. Errors are
/// printed to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = match &cli.command {
        Command::Run(o) => cmd_run(o, out),
        Command::Verify {
            level,
            corrupt_gradient,
        } => cmd_verify(*level, *corrupt_gradient, out),
        Command::PartitionStats(o) => cmd_partition_stats(o, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
