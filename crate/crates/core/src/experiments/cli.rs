//! Command line: `train`, `lshsim`, `route-bench`, `theorem2`, `gradcheck`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::{bench, theorem2, train};
use crate::lsh_sim::{self, BucketWidth, Family, SimOptions, SimRoute};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SPARSE_MEMORY_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sparse-memory-lab", version, about = "Sparse memory layers, lookup functions and Alternating Updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `io.out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy language model; writes metrics.csv, timing.csv and checkpoint.bin.
    Train(Common),
    /// Monte Carlo collision rates of sentence pairs; writes lshsim.csv.
    Lshsim {
        #[command(flatten)]
        common: Common,
        /// Comma-separated families (hyperplane, spherical, minhash, token_id).
        #[arg(long)]
        family: Option<String>,
        /// Comma-separated overlap fractions.
        #[arg(long)]
        f: Option<String>,
        /// Comma-separated table sizes.
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Hash in the full dimension with the lookup functions themselves.
        #[arg(long)]
        full_route: bool,
    },
    /// Train one model per lookup grid entry; writes route_bench.csv.
    RouteBench(Common),
    /// Input-only versus per-layer embedding lookups; writes theorem2.csv.
    Theorem2(Common),
    /// Finite-difference check of the model loss; writes gradcheck.csv.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.io.out_dir = out.clone();
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<std::fs::File> {
    std::fs::create_dir_all(dir)?;
    Ok(std::fs::File::create(dir.join(name))?)
}

/// Caps the global rayon pool from [`THREADS_ENV`], if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
        // A pool that already exists (repeated calls in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common, &[])?;
            let out = train::train_model(&cfg, Some(&cfg.io.out_dir))?;
            if let Some(last) = out.final_eval() {
                println!(
                    "step {} train_loss {} eval_loss {} eval_accuracy {}",
                    last.step,
                    super::fmt_float(last.train_loss),
                    super::fmt_float(last.eval_loss),
                    super::fmt_float(last.eval_accuracy)
                );
            }
            if let Some(h) = out.entropy_rate {
                println!("corpus entropy rate {} nats/token", super::fmt_float(h));
            }
            println!("embedding params {} non-embedding params {}", out.counts.embedding, out.counts.non_embedding);
            Ok(true)
        }
        Command::Lshsim { common, family, f, n, l, d, trials, full_route } => {
            let mut extra = Vec::new();
            let flags = [
                ("lshsim.families", family),
                ("lshsim.f", f),
                ("lshsim.n", n),
                ("lshsim.l", l.map(|v| v.to_string())),
                ("lshsim.d", d.map(|v| v.to_string())),
                ("lshsim.trials", trials.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    extra.push((k, v));
                }
            }
            if full_route {
                extra.push(("lshsim.full_route", "true".into()));
            }
            let cfg = load_config(&common, &extra)?;
            let s = &cfg.lshsim;
            let opts = SimOptions {
                route: if s.full_route { SimRoute::Full } else { SimRoute::Reduced },
                projections: s.projections,
                width: s.width.map_or(BucketWidth::EntropyMatched, BucketWidth::Fixed),
                ..SimOptions::default()
            };
            let mut rows = Vec::new();
            let mut cell = 0u64;
            for &fam in &s.families {
                for &nn in &s.n {
                    for &ff in &s.f {
                        let seed = crate::tensor_nn::init::derive_seed(cfg.training.seed, cell);
                        rows.push(lsh_sim::estimate_collision_with(fam, ff, nn, s.l, s.d, s.trials, seed, &opts)?);
                        cell += 1;
                    }
                }
            }
            rows.sort_by(|a, b| {
                (family_key(a.family), a.n, a.f.to_bits()).cmp(&(family_key(b.family), b.n, b.f.to_bits()))
            });
            lsh_sim::write_csv(create(&cfg.io.out_dir, "lshsim.csv")?, &rows)?;
            Ok(true)
        }
        Command::RouteBench(common) => {
            let cfg = load_config(&common, &[])?;
            if cfg.bench.grid.is_empty() {
                return Err(Error::Config("bench.grid is empty".into()));
            }
            let rows = bench::run_lookup_benchmark(&cfg, &cfg.bench.grid)?;
            bench::write_csv(create(&cfg.io.out_dir, "route_bench.csv")?, &rows)?;
            Ok(true)
        }
        Command::Theorem2(common) => {
            let cfg = load_config(&common, &[])?;
            let rows = theorem2::run_theorem2_experiment(&cfg.theorem2, cfg.training.seed)?;
            theorem2::write_csv(create(&cfg.io.out_dir, "theorem2.csv")?, &rows)?;
            for &mult in &cfg.theorem2.width_multipliers {
                let w = mult * cfg.theorem2.d;
                for arch in [theorem2::Architecture::InputOnly, theorem2::Architecture::PerLayer] {
                    println!(
                        "{} width {w}: median test mse {}",
                        arch.name(),
                        super::fmt_float(theorem2::median_test_mse(&rows, arch, w))
                    );
                }
            }
            Ok(true)
        }
        Command::Gradcheck { common, epsilon, tolerance } => {
            let cfg = load_config(&common, &[])?;
            let report = train::gradcheck_language_model(&cfg, epsilon, tolerance)?;
            let mut out = create(&cfg.io.out_dir, "gradcheck.csv")?;
            use std::io::Write;
            writeln!(out, "param,max_rel_error,max_abs_grad")?;
            for p in &report.params {
                writeln!(out, "{},{},{}", p.name, super::fmt_float(p.max_rel_error), super::fmt_float(p.max_abs_grad))?;
            }
            println!(
                "max relative error {} (tolerance {}): {}",
                super::fmt_float(report.max_rel_error),
                super::fmt_float(tolerance),
                if report.passed { "pass" } else { "FAIL" }
            );
            Ok(report.passed)
        }
    }
}

fn family_key(f: Family) -> usize {
    Family::ALL.iter().position(|&g| g == f).expect("known family")
}

/// Parses `argv` (program name first) and runs; returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
