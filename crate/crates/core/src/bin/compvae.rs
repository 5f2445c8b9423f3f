use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use compvae::experiments::{self, load_model, write_json, Profile, RunConfig, SweepConfig};
use compvae::metrics::{evaluate, EvalConfig};
use compvae::{Error, Result};

/// Compositional-language VAE laboratory.
#[derive(Debug, Parser)]
#[command(name = "compvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Source {
    /// TOML config file.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the train/val/test split of a run config.
    GenData {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one run.
    Train {
        #[command(flatten)]
        src: Source,
        /// Run directory (default runs/<digest>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the checkpoint of a run directory.
    Eval {
        run_dir: PathBuf,
        /// TOML file of metric settings; defaults to the run's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (default <run_dir>/eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of bits × scale × seeds.
    Sweep {
        #[command(flatten)]
        src: Source,
        /// Sweep directory (default sweeps/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Validate the grid and print its plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Build CSV grids and SVG figures from run records.
    Report {
        records: PathBuf,
        /// Report directory (default <records>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(src: &Source) -> Result<RunConfig> {
    let mut cfg = match (&src.config, src.profile) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(profile)) => profile.run_config(0),
        (None, None) => return Err(Error::Config("pass --config or --profile".into())),
    };
    if let Some(s) = src.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sweep_config(src: &Source) -> Result<SweepConfig> {
    let mut cfg = match (&src.config, src.profile) {
        (Some(p), _) => SweepConfig::load(p)?,
        (None, Some(profile)) => profile.sweep_config(),
        (None, None) => return Err(Error::Config("pass --config or --profile".into())),
    };
    if let Some(s) = src.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { src, out } => {
            let mut cfg = run_config(&src)?;
            if let Some(s) = src.seed {
                cfg.split.seed = s;
            }
            let data = cfg.split.build(&cfg.grammar)?;
            mkdir(&out)?;
            let path = out.join("dataset.txt");
            data.write(&path)?;
            println!(
                "wrote {} (train {}, val {}, test {}; val pair {}, test pair {})",
                path.display(),
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.split.val_pair.to_text(),
                data.split.test_pair.to_text()
            );
        }
        Command::Train { src, out } => {
            let cfg = run_config(&src)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(cfg.digest()));
            let result = experiments::train_to_dir(&cfg, &dir)?;
            print_json(&result.summary);
        }
        Command::Eval {
            run_dir,
            config,
            seed,
            out,
        } => {
            let (cfg, model) = load_model(&run_dir)?;
            let eval: EvalConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => cfg.eval,
            };
            let data = cfg.split.build(&cfg.grammar)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
            let report = evaluate(
                &model,
                &cfg.grammar,
                &data.train,
                &data.val,
                &data.test,
                &eval,
                &mut rng,
            )?;
            write_json(&out.unwrap_or_else(|| run_dir.join("eval.json")), &report)?;
            print_json(&report);
        }
        Command::Sweep {
            src,
            out,
            jobs,
            dry_run,
        } => {
            let cfg = sweep_config(&src)?;
            if dry_run {
                print_json(&experiments::dry_run(&cfg)?);
                return Ok(());
            }
            let dir = out.unwrap_or_else(|| PathBuf::from("sweeps").join(&cfg.name));
            let outcome = experiments::sweep(&cfg, &dir, jobs)?;
            println!(
                "{} cells, {} trained now, {} failed, {} duplicates skipped; runs in {}",
                outcome.cells.len(),
                outcome.new_runs(),
                outcome.failed(),
                outcome.duplicates,
                dir.join(experiments::sweep::RUNS_DIR).display()
            );
        }
        Command::Report { records, out } => {
            if !records.exists() {
                return Err(Error::io(&records, std::io::ErrorKind::NotFound.into()));
            }
            let dir = out.unwrap_or_else(|| records.join("report"));
            let r = experiments::report(&records, &dir)?;
            let runs: usize = r
                .counts
                .iter()
                .map(|c| c.finished + c.failed + c.incomplete)
                .sum();
            println!("report over {runs} runs written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
