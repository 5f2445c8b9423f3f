use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{
    read_json, train_to_dir, FailureRecord, RunStatus, RunSummary, FAILURE_FILE, SUMMARY_FILE,
};
use crate::error::{Error, Result};

pub const SWEEP_FILE: &str = "sweep.toml";
pub const RUNS_DIR: &str = "runs";

fn default_name() -> String {
    "sweep".into()
}

/// A grid over latent bits, parameter scale and seeds around a base run.
/// The base run's own `seed`, `alpha` and `latent_bits` are replaced per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub latent_bits: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_bits.is_empty() || self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "sweep grid needs at least one bits, alpha and seed value".into(),
            ));
        }
        for cfg in self.runs() {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every cell in bits-major, then alpha, then seed order.
    pub fn runs(&self) -> Vec<RunConfig> {
        let mut out =
            Vec::with_capacity(self.latent_bits.len() * self.alphas.len() * self.seeds.len());
        for &l in &self.latent_bits {
            for &alpha in &self.alphas {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.seed = seed;
                    cfg.model.latent_bits = l;
                    cfg.model.alpha = alpha;
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// One distinct run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub digest: String,
    pub config: RunConfig,
    pub param_count: usize,
}

/// The distinct runs of a grid and the number of cells dropped as
/// duplicates of an earlier digest.
pub fn plan(cfg: &SweepConfig) -> Result<(Vec<PlannedRun>, usize)> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    let mut runs = Vec::new();
    let mut duplicates = 0;
    for config in cfg.runs() {
        let digest = config.digest();
        if !seen.insert(digest.clone()) {
            log::warn!(
                "skipping duplicate run {digest} (l={}, alpha={}, seed={})",
                config.model.latent_bits,
                config.model.alpha,
                config.seed
            );
            duplicates += 1;
            continue;
        }
        let param_count = config.model.param_count(&config.grammar).total;
        runs.push(PlannedRun {
            digest,
            config,
            param_count,
        });
    }
    Ok((runs, duplicates))
}

/// What a dry run learned about a grid without training anything.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DryRun {
    pub runs: usize,
    pub duplicates: usize,
    pub language_size: u64,
    pub train_candidates: usize,
    pub val_candidates: usize,
    pub test_candidates: usize,
    /// (latent bits, alpha, total parameters) per distinct model shape.
    pub shapes: Vec<(usize, f64, usize)>,
}

/// Validates every cell, checks that each distinct split can be drawn and
/// computes parameter counts.
pub fn dry_run(cfg: &SweepConfig) -> Result<DryRun> {
    let (runs, duplicates) = plan(cfg)?;
    let mut splits = HashMap::new();
    let mut shapes = BTreeMap::new();
    for r in &runs {
        let key = (
            r.config.grammar,
            serde_json::to_string(&r.config.split).expect("split serializes"),
        );
        if let std::collections::hash_map::Entry::Vacant(e) = splits.entry(key) {
            let data = r.config.split.build(&r.config.grammar)?;
            e.insert((data.train.len(), data.val.len(), data.test.len()));
        }
        shapes.insert(
            (r.config.model.latent_bits, r.config.model.alpha.to_bits()),
            r.param_count,
        );
    }
    let (train, val, test) = splits.values().copied().min().expect("nonempty grid");
    Ok(DryRun {
        runs: runs.len(),
        duplicates,
        language_size: cfg.base.grammar.language_size()?,
        train_candidates: train,
        val_candidates: val,
        test_candidates: test,
        shapes: shapes
            .into_iter()
            .map(|((l, a), n)| (l, f64::from_bits(a), n))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Completed(RunStatus),
    /// Finished by an earlier invocation.
    AlreadyDone,
    /// Failed in an earlier invocation; the diagnostic is kept.
    AlreadyFailed,
    Failed {
        error: String,
        exit_code: i32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub digest: String,
    pub latent_bits: usize,
    pub alpha: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    pub duplicates: usize,
}

impl SweepOutcome {
    /// Runs trained by this invocation, failed or not.
    pub fn new_runs(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| {
                matches!(
                    c.status,
                    CellStatus::Completed(_) | CellStatus::Failed { .. }
                )
            })
            .count()
    }

    pub fn failed(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| {
                matches!(
                    c.status,
                    CellStatus::Failed { .. } | CellStatus::AlreadyFailed
                )
            })
            .count()
    }
}

fn previous_outcome(dir: &Path, digest: &str) -> Option<CellStatus> {
    if let Ok(s) = read_json::<RunSummary>(&dir.join(SUMMARY_FILE)) {
        if s.digest == digest {
            return Some(CellStatus::AlreadyDone);
        }
    }
    if let Ok(f) = read_json::<FailureRecord>(&dir.join(FAILURE_FILE)) {
        if f.digest == digest {
            return Some(CellStatus::AlreadyFailed);
        }
    }
    None
}

/// Runs every cell of the grid under `out/runs/<digest>`, `jobs` at a time.
/// Cells already finished or failed in `out` are skipped, and a failing
/// cell is recorded without stopping the others.
pub fn sweep(cfg: &SweepConfig, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    let (runs, duplicates) = plan(cfg)?;
    let runs_dir = out.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let sweep_path = out.join(SWEEP_FILE);
    fs::write(&sweep_path, cfg.to_toml()).map_err(|e| Error::io(&sweep_path, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let total = runs.len();
    let cells = pool.install(|| {
        runs.par_iter()
            .enumerate()
            .map(|(i, r)| {
                let dir = runs_dir.join(&r.digest);
                let status = match previous_outcome(&dir, &r.digest) {
                    Some(s) => {
                        log::info!("[{}/{total}] {} already present, skipping", i + 1, r.digest);
                        s
                    }
                    None => {
                        log::info!(
                            "[{}/{total}] training l={} alpha={} seed={} ({} params)",
                            i + 1,
                            r.config.model.latent_bits,
                            r.config.model.alpha,
                            r.config.seed,
                            r.param_count
                        );
                        match train_to_dir(&r.config, &dir) {
                            Ok(o) => CellStatus::Completed(o.summary.status),
                            Err(e) => {
                                log::warn!("run {} failed: {e}", r.digest);
                                CellStatus::Failed {
                                    error: e.to_string(),
                                    exit_code: e.exit_code(),
                                }
                            }
                        }
                    }
                };
                CellOutcome {
                    digest: r.digest.clone(),
                    latent_bits: r.config.model.latent_bits,
                    alpha: r.config.model.alpha,
                    seed: r.config.seed,
                    dir,
                    status,
                }
            })
            .collect()
    });
    Ok(SweepOutcome { cells, duplicates })
}
