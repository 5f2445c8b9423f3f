use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, RunConfig, SplitConfig};
use super::sweep::SweepConfig;
use crate::error::{Error, Result};
use crate::grammar::GrammarSpec;
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, ModelFamily};

/// Smallest scale the calibration scan considers.
pub const MIN_ALPHA: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// grammar(3,4), l 4..=10, 6 scales, 5 seeds, 20k steps, batch 64.
    Desk,
    /// grammar(6,10), model A, l 19..=25, 6 scales, 10 seeds, 200k steps,
    /// batch 1000.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub param_count: usize,
}

fn count_at(model: &ModelConfig, grammar: &GrammarSpec, alpha: f64) -> usize {
    let mut m = *model;
    m.alpha = alpha;
    m.param_count(grammar).total
}

/// Scales whose total parameter counts sit as close as possible above `k`
/// log-spaced targets between `min_count` and `max_count`. Targets outside
/// the reachable range are clamped to it. Counts are monotone in the scale,
/// so the returned points are sorted in both.
pub fn calibrate_alphas(
    grammar: &GrammarSpec,
    model: &ModelConfig,
    k: usize,
    min_count: usize,
    max_count: usize,
) -> Result<Vec<AlphaPoint>> {
    if k == 0 || min_count == 0 || min_count > max_count {
        return Err(Error::InvalidArgument(format!(
            "bad calibration request: {k} points in [{min_count}, {max_count}]"
        )));
    }
    let lo = count_at(model, grammar, MIN_ALPHA);
    let hi = count_at(model, grammar, 1.0);
    let (a, b) = (
        min_count.clamp(lo, hi) as f64,
        max_count.clamp(lo, hi) as f64,
    );
    let mut out: Vec<AlphaPoint> = Vec::with_capacity(k);
    for i in 0..k {
        let t = if k == 1 {
            0.0
        } else {
            i as f64 / (k - 1) as f64
        };
        let target = (a.ln() + t * (b.ln() - a.ln())).exp().round() as usize;
        let (mut l, mut r) = (MIN_ALPHA, 1.0);
        if count_at(model, grammar, l) < target {
            for _ in 0..60 {
                let mid = 0.5 * (l + r);
                if count_at(model, grammar, mid) >= target {
                    r = mid;
                } else {
                    l = mid;
                }
            }
        } else {
            r = l;
        }
        let alpha = if target >= hi {
            1.0
        } else {
            ((r * 1e4).ceil() / 1e4).min(1.0)
        };
        let param_count = count_at(model, grammar, alpha);
        if out.last().is_none_or(|p| p.param_count < param_count) {
            out.push(AlphaPoint { alpha, param_count });
        }
    }
    Ok(out)
}

impl Profile {
    pub fn grammar(self) -> GrammarSpec {
        match self {
            Profile::Desk => GrammarSpec::new(3, 4),
            Profile::Paper => GrammarSpec::new(6, 10),
        }
        .expect("profile grammar is valid")
    }

    /// The base run of the profile at scale 1 and the middle bit width.
    pub fn run_config(self, seed: u64) -> RunConfig {
        let grammar = self.grammar();
        match self {
            Profile::Desk => {
                let mut cfg = RunConfig::desk(grammar, 8, seed, 20_000);
                cfg.eval_every = 2_000;
                cfg
            }
            Profile::Paper => RunConfig {
                seed,
                steps: 200_000,
                eval_every: 10_000,
                stop_at_train_accuracy: None,
                grammar,
                split: SplitConfig::default(),
                model: ModelConfig::new(ModelFamily::A, 1.0, 22),
                optimizer: OptimizerConfig::default(),
                eval: EvalConfig::default(),
            },
        }
    }

    pub fn latent_bits(self) -> Vec<usize> {
        match self {
            Profile::Desk => (4..=10).collect(),
            Profile::Paper => (19..=25).collect(),
        }
    }

    pub fn seeds(self) -> Vec<u64> {
        match self {
            Profile::Desk => (0..5).collect(),
            Profile::Paper => (0..10).collect(),
        }
    }

    /// Total parameter range the scale grid is calibrated to.
    pub fn param_range(self) -> (usize, usize) {
        match self {
            Profile::Desk => (1_000, usize::MAX),
            Profile::Paper => (72_400, 1_534_000),
        }
    }

    pub fn alphas(self) -> Vec<AlphaPoint> {
        let base = self.run_config(0);
        let (lo, hi) = self.param_range();
        calibrate_alphas(&base.grammar, &base.model, 6, lo, hi)
            .expect("profile calibration is feasible")
    }

    pub fn sweep_config(self) -> SweepConfig {
        SweepConfig {
            name: match self {
                Profile::Desk => "desk",
                Profile::Paper => "paper",
            }
            .into(),
            latent_bits: self.latent_bits(),
            alphas: self.alphas().iter().map(|p| p.alpha).collect(),
            seeds: self.seeds(),
            base: self.run_config(0),
        }
    }
}
