use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{build_splits, DatasetBundle, HeldOutPair, SplitSpec};
use crate::diffcore::{AdamConfig, GumbelMode};
use crate::error::{Error, Result};
use crate::grammar::GrammarSpec;
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, ModelFamily};

/// How the three splits are drawn. Unset fields take their defaults:
/// held-out pairs at positions (0, 1) with values drawn from `seed`, and
/// every split as large as the default caps allow.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pair: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_pair: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
}

impl SplitConfig {
    /// Resolves the defaults and builds the dataset.
    pub fn build(&self, grammar: &GrammarSpec) -> Result<DatasetBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spec = SplitSpec::with_defaults(grammar, self.seed, &mut rng)?;
        if let Some(p) = &self.val_pair {
            spec.val_pair = HeldOutPair::from_text(p)?;
        }
        if let Some(p) = &self.test_pair {
            spec.test_pair = HeldOutPair::from_text(p)?;
        }
        if self.val_pair.is_some() || self.test_pair.is_some() {
            let counts = spec.candidate_counts(grammar)?;
            spec.n_train = counts.train.min(crate::datasets::DEFAULT_MAX_TRAIN);
            spec.n_val = counts.val.min(crate::datasets::DEFAULT_MAX_HELD_OUT);
            spec.n_test = counts.test.min(crate::datasets::DEFAULT_MAX_HELD_OUT);
        }
        spec.n_train = self.n_train.unwrap_or(spec.n_train);
        spec.n_val = self.n_val.unwrap_or(spec.n_val);
        spec.n_test = self.n_test.unwrap_or(spec.n_test);
        build_splits(grammar, &spec, &mut rng)
    }
}

fn default_batch() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub gumbel: GumbelMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            adam: AdamConfig::default(),
            batch_size: default_batch(),
            gumbel: GumbelMode::StraightThrough,
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub eval_every: u64,
    /// Ends the run at the first evaluation whose train accuracy reaches
    /// this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_train_accuracy: Option<f64>,
    pub grammar: GrammarSpec,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// A small configuration on `grammar` with desk-family defaults.
    pub fn desk(grammar: GrammarSpec, latent_bits: usize, seed: u64, steps: u64) -> Self {
        RunConfig {
            seed,
            steps,
            eval_every: (steps / 10).max(1),
            stop_at_train_accuracy: None,
            grammar,
            split: SplitConfig::default(),
            model: ModelConfig::new(ModelFamily::Desk, 1.0, latent_bits),
            optimizer: OptimizerConfig {
                batch_size: 64,
                ..OptimizerConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.adam.lr >= 0.0 && self.optimizer.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "bad learning rate {}",
                self.optimizer.adam.lr
            )));
        }
        if self.eval.precision_samples == 0 || self.eval.recall_k == 0 {
            return Err(Error::Config(
                "metric sample sizes must be at least 1".into(),
            ));
        }
        if let Some(a) = self.stop_at_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "stop_at_train_accuracy {a} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 3
steps = 50
eval_every = 10

[grammar]
num_concepts = 2
values_per_concept = 3

[split]
seed = 1
val_pair = "0:0,1:1"
test_pair = "0:2,1:0"

[model]
family = "desk"
latent_bits = 4

[optimizer]
lr = 0.003
batch_size = 8
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.model.alpha, 1.0);
        assert!(cfg.model.speaker_input_every_step);
        assert_eq!(cfg.optimizer.adam.weight_decay, 1e-4);
        assert_eq!(cfg.optimizer.adam.beta2, 0.999);
        assert_eq!(cfg.eval.precision_samples, 10_000);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::from_toml(EXAMPLE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 4;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml(&EXAMPLE.replace("steps = 50", "steps = 0")).is_err());
        assert!(
            RunConfig::from_toml(&EXAMPLE.replace("latent_bits = 4", "latent_bits = 0")).is_err()
        );
        assert!(RunConfig::from_toml(
            &EXAMPLE.replace("latent_bits = 4", "latent_bits = 4\nalpha = 1.5")
        )
        .is_err());
        assert!(RunConfig::from_toml(&EXAMPLE.replace("seed = 3", "seed = 3\nbogus = 1")).is_err());
        assert!(matches!(
            RunConfig::from_toml("seed = "),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_config_builds_requested_pairs() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        let data = cfg.split.build(&cfg.grammar).unwrap();
        assert_eq!(data.split.val_pair, HeldOutPair((0, 0), (1, 1)));
        assert_eq!(
            (data.train.len(), data.val.len(), data.test.len()),
            (7, 1, 1)
        );
        assert_eq!(data, cfg.split.build(&cfg.grammar).unwrap());
    }
}
