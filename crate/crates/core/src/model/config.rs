use serde::{Deserialize, Serialize};

use crate::diffcore::count;
use crate::error::{Error, Result};
use crate::grammar::GrammarSpec;

/// Base architectures. `A` and `B` are the full-size reference models;
/// `Desk` is a small model sized for single-CPU experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    A,
    B,
    Desk,
}

/// Layer widths before LSTM scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaseDims {
    pub speaker_embed: usize,
    pub speaker_hidden: usize,
    pub speaker_linear: usize,
    pub listener_embed: usize,
    pub listener_hidden: usize,
}

impl ModelFamily {
    pub fn base_dims(self) -> BaseDims {
        match self {
            ModelFamily::A => BaseDims {
                speaker_embed: 100,
                speaker_hidden: 200,
                speaker_linear: 300,
                listener_embed: 300,
                listener_hidden: 300,
            },
            ModelFamily::B => BaseDims {
                speaker_embed: 40,
                speaker_hidden: 300,
                speaker_linear: 60,
                listener_embed: 125,
                listener_hidden: 325,
            },
            ModelFamily::Desk => BaseDims {
                speaker_embed: 8,
                speaker_hidden: 32,
                speaker_linear: 32,
                listener_embed: 16,
                listener_hidden: 32,
            },
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    /// Scale applied to both LSTM hidden sizes, in (0, 1].
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub latent_bits: usize,
    /// Feed the flattened concept embedding at every speaker step rather
    /// than only the first.
    #[serde(default = "default_true")]
    pub speaker_input_every_step: bool,
    /// Overrides the family's base widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<BaseDims>,
}

/// Concrete layer widths after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub speaker_embed: usize,
    pub speaker_hidden: usize,
    pub speaker_linear: usize,
    pub listener_embed: usize,
    pub listener_hidden: usize,
    pub latent_bits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpeakerCount {
    pub embedding: usize,
    pub lstm: usize,
    pub projection: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ListenerCount {
    pub embedding: usize,
    pub lstm: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub speaker: SpeakerCount,
    pub listener: ListenerCount,
    pub prior: usize,
    pub temperature: usize,
    /// Speaker plus listener, the capacity axis used in reports.
    pub agents: usize,
    pub total: usize,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, alpha: f64, latent_bits: usize) -> Self {
        ModelConfig {
            family,
            alpha,
            latent_bits,
            speaker_input_every_step: true,
            dims: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.latent_bits == 0 || self.latent_bits > 64 {
            return Err(Error::Config(format!(
                "latent_bits must be in [1, 64], got {}",
                self.latent_bits
            )));
        }
        let b = self.base();
        if [
            b.speaker_embed,
            b.speaker_hidden,
            b.speaker_linear,
            b.listener_embed,
            b.listener_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn base(&self) -> BaseDims {
        self.dims.unwrap_or_else(|| self.family.base_dims())
    }

    pub fn dims(&self) -> ModelDims {
        let b = self.base();
        let scale = |h: usize| ((h as f64 * self.alpha).round() as usize).max(1);
        ModelDims {
            speaker_embed: b.speaker_embed,
            speaker_hidden: scale(b.speaker_hidden),
            speaker_linear: b.speaker_linear,
            listener_embed: b.listener_embed,
            listener_hidden: scale(b.listener_hidden),
            latent_bits: self.latent_bits,
        }
    }

    /// Exact scalar parameter counts per component.
    pub fn param_count(&self, grammar: &GrammarSpec) -> ParamBreakdown {
        let d = self.dims();
        let sigma = grammar.alphabet_size();
        let n = grammar.num_concepts;
        let l = d.latent_bits;

        let mut speaker = SpeakerCount {
            embedding: count::embedding(sigma, d.speaker_embed),
            lstm: count::lstm(n * d.speaker_embed, d.speaker_hidden),
            projection: count::affine(d.speaker_hidden, d.speaker_linear),
            head: count::affine(d.speaker_linear, 2),
            total: 0,
        };
        speaker.total = speaker.embedding + speaker.lstm + speaker.projection + speaker.head;

        let mut listener = ListenerCount {
            embedding: count::embedding(2 * l, d.listener_embed),
            lstm: count::lstm(d.listener_embed, d.listener_hidden),
            head: count::affine(d.listener_hidden, sigma),
            total: 0,
        };
        listener.total = listener.embedding + listener.lstm + listener.head;

        let agents = speaker.total + listener.total;
        ParamBreakdown {
            speaker,
            listener,
            prior: l,
            temperature: 1,
            agents,
            total: agents + l + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_grammar() -> GrammarSpec {
        GrammarSpec::new(6, 10).unwrap()
    }

    #[test]
    fn model_a_speaker_matches_reported_total() {
        let c = ModelConfig::new(ModelFamily::A, 1.0, 20).param_count(&full_grammar());
        assert_eq!(c.speaker.embedding, 6_000);
        assert_eq!(c.speaker.lstm, 640_800);
        assert_eq!(c.speaker.projection, 60_300);
        assert_eq!(c.speaker.head, 602);
        assert_eq!(c.speaker.total, 707_702);
        assert!((c.speaker.total as f64 - 708_000.0).abs() / 708_000.0 < 0.01);
    }

    #[test]
    fn model_b_speaker_matches_reported_total() {
        let c = ModelConfig::new(ModelFamily::B, 1.0, 20).param_count(&full_grammar());
        assert_eq!(c.speaker.total, 669_782);
        assert!((c.speaker.total as f64 - 670_000.0).abs() / 670_000.0 < 0.01);
    }

    #[test]
    fn listener_counts_under_summed_bit_embeddings() {
        // Reported listener totals are 825k (A) and 690k (B); the summed
        // positional bit-embedding reading gives smaller values.
        let a = ModelConfig::new(ModelFamily::A, 1.0, 20).param_count(&full_grammar());
        assert_eq!(a.listener.total, 12_000 + 721_200 + 18_060);
        let b = ModelConfig::new(ModelFamily::B, 1.0, 20).param_count(&full_grammar());
        assert_eq!(b.listener.total, 5_000 + 586_300 + 19_560);
    }

    #[test]
    fn count_is_strictly_monotone_in_alpha() {
        let g = full_grammar();
        let mut last = 0;
        for k in 1..=20 {
            let alpha = k as f64 / 20.0;
            let total = ModelConfig::new(ModelFamily::A, alpha, 20)
                .param_count(&g)
                .total;
            assert!(total > last, "alpha {alpha}");
            last = total;
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::new(ModelFamily::Desk, 0.0, 8)
            .validate()
            .is_err());
        assert!(ModelConfig::new(ModelFamily::Desk, 1.5, 8)
            .validate()
            .is_err());
        assert!(ModelConfig::new(ModelFamily::Desk, 1.0, 0)
            .validate()
            .is_err());
        assert!(ModelConfig::new(ModelFamily::Desk, 0.5, 8)
            .validate()
            .is_ok());
    }
}
