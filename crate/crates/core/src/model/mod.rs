//! Variational autoencoder with a discrete binary-sequence bottleneck.
//!
//! The speaker (encoder) maps a concept string to `l` independent Bernoulli
//! distributions, the listener (decoder) maps a binary message back to one
//! distribution over the alphabet per concept position, and the prior is a
//! learned factorized Bernoulli over messages.

mod config;
mod prior;
mod vae;

pub use config::{
    BaseDims, ListenerCount, ModelConfig, ModelDims, ModelFamily, ParamBreakdown, SpeakerCount,
};
pub use prior::{kl_factorized_bernoulli, prior_logprob, prior_sample, KlValue, KL_CLAMP};
pub use vae::{ElboSample, ElboVars, Vae};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::ConceptString;

/// A binary latent message `z` of length `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "message bit {b} is not 0 or 1"
            )));
        }
        Ok(Message { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Message { bits: vec![0; len] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bit `t` stored at position `t` of the result; requires `l <= 64`.
    pub fn packed(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (t, &b)| acc | (u64::from(b) << t))
    }

    /// Reads the hard one-hot row `row` of a `B × 2l` message matrix.
    pub fn from_one_hot(m: &Array2<f64>, row: usize) -> Self {
        let bits = (0..m.ncols() / 2)
            .map(|t| u8::from(m[[row, 2 * t + 1]] > m[[row, 2 * t]]))
            .collect();
        Message { bits }
    }
}

/// Stacks messages into a `B × 2l` one-hot matrix.
pub fn one_hot(messages: &[Message], l: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((messages.len(), 2 * l));
    for (r, msg) in messages.iter().enumerate() {
        if msg.len() != l {
            return Err(Error::InvalidArgument(format!(
                "message has {} bits, expected {l}",
                msg.len()
            )));
        }
        for (t, &b) in msg.bits().iter().enumerate() {
            m[[r, 2 * t + b as usize]] = 1.0;
        }
    }
    Ok(m)
}

/// Anything mapping concept strings to per-bit Bernoulli probabilities.
pub trait Encoder {
    fn latent_bits(&self) -> usize;

    /// `B × l` matrix of `P(z_t = 1 | s)`.
    fn encode_probs(&self, strings: &[ConceptString]) -> Result<Array2<f64>>;
}

/// Anything mapping messages to per-position distributions over the alphabet.
pub trait Decoder {
    fn latent_bits(&self) -> usize;

    fn alphabet_size(&self) -> usize;

    /// One `B × |Σ|` matrix of log-probabilities per concept position.
    fn decode_log_probs(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>>;
}

/// A factorized Bernoulli prior over messages.
pub trait LatentPrior {
    /// `P(z_t = 1)` for each bit.
    fn bit_probs(&self) -> Vec<f64>;
}

/// A fixed per-bit prior, e.g. uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPrior(pub Vec<f64>);

impl FixedPrior {
    pub fn uniform(l: usize) -> Self {
        FixedPrior(vec![0.5; l])
    }
}

impl LatentPrior for FixedPrior {
    fn bit_probs(&self) -> Vec<f64> {
        self.0.clone()
    }
}

/// Result of one deterministic encode/decode round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Autoencoded {
    pub message: Message,
    pub decoded: Vec<u32>,
    pub exact_match: bool,
}

/// Per-bit argmax (ties to 0).
pub fn hard_encode<E: Encoder + ?Sized>(
    encoder: &E,
    strings: &[ConceptString],
) -> Result<Vec<Message>> {
    let probs = encoder.encode_probs(strings)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| Message {
            bits: row.iter().map(|&p| u8::from(p > 0.5)).collect(),
        })
        .collect())
}

/// Per-position argmax over the full alphabet (ties to the lowest token).
pub fn hard_decode<D: Decoder + ?Sized>(
    decoder: &D,
    messages: &[Message],
) -> Result<Vec<Vec<u32>>> {
    let per_pos = decoder.decode_log_probs(messages)?;
    Ok((0..messages.len())
        .map(|r| {
            per_pos
                .iter()
                .map(|lp| {
                    let row = lp.row(r);
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect())
}

const CHUNK: usize = 2048;

/// Encodes each string to its argmax message, decodes the argmax string,
/// and reports whether it reproduces the input.
pub fn deterministic_autoencode<E, D>(
    encoder: &E,
    decoder: &D,
    strings: &[ConceptString],
) -> Result<Vec<Autoencoded>>
where
    E: Encoder + ?Sized,
    D: Decoder + ?Sized,
{
    let mut out = Vec::with_capacity(strings.len());
    for chunk in strings.chunks(CHUNK) {
        let messages = hard_encode(encoder, chunk)?;
        let decoded = hard_decode(decoder, &messages)?;
        for ((s, message), decoded) in chunk.iter().zip(messages).zip(decoded) {
            let exact_match = decoded.as_slice() == s.tokens();
            out.push(Autoencoded {
                message,
                decoded,
                exact_match,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_validation_and_packing() {
        assert!(Message::new(vec![0, 2]).is_err());
        let m = Message::new(vec![1, 0, 1]).unwrap();
        assert_eq!(m.packed(), 0b101);
        let oh = one_hot(std::slice::from_ref(&m), 3).unwrap();
        assert_eq!(oh.row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(Message::from_one_hot(&oh, 0), m);
        assert!(one_hot(&[m], 4).is_err());
    }
}
