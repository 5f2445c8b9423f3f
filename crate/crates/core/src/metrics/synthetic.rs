//! Hand-built reference models with known metric values.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grammar::{ConceptString, GrammarSpec};
use crate::model::{Decoder, Encoder, LatentPrior, Message};

fn check_messages(messages: &[Message], l: usize) -> Result<()> {
    match messages.iter().find(|m| m.len() != l) {
        Some(m) => Err(Error::InvalidArgument(format!(
            "message has {} bits, expected {l}",
            m.len()
        ))),
        None => Ok(()),
    }
}

/// Concept `i` written in binary into its own block of `⌈log₂ V⌉` bits,
/// with a uniform prior. Decoding reads each block back (modulo `V`), so
/// every message decodes to a member.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfectCode {
    grammar: GrammarSpec,
    bits_per_concept: usize,
}

impl PerfectCode {
    pub fn new(grammar: &GrammarSpec) -> Self {
        let v = grammar.values_per_concept;
        let bits_per_concept = (usize::BITS - (v - 1).leading_zeros()).max(1) as usize;
        PerfectCode {
            grammar: *grammar,
            bits_per_concept,
        }
    }

    pub fn encode_one(&self, s: &ConceptString) -> Result<Message> {
        let b = self.bits_per_concept;
        let values = self.grammar.concepts_of(s)?;
        Message::new(
            values
                .iter()
                .flat_map(|&v| (0..b).map(move |k| ((v >> k) & 1) as u8))
                .collect(),
        )
    }

    pub fn decode_one(&self, z: &Message) -> Vec<u32> {
        let b = self.bits_per_concept;
        let v = self.grammar.values_per_concept as u32;
        (0..self.grammar.num_concepts)
            .map(|i| {
                let value = (0..b).fold(0u32, |acc, k| acc | (u32::from(z.bits()[i * b + k]) << k));
                i as u32 * v + value % v
            })
            .collect()
    }
}

impl Encoder for PerfectCode {
    fn latent_bits(&self) -> usize {
        self.grammar.num_concepts * self.bits_per_concept
    }

    fn encode_probs(&self, strings: &[ConceptString]) -> Result<Array2<f64>> {
        let l = Encoder::latent_bits(self);
        let mut out = Array2::zeros((strings.len(), l));
        for (r, s) in strings.iter().enumerate() {
            for (t, &b) in self.encode_one(s)?.bits().iter().enumerate() {
                out[[r, t]] = f64::from(b);
            }
        }
        Ok(out)
    }
}

fn point_mass(rows: &[Vec<u32>], n: usize, sigma: usize) -> Vec<Array2<f64>> {
    (0..n)
        .map(|j| {
            let mut m = Array2::from_elem((rows.len(), sigma), f64::NEG_INFINITY);
            for (r, s) in rows.iter().enumerate() {
                m[[r, s[j] as usize]] = 0.0;
            }
            m
        })
        .collect()
}

impl Decoder for PerfectCode {
    fn latent_bits(&self) -> usize {
        Encoder::latent_bits(self)
    }

    fn alphabet_size(&self) -> usize {
        self.grammar.alphabet_size()
    }

    fn decode_log_probs(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>> {
        check_messages(messages, Encoder::latent_bits(self))?;
        let rows: Vec<Vec<u32>> = messages.iter().map(|z| self.decode_one(z)).collect();
        Ok(point_mass(
            &rows,
            self.grammar.num_concepts,
            self.grammar.alphabet_size(),
        ))
    }
}

impl LatentPrior for PerfectCode {
    fn bit_probs(&self) -> Vec<f64> {
        vec![0.5; Encoder::latent_bits(self)]
    }
}

/// Uniform over the language: fair-coin speaker and prior, and a listener
/// that ignores the message and is uniform over each position's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformModel {
    grammar: GrammarSpec,
    latent_bits: usize,
}

impl UniformModel {
    pub fn new(grammar: &GrammarSpec, latent_bits: usize) -> Self {
        UniformModel {
            grammar: *grammar,
            latent_bits,
        }
    }
}

impl Encoder for UniformModel {
    fn latent_bits(&self) -> usize {
        self.latent_bits
    }

    fn encode_probs(&self, strings: &[ConceptString]) -> Result<Array2<f64>> {
        Ok(Array2::from_elem((strings.len(), self.latent_bits), 0.5))
    }
}

impl Decoder for UniformModel {
    fn latent_bits(&self) -> usize {
        self.latent_bits
    }

    fn alphabet_size(&self) -> usize {
        self.grammar.alphabet_size()
    }

    fn decode_log_probs(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>> {
        check_messages(messages, self.latent_bits)?;
        let lp = -(self.grammar.values_per_concept as f64).ln();
        Ok((0..self.grammar.num_concepts)
            .map(|j| {
                let (lo, hi) = self.grammar.position_range(j);
                let mut m = Array2::from_elem(
                    (messages.len(), self.grammar.alphabet_size()),
                    f64::NEG_INFINITY,
                );
                m.columns_mut()
                    .into_iter()
                    .skip(lo as usize)
                    .take((hi - lo) as usize)
                    .for_each(|mut c| c.fill(lp));
                m
            })
            .collect())
    }
}

impl LatentPrior for UniformModel {
    fn bit_probs(&self) -> Vec<f64> {
        vec![0.5; self.latent_bits]
    }
}

/// Emits one fixed message for every input and decodes every message to one
/// fixed token sequence; the prior is a point mass on the message.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    grammar: GrammarSpec,
    message: Message,
    decoded: Vec<u32>,
}

impl ConstantModel {
    pub fn new(grammar: &GrammarSpec, message: Message, decoded: Vec<u32>) -> Self {
        ConstantModel {
            grammar: *grammar,
            message,
            decoded,
        }
    }
}

impl Encoder for ConstantModel {
    fn latent_bits(&self) -> usize {
        self.message.len()
    }

    fn encode_probs(&self, strings: &[ConceptString]) -> Result<Array2<f64>> {
        let bits = self.message.bits();
        Ok(Array2::from_shape_fn(
            (strings.len(), bits.len()),
            |(_, t)| f64::from(bits[t]),
        ))
    }
}

impl Decoder for ConstantModel {
    fn latent_bits(&self) -> usize {
        self.message.len()
    }

    fn alphabet_size(&self) -> usize {
        self.grammar.alphabet_size()
    }

    fn decode_log_probs(&self, messages: &[Message]) -> Result<Vec<Array2<f64>>> {
        check_messages(messages, self.message.len())?;
        let rows = vec![self.decoded.clone(); messages.len()];
        Ok(point_mass(
            &rows,
            self.decoded.len(),
            self.grammar.alphabet_size(),
        ))
    }
}

impl LatentPrior for ConstantModel {
    fn bit_probs(&self) -> Vec<f64> {
        self.message.bits().iter().map(|&b| f64::from(b)).collect()
    }
}
