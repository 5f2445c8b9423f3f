//! Generative precision and recall, reconstruction accuracy, residual
//! entropy and a seed-level efficacy summary.

mod entropy;
pub mod synthetic;

pub use entropy::{
    conditional_entropy, residual_entropy, residual_entropy_of_codes, EntropyStrategy,
    ResidualEntropy, EXHAUSTIVE_GUARD, MAX_BLOCK_BITS,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{ConceptString, GrammarSpec};
use crate::model::{
    deterministic_autoencode, hard_decode, kl_factorized_bernoulli, prior_sample, Decoder, Encoder,
    FixedPrior, LatentPrior, Message,
};

pub const DEFAULT_PRECISION_SAMPLES: usize = 10_000;
pub const DEFAULT_EFFICACY_THRESHOLD: f64 = 0.99;
const CHUNK: usize = 2048;

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, std_err, n }
    }
}

/// Fraction of prior samples whose deterministic decode is a member of the
/// language, with its binomial standard error.
pub fn precision_mc<P, D, R>(
    prior: &P,
    listener: &D,
    grammar: &GrammarSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<Estimate>
where
    P: LatentPrior + ?Sized,
    D: Decoder + ?Sized,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "precision needs at least one sample".into(),
        ));
    }
    let fixed = FixedPrior(prior.bit_probs());
    let mut hits = 0usize;
    let mut left = n_samples;
    while left > 0 {
        let b = left.min(CHUNK);
        let messages: Vec<Message> = (0..b).map(|_| prior_sample(&fixed, rng)).collect();
        hits += hard_decode(listener, &messages)?
            .iter()
            .filter(|s| grammar.is_member(s))
            .count();
        left -= b;
    }
    let p = hits as f64 / n_samples as f64;
    Ok(Estimate {
        mean: p,
        std_err: (p * (1.0 - p) / n_samples as f64).sqrt(),
        n: n_samples,
    })
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Per-string log-probability proxy. `k = 1` is the single-sample ELBO with
/// analytic KL; `k > 1` is the importance-weighted bound
/// `log (1/k) Σ g(s|z) p(z) / q(z|s)` with `z ~ q(·|s)`.
pub fn log_prob_proxy<E, D, P, R>(
    speaker: &E,
    listener: &D,
    prior: &P,
    grammar: &GrammarSpec,
    strings: &[ConceptString],
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    E: Encoder + ?Sized,
    D: Decoder + ?Sized,
    P: LatentPrior + ?Sized,
    R: Rng + ?Sized,
{
    if k == 0 {
        return Err(Error::InvalidArgument("recall needs k >= 1".into()));
    }
    if let Some(s) = strings.iter().find(|s| !grammar.is_member(s.tokens())) {
        return Err(Error::NotMember {
            tokens: s.tokens().to_vec(),
        });
    }
    let p = prior.bit_probs();
    let l = p.len();
    let p_pairs: Vec<[f64; 2]> = p.iter().map(|&p1| [1.0 - p1, p1]).collect();
    let mut out = Vec::with_capacity(strings.len());
    for chunk in strings.chunks(CHUNK) {
        let q = speaker.encode_probs(chunk)?;
        if q.ncols() != l {
            return Err(Error::InvalidArgument(format!(
                "speaker emits {} bits but the prior has {l}",
                q.ncols()
            )));
        }
        let mut terms = vec![Vec::with_capacity(k); chunk.len()];
        for _ in 0..k {
            let mut messages = Vec::with_capacity(chunk.len());
            let mut log_w = Vec::with_capacity(chunk.len());
            for r in 0..chunk.len() {
                let mut bits = Vec::with_capacity(l);
                let mut lw = 0.0;
                for t in 0..l {
                    let q1 = q[[r, t]];
                    let b = u8::from(rng.random::<f64>() < q1);
                    bits.push(b);
                    if k > 1 {
                        let (qb, pb) = if b == 1 {
                            (q1, p[t])
                        } else {
                            (1.0 - q1, 1.0 - p[t])
                        };
                        lw += ln_or_neg_inf(pb) - qb.ln();
                    }
                }
                messages.push(Message::new(bits)?);
                log_w.push(lw);
            }
            let dists = listener.decode_log_probs(&messages)?;
            for (r, s) in chunk.iter().enumerate() {
                let recon: f64 = s
                    .tokens()
                    .iter()
                    .enumerate()
                    .map(|(j, &tok)| dists[j][[r, tok as usize]])
                    .sum();
                terms[r].push(recon + log_w[r]);
            }
        }
        for (r, t) in terms.into_iter().enumerate() {
            if k == 1 {
                let q_pairs: Vec<[f64; 2]> = (0..l).map(|i| [1.0 - q[[r, i]], q[[r, i]]]).collect();
                out.push(t[0] - kl_factorized_bernoulli(&q_pairs, &p_pairs)?.nats);
            } else {
                out.push(log_mean_exp(&t));
            }
        }
    }
    Ok(out)
}

/// Mean per-string log-probability proxy over `strings`, in nats.
pub fn recall_mc<E, D, P, R>(
    speaker: &E,
    listener: &D,
    prior: &P,
    grammar: &GrammarSpec,
    strings: &[ConceptString],
    k: usize,
    rng: &mut R,
) -> Result<Estimate>
where
    E: Encoder + ?Sized,
    D: Decoder + ?Sized,
    P: LatentPrior + ?Sized,
    R: Rng + ?Sized,
{
    if strings.is_empty() {
        return Err(Error::InvalidArgument(
            "recall needs at least one string".into(),
        ));
    }
    let values = log_prob_proxy(speaker, listener, prior, grammar, strings, k, rng)?;
    Ok(Estimate::from_values(&values))
}

/// Fraction of `split` reproduced exactly by deterministic autoencoding.
pub fn accuracy<E, D>(speaker: &E, listener: &D, split: &[ConceptString]) -> Result<f64>
where
    E: Encoder + ?Sized,
    D: Decoder + ?Sized,
{
    if split.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty split".into()));
    }
    let out = deterministic_autoencode(speaker, listener, split)?;
    Ok(out.iter().filter(|a| a.exact_match).count() as f64 / split.len() as f64)
}

/// Fraction of seeds whose final train accuracy reaches `threshold`.
pub fn efficacy(final_train_accuracy: &[f64], threshold: f64) -> Result<f64> {
    if final_train_accuracy.is_empty() {
        return Err(Error::InvalidArgument(
            "efficacy needs at least one seed".into(),
        ));
    }
    let ok = final_train_accuracy
        .iter()
        .filter(|&&a| a >= threshold)
        .count();
    Ok(ok as f64 / final_train_accuracy.len() as f64)
}

/// Sample sizes and strategy for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub precision_samples: usize,
    /// Number of uniform strings for recall; the test split when unset.
    pub recall_strings: Option<usize>,
    pub recall_k: usize,
    pub entropy_strategy: EntropyStrategy,
    /// Above this language size residual entropy uses a uniform sample of
    /// `entropy_samples` strings instead of the whole language.
    pub entropy_exhaustive_language: u64,
    pub entropy_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            precision_samples: DEFAULT_PRECISION_SAMPLES,
            recall_strings: None,
            recall_k: 1,
            entropy_strategy: EntropyStrategy::Greedy,
            entropy_exhaustive_language: 100_000,
            entropy_samples: 10_000,
        }
    }
}

/// Every metric for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub precision_std_err: f64,
    pub recall: f64,
    pub recall_std_err: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub residual_entropy: f64,
    /// Concept index assigned to each message bit.
    pub partition: Vec<usize>,
    pub precision_samples: usize,
    pub recall_strings: usize,
    pub recall_k: usize,
    pub entropy_strings: usize,
}

/// Strings used for residual entropy: the whole language when small enough,
/// otherwise a uniform sample.
pub fn entropy_eval_strings<R: Rng + ?Sized>(
    grammar: &GrammarSpec,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<Vec<ConceptString>> {
    let size = grammar.language_size()?;
    if size <= cfg.entropy_exhaustive_language {
        Ok(grammar.enumerate(size)?.collect())
    } else {
        Ok((0..cfg.entropy_samples)
            .map(|_| grammar.sample_string(rng))
            .collect())
    }
}

/// Computes a [`MetricsReport`] for a model playing all three roles.
pub fn evaluate<M, R>(
    model: &M,
    grammar: &GrammarSpec,
    train: &[ConceptString],
    val: &[ConceptString],
    test: &[ConceptString],
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<MetricsReport>
where
    M: Encoder + Decoder + LatentPrior + ?Sized,
    R: Rng + ?Sized,
{
    let precision = precision_mc(model, model, grammar, cfg.precision_samples, rng)?;
    let uniform;
    let recall_set: &[ConceptString] = match cfg.recall_strings {
        Some(m) => {
            uniform = (0..m)
                .map(|_| grammar.sample_string(rng))
                .collect::<Vec<_>>();
            &uniform
        }
        None if !test.is_empty() => test,
        None => train,
    };
    let recall = recall_mc(model, model, model, grammar, recall_set, cfg.recall_k, rng)?;
    let acc = |split: &[ConceptString]| -> Result<Option<f64>> {
        if split.is_empty() {
            Ok(None)
        } else {
            accuracy(model, model, split).map(Some)
        }
    };
    let entropy_strings = entropy_eval_strings(grammar, cfg, rng)?;
    let re = residual_entropy(model, grammar, &entropy_strings, cfg.entropy_strategy)?;
    Ok(MetricsReport {
        precision: precision.mean,
        precision_std_err: precision.std_err,
        recall: recall.mean,
        recall_std_err: recall.std_err,
        train_accuracy: accuracy(model, model, train)?,
        val_accuracy: acc(val)?,
        test_accuracy: acc(test)?,
        residual_entropy: re.value,
        partition: re.partition,
        precision_samples: precision.n,
        recall_strings: recall.n,
        recall_k: cfg.recall_k,
        entropy_strings: entropy_strings.len(),
    })
}
