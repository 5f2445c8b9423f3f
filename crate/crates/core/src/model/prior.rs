use rand::Rng;

use super::{LatentPrior, Message};
use crate::error::{Error, Result};

/// Prior probabilities below this are clamped before taking logarithms.
pub const KL_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub nats: f64,
    /// Number of prior probabilities that were clamped.
    pub clamped: usize,
}

/// `Σ_t Σ_v q_t(v) ln(q_t(v) / p_t(v))` for factorized Bernoulli pairs.
///
/// Terms with `q_t(v) = 0` contribute nothing; prior probabilities under
/// [`KL_CLAMP`] are raised to it and counted.
pub fn kl_factorized_bernoulli(q: &[[f64; 2]], p: &[[f64; 2]]) -> Result<KlValue> {
    if q.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "posterior has {} bits, prior has {}",
            q.len(),
            p.len()
        )));
    }
    let valid = |x: f64| (0.0..=1.0).contains(&x);
    let mut nats = 0.0;
    let mut clamped = 0;
    for (qt, pt) in q.iter().zip(p) {
        for v in 0..2 {
            if !valid(qt[v]) || !valid(pt[v]) {
                return Err(Error::InvalidArgument(format!(
                    "probabilities out of range: q={qt:?} p={pt:?}"
                )));
            }
            if qt[v] == 0.0 {
                continue;
            }
            let pv = if pt[v] < KL_CLAMP {
                clamped += 1;
                KL_CLAMP
            } else {
                pt[v]
            };
            nats += qt[v] * (qt[v].ln() - pv.ln());
        }
    }
    if clamped > 0 {
        log::warn!("kl_factorized_bernoulli clamped {clamped} prior probabilities");
    }
    Ok(KlValue {
        nats: nats.max(0.0),
        clamped,
    })
}

/// Ancestral sample: each bit independently.
pub fn prior_sample<P: LatentPrior + ?Sized, R: Rng + ?Sized>(prior: &P, rng: &mut R) -> Message {
    let bits = prior
        .bit_probs()
        .iter()
        .map(|&p| u8::from(rng.random::<f64>() < p))
        .collect();
    Message::new(bits).expect("bits are binary")
}

/// `Σ_t ln p_t(z_t)`.
pub fn prior_logprob<P: LatentPrior + ?Sized>(prior: &P, z: &Message) -> Result<f64> {
    let probs = prior.bit_probs();
    if probs.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "message has {} bits, prior has {}",
            z.len(),
            probs.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(z.bits())
        .map(|(&p, &b)| if b == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum())
}
