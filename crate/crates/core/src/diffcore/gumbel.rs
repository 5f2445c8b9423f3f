//! Gumbel-max sampling for factorized binary latents.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on the learned temperature.
pub const TAU_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelMode {
    /// Hard one-hot forward, relaxed backward.
    #[default]
    StraightThrough,
    /// Relaxed sample in both directions (exactly differentiable).
    Relaxed,
}

/// Standard Gumbel(0, 1) noise of the given shape.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        // U in (0, 1): reject the closed endpoint.
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    })
}

/// A straight-through sample: the hard one-hot value and its relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub hard: Array2<f64>,
    pub soft: Array2<f64>,
}

/// Samples one-hot pairs from per-bit class probabilities laid out as
/// columns `(2t, 2t+1)`.
///
/// The hard sample is `one_hot(argmax_j [G_j + ln p_j])`; the soft sample is
/// the pair softmax of the same perturbed logits divided by `tau`.
pub fn gumbel_softmax_st<R: Rng + ?Sized>(
    probs: &Array2<f64>,
    tau: f64,
    rng: &mut R,
) -> Result<GumbelSample> {
    if !probs.ncols().is_multiple_of(2) {
        return Err(Error::Shape {
            op: "gumbel_softmax_st",
            lhs: probs.shape().to_vec(),
            rhs: vec![2],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    for row in probs.as_standard_layout().rows() {
        for pair in row.as_slice().expect("row-major").chunks_exact(2) {
            if !(pair[0] > 0.0 && pair[1] > 0.0) || ((pair[0] + pair[1]) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "class probabilities must be positive and sum to 1, got {pair:?}"
                )));
            }
        }
    }
    let noise = gumbel_noise(rng, probs.nrows(), probs.ncols());
    let perturbed = probs.mapv(f64::ln) + noise;
    let mut hard = Array2::zeros(probs.raw_dim());
    let mut soft = Array2::zeros(probs.raw_dim());
    for r in 0..probs.nrows() {
        for t in 0..probs.ncols() / 2 {
            let (a, b) = (perturbed[[r, 2 * t]], perturbed[[r, 2 * t + 1]]);
            hard[[r, 2 * t + usize::from(b > a)]] = 1.0;
            let m = a.max(b);
            let (ea, eb) = (((a - m) / tau).exp(), ((b - m) / tau).exp());
            soft[[r, 2 * t]] = ea / (ea + eb);
            soft[[r, 2 * t + 1]] = eb / (ea + eb);
        }
    }
    Ok(GumbelSample { hard, soft })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_distribution_picks_the_heavy_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = array![[1.0 - 1e-9, 1e-9]];
        let zeros = (0..10_000)
            .filter(|_| gumbel_softmax_st(&probs, 1.0, &mut rng).unwrap().hard[[0, 0]] == 1.0)
            .count();
        assert!(zeros >= 9_999, "{zeros}");
    }

    #[test]
    fn gumbel_max_sampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = array![[0.3, 0.7]];
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| gumbel_softmax_st(&probs, 1.0, &mut rng).unwrap().hard[[0, 1]] == 1.0)
            .count();
        let freq = ones as f64 / n as f64;
        let sigma = (0.7 * 0.3 / n as f64).sqrt();
        assert!((freq - 0.7).abs() < 3.0 * sigma, "{freq}");
    }

    #[test]
    fn rejects_invalid_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_softmax_st(&array![[0.0, 1.0]], 1.0, &mut rng).is_err());
        assert!(gumbel_softmax_st(&array![[-0.1, 1.1]], 1.0, &mut rng).is_err());
        assert!(gumbel_softmax_st(&array![[0.3, 0.3]], 1.0, &mut rng).is_err());
        assert!(gumbel_softmax_st(&array![[0.5, 0.5]], 0.0, &mut rng).is_err());
        assert!(gumbel_softmax_st(&array![[0.5, 0.5, 0.2]], 1.0, &mut rng).is_err());
    }

    #[test]
    fn low_temperature_relaxation_matches_hard_sample() {
        let probs = array![[0.9f64, 0.1, 0.2, 0.8, 0.45, 0.55]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..500 {
            // Replay the sampler's noise to see the perturbed logits.
            let noise = gumbel_noise(&mut rng.clone(), 1, 6);
            let perturbed = probs.mapv(f64::ln) + &noise;
            let s = gumbel_softmax_st(&probs, 1e-3, &mut rng).unwrap();
            let separated =
                (0..3).all(|t| (perturbed[[0, 2 * t]] - perturbed[[0, 2 * t + 1]]).abs() > 0.02);
            if separated {
                checked += 1;
                let gap = (&s.soft - &s.hard)
                    .mapv(f64::abs)
                    .fold(0.0_f64, |a, &b| a.max(b));
                assert!(gap < 1e-6, "gap {gap}");
            }
        }
        assert!(checked > 100, "{checked}");
    }

    proptest! {
        #[test]
        fn hard_sample_is_one_hot(p in 0.001f64..0.999, tau in 0.1f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = array![[p, 1.0 - p], [1.0 - p, p]];
            let s = gumbel_softmax_st(&probs, tau, &mut rng).unwrap();
            for row in s.hard.rows() {
                for pair in row.as_slice().unwrap().chunks_exact(2) {
                    prop_assert!(pair == [1.0, 0.0] || pair == [0.0, 1.0]);
                }
            }
            for row in s.soft.rows() {
                for pair in row.as_slice().unwrap().chunks_exact(2) {
                    prop_assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
