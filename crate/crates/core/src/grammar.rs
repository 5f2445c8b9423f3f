//! The compositional language family parameterised by the number of concepts
//! and the number of values per concept.
//!
//! Concept `j` (0-indexed) owns the contiguous token range `[j*V, (j+1)*V)`.
//! A string is a member of the language exactly when it has one token per
//! concept, each drawn from its own range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub num_concepts: usize,
    pub values_per_concept: usize,
}

/// A member of the language: one token per concept position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptString {
    tokens: Vec<u32>,
}

impl ConceptString {
    /// Validates `tokens` against `spec`.
    pub fn new(spec: &GrammarSpec, tokens: Vec<u32>) -> Result<Self> {
        if spec.is_member(&tokens) {
            Ok(ConceptString { tokens })
        } else {
            Err(Error::NotMember { tokens })
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl GrammarSpec {
    pub fn new(num_concepts: usize, values_per_concept: usize) -> Result<Self> {
        let spec = GrammarSpec {
            num_concepts,
            values_per_concept,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 1 {
            return Err(Error::InvalidGrammar("num_concepts must be >= 1".into()));
        }
        if self.values_per_concept < 2 {
            return Err(Error::InvalidGrammar(
                "values_per_concept must be >= 2".into(),
            ));
        }
        if self
            .num_concepts
            .checked_mul(self.values_per_concept)
            .is_none_or(|n| n > u32::MAX as usize)
        {
            return Err(Error::InvalidGrammar("alphabet does not fit in u32".into()));
        }
        Ok(())
    }

    /// |Σ| = N × V.
    pub fn alphabet_size(&self) -> usize {
        self.num_concepts * self.values_per_concept
    }

    /// |P| = N × V + 1 (one rule per terminal plus the start rule).
    pub fn production_count(&self) -> usize {
        self.num_concepts * self.values_per_concept + 1
    }

    /// |P| + |N|: production rules plus intermediate symbols.
    pub fn description_length(&self) -> usize {
        self.production_count() + self.num_concepts
    }

    /// Every string has exactly one token per concept.
    pub fn max_string_length(&self) -> usize {
        self.num_concepts
    }

    /// V^N, or an overflow error beyond `u64`.
    pub fn language_size(&self) -> Result<u64> {
        let base = self.values_per_concept as u64;
        let mut size: u64 = 1;
        for _ in 0..self.num_concepts {
            size = size.checked_mul(base).ok_or_else(|| {
                Error::Overflow(format!(
                    "{}^{} does not fit in 64 bits",
                    self.values_per_concept, self.num_concepts
                ))
            })?;
        }
        Ok(size)
    }

    /// ⌈log₂ V^N⌉: the fewest latent bits that can index every string.
    pub fn min_channel_bits(&self) -> Result<u32> {
        let size = self.language_size()?;
        Ok(ceil_log2(size))
    }

    /// Grammar description is smaller than the language: |L| > |P| + |N|.
    pub fn is_compositional(&self) -> bool {
        match self.language_size() {
            Ok(size) => size as u128 > self.description_length() as u128,
            // Anything larger than u64 is certainly larger than the rule count.
            Err(_) => true,
        }
    }

    /// Token range `[lo, hi)` owned by concept `position`.
    pub fn position_range(&self, position: usize) -> (u32, u32) {
        let v = self.values_per_concept as u32;
        let lo = position as u32 * v;
        (lo, lo + v)
    }

    pub fn is_member(&self, tokens: &[u32]) -> bool {
        tokens.len() == self.num_concepts
            && tokens.iter().enumerate().all(|(j, &t)| {
                let (lo, hi) = self.position_range(j);
                (lo..hi).contains(&t)
            })
    }

    /// Draws every concept value i.i.d. uniformly, which is the distribution
    /// induced by uniformly choosing among applicable production rules.
    pub fn sample_string<R: Rng + ?Sized>(&self, rng: &mut R) -> ConceptString {
        let v = self.values_per_concept as u32;
        let tokens = (0..self.num_concepts)
            .map(|j| j as u32 * v + rng.random_range(0..v))
            .collect();
        ConceptString { tokens }
    }

    /// Per-concept values `token_j - j*V`.
    pub fn concepts_of(&self, s: &ConceptString) -> Result<Vec<u32>> {
        self.concepts_of_tokens(s.tokens())
    }

    pub fn concepts_of_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        if !self.is_member(tokens) {
            return Err(Error::NotMember {
                tokens: tokens.to_vec(),
            });
        }
        let v = self.values_per_concept as u32;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| t - j as u32 * v)
            .collect())
    }

    /// Inverse of [`GrammarSpec::concepts_of`].
    pub fn tokens_of(&self, values: &[u32]) -> Result<ConceptString> {
        if values.len() != self.num_concepts {
            return Err(Error::InvalidArgument(format!(
                "expected {} concept values, got {}",
                self.num_concepts,
                values.len()
            )));
        }
        let v = self.values_per_concept as u32;
        let tokens = values
            .iter()
            .enumerate()
            .map(|(j, &x)| j as u32 * v + x)
            .collect();
        ConceptString::new(self, tokens)
    }

    /// All members in lexicographic concept order, refusing languages larger
    /// than `cap`.
    pub fn enumerate(&self, cap: u64) -> Result<Enumerate> {
        let size = self.language_size()?;
        if size > cap {
            return Err(Error::TooLarge {
                size: size as u128,
                cap: cap as u128,
            });
        }
        Ok(Enumerate {
            spec: *self,
            next: Some(vec![0; self.num_concepts]),
        })
    }
}

/// Iterator over a language in lexicographic order of concept values.
#[derive(Debug, Clone)]
pub struct Enumerate {
    spec: GrammarSpec,
    next: Option<Vec<u32>>,
}

impl Iterator for Enumerate {
    type Item = ConceptString;

    fn next(&mut self) -> Option<ConceptString> {
        let values = self.next.take()?;
        let v = self.spec.values_per_concept as u32;
        let tokens = values
            .iter()
            .enumerate()
            .map(|(j, &x)| j as u32 * v + x)
            .collect();

        let mut succ = values;
        let mut carry = true;
        for x in succ.iter_mut().rev() {
            *x += 1;
            if *x < v {
                carry = false;
                break;
            }
            *x = 0;
        }
        if !carry {
            self.next = Some(succ);
        }
        Some(ConceptString { tokens })
    }
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn spec(n: usize, v: usize) -> GrammarSpec {
        GrammarSpec::new(n, v).unwrap()
    }

    #[test]
    fn full_grammar_accounting() {
        let g = spec(6, 10);
        assert_eq!(g.alphabet_size(), 60);
        assert_eq!(g.production_count(), 61);
        assert_eq!(g.description_length(), 67);
        assert_eq!(g.language_size().unwrap(), 1_000_000);
        assert_eq!(g.min_channel_bits().unwrap(), 20);
        assert!(g.is_compositional());

        let g4 = spec(4, 10);
        assert_eq!(g4.language_size().unwrap(), 10_000);
        assert_eq!(g4.min_channel_bits().unwrap(), 14);

        let g1 = spec(1, 2);
        assert_eq!(g1.language_size().unwrap(), 2);
        assert_eq!(g1.min_channel_bits().unwrap(), 1);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(GrammarSpec::new(0, 10).is_err());
        assert!(GrammarSpec::new(3, 1).is_err());
    }

    #[test]
    fn language_size_overflow_is_an_error() {
        let g = spec(64, 2);
        assert!(matches!(g.language_size(), Err(Error::Overflow(_))));
        assert_eq!(spec(63, 2).language_size().unwrap(), 1 << 63);
        assert_eq!(spec(63, 2).min_channel_bits().unwrap(), 63);
    }

    #[test]
    fn membership_examples() {
        let g = spec(6, 10);
        assert!(g.is_member(&[2, 11, 24, 31, 44, 56]));
        assert!(!g.is_member(&[2, 5, 24, 31, 44, 56]));
        assert!(!g.is_member(&[2, 11, 24, 31, 44]));
        assert!(!g.is_member(&[]));
        assert!(!g.is_member(&[2, 11, 24, 31, 44, 56, 0]));
        assert!(!g.is_member(&[2, 11, 24, 31, 44, 60]));
    }

    #[test]
    fn membership_exhaustive_small_grammar() {
        // spec(2,3): alphabet [0,6); members are {0,1,2} x {3,4,5}.
        let g = spec(2, 3);
        let mut members = 0;
        for a in 0..6u32 {
            for b in 0..6u32 {
                let expected = a < 3 && (3..6).contains(&b);
                assert_eq!(g.is_member(&[a, b]), expected, "({a},{b})");
                members += expected as usize;
            }
        }
        assert_eq!(members, 9);
        // 27 sequences with a token in its own position's complement range.
        let misplaced = (0..6u32)
            .flat_map(|a| (0..6u32).map(move |b| (a, b)))
            .filter(|&(a, b)| a >= 3 || b < 3)
            .count();
        assert_eq!(misplaced, 27);
    }

    #[test]
    fn concepts_of_examples() {
        let g = spec(6, 10);
        let s = ConceptString::new(&g, vec![2, 11, 24, 31, 44, 56]).unwrap();
        assert_eq!(g.concepts_of(&s).unwrap(), vec![2, 1, 4, 1, 4, 6]);
        let s0 = ConceptString::new(&g, vec![0, 10, 20, 30, 40, 50]).unwrap();
        assert_eq!(g.concepts_of(&s0).unwrap(), vec![0; 6]);
        assert!(g.concepts_of_tokens(&[2, 5, 24, 31, 44, 56]).is_err());
    }

    #[test]
    fn concepts_round_trip_exhaustive() {
        let g = spec(2, 4);
        for s in g.enumerate(1 << 20).unwrap() {
            let values = g.concepts_of(&s).unwrap();
            assert_eq!(g.tokens_of(&values).unwrap(), s);
        }
    }

    #[test]
    fn enumerate_order_and_count() {
        let g = spec(2, 2);
        let all: Vec<Vec<u32>> = g
            .enumerate(100)
            .unwrap()
            .map(|s| s.tokens().to_vec())
            .collect();
        assert_eq!(all, vec![vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3]]);

        let g3 = spec(3, 4);
        let set: HashSet<ConceptString> = g3.enumerate(1000).unwrap().collect();
        assert_eq!(set.len(), 64);
        assert!(set.iter().all(|s| g3.is_member(s.tokens())));
    }

    #[test]
    fn enumerate_refuses_large_languages() {
        let g = spec(6, 10);
        match g.enumerate(1000) {
            Err(Error::TooLarge { size, cap }) => {
                assert_eq!(size, 1_000_000);
                assert_eq!(cap, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enumerate_matches_brute_force_membership() {
        // Enumerated set equals the members among all |Σ|^N sequences.
        let g = spec(3, 3);
        let enumerated: HashSet<Vec<u32>> = g
            .enumerate(1000)
            .unwrap()
            .map(|s| s.tokens().to_vec())
            .collect();
        let sigma = g.alphabet_size() as u32;
        let mut brute = HashSet::new();
        for a in 0..sigma {
            for b in 0..sigma {
                for c in 0..sigma {
                    if g.is_member(&[a, b, c]) {
                        brute.insert(vec![a, b, c]);
                    }
                }
            }
        }
        assert_eq!(enumerated, brute);
    }

    #[test]
    fn sampled_strings_are_members() {
        let g = spec(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let s = g.sample_string(&mut rng);
            assert_eq!(s.len(), 6);
            for (j, &t) in s.tokens().iter().enumerate() {
                assert!((10 * j as u32..10 * j as u32 + 10).contains(&t));
            }
        }
    }

    #[test]
    fn binary_grammar_sampling_is_fair() {
        let g = spec(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| g.sample_string(&mut rng).tokens()[0] == 1)
            .count();
        let p = ones as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn sampled_concepts_are_uniform_and_independent() {
        // Chi-square on the joint table of concepts 0 and 1 for spec(3,4):
        // 16 cells, 15 degrees of freedom; 99.9% quantile is 37.7.
        let g = spec(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 32_000;
        let mut table = [[0usize; 4]; 4];
        for _ in 0..n {
            let v = g.concepts_of(&g.sample_string(&mut rng)).unwrap();
            table[v[0] as usize][v[1] as usize] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = table
            .iter()
            .flatten()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(64), 6);
        assert_eq!(ceil_log2(65), 7);
        assert_eq!(ceil_log2(1_000_000), 20);
    }
}
