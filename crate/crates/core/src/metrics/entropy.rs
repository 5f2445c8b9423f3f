use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{ConceptString, GrammarSpec};
use crate::model::{hard_encode, Encoder, Message};

/// Largest number of bit-to-concept assignments the exhaustive search visits.
pub const EXHAUSTIVE_GUARD: u64 = 10_000_000;
/// Assignments giving any concept more bits than this are skipped by the
/// exhaustive search.
pub const MAX_BLOCK_BITS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyStrategy {
    Exhaustive,
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntropy {
    pub value: f64,
    /// Concept index assigned to each bit.
    pub partition: Vec<usize>,
    /// Normalised `H(C_i | z[p_i]) / H(C_i)` per concept.
    pub per_concept: Vec<f64>,
}

/// Plug-in `H(C | key & mask)` divided by `norm`, accumulated as
/// `Σ (n_bc / n) ln(n_b / n_bc) / norm`. Groups are formed by sorting, so the
/// result does not depend on hashing order.
fn cond_entropy_masked(
    keys: &[u64],
    values: &[u32],
    mask: u64,
    norm: f64,
    scratch: &mut Vec<(u64, u32)>,
) -> f64 {
    scratch.clear();
    scratch.extend(keys.iter().zip(values).map(|(&k, &v)| (k & mask, v)));
    scratch.sort_unstable();
    let n = scratch.len() as f64;
    let mut total = 0.0;
    let mut i = 0;
    while i < scratch.len() {
        let b = scratch[i].0;
        let mut end = i;
        while end < scratch.len() && scratch[end].0 == b {
            end += 1;
        }
        let n_b = (end - i) as f64;
        let mut j = i;
        while j < end {
            let start = j;
            while j < end && scratch[j] == scratch[start] {
                j += 1;
            }
            let n_bc = (j - start) as f64;
            total += n_bc * ((n_b / n_bc).ln() / norm);
        }
        i = end;
    }
    (total / n).max(0.0)
}

fn block_mask(block: &[usize], l: usize) -> Result<u64> {
    let mut mask = 0u64;
    for &t in block {
        if t >= l || t >= 64 {
            return Err(Error::InvalidArgument(format!(
                "bit index {t} outside a {l}-bit message"
            )));
        }
        mask |= 1 << t;
    }
    Ok(mask)
}

/// Plug-in estimate of `H(C | z[block])` in nats.
pub fn conditional_entropy(
    messages: &[Message],
    concept_values: &[u32],
    block: &[usize],
) -> Result<f64> {
    if messages.is_empty() {
        return Err(Error::InvalidArgument(
            "conditional entropy of an empty sample".into(),
        ));
    }
    if messages.len() != concept_values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} messages but {} concept values",
            messages.len(),
            concept_values.len()
        )));
    }
    let l = messages[0].len();
    if messages.iter().any(|m| m.len() != l) {
        return Err(Error::InvalidArgument("messages differ in length".into()));
    }
    let mask = block_mask(block, l)?;
    let keys: Vec<u64> = messages.iter().map(Message::packed).collect();
    Ok(cond_entropy_masked(
        &keys,
        concept_values,
        mask,
        1.0,
        &mut Vec::new(),
    ))
}

struct Table<'a> {
    keys: Vec<u64>,
    values: &'a [Vec<u32>],
    norm: f64,
    memo: HashMap<(usize, u64), f64>,
    scratch: Vec<(u64, u32)>,
}

impl Table<'_> {
    /// Normalised conditional entropy of concept `i` given the bits in `mask`.
    fn term(&mut self, i: usize, mask: u64) -> f64 {
        if self.norm == 0.0 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&(i, mask)) {
            return v;
        }
        let v = cond_entropy_masked(
            &self.keys,
            &self.values[i],
            mask,
            self.norm,
            &mut self.scratch,
        );
        self.memo.insert((i, mask), v);
        v
    }

    fn score(&mut self, masks: &[u64]) -> (f64, Vec<f64>) {
        let per: Vec<f64> = masks
            .iter()
            .enumerate()
            .map(|(i, &m)| self.term(i, m))
            .collect();
        (per.iter().sum::<f64>() / per.len() as f64, per)
    }
}

fn masks_of(partition: &[usize], n: usize) -> Vec<u64> {
    let mut masks = vec![0u64; n];
    for (t, &i) in partition.iter().enumerate() {
        masks[i] |= 1 << t;
    }
    masks
}

/// Residual entropy of a fixed set of codes. `concept_values[i][m]` is the
/// value of concept `i` in string `m`; `values_per_concept` sets the
/// normaliser `ln V`.
pub fn residual_entropy_of_codes(
    messages: &[Message],
    concept_values: &[Vec<u32>],
    values_per_concept: usize,
    strategy: EntropyStrategy,
) -> Result<ResidualEntropy> {
    let n = concept_values.len();
    if messages.is_empty() || n == 0 {
        return Err(Error::InvalidArgument(
            "residual entropy of an empty sample".into(),
        ));
    }
    if concept_values.iter().any(|v| v.len() != messages.len()) {
        return Err(Error::InvalidArgument(
            "concept values and messages differ in count".into(),
        ));
    }
    let l = messages[0].len();
    if l > 64 || messages.iter().any(|m| m.len() != l) {
        return Err(Error::InvalidArgument(
            "messages must share one length of at most 64 bits".into(),
        ));
    }
    let mut table = Table {
        keys: messages.iter().map(Message::packed).collect(),
        values: concept_values,
        norm: (values_per_concept as f64).ln(),
        memo: HashMap::new(),
        scratch: Vec::with_capacity(messages.len()),
    };
    let partition = match strategy {
        EntropyStrategy::Greedy => (0..l)
            .map(|t| {
                let mut best = (0, f64::NEG_INFINITY);
                for i in 0..n {
                    let gain = table.term(i, 0) - table.term(i, 1 << t);
                    if gain > best.1 {
                        best = (i, gain);
                    }
                }
                best.0
            })
            .collect(),
        EntropyStrategy::Exhaustive => {
            let count = (n as u64)
                .checked_pow(l as u32)
                .filter(|&c| c <= EXHAUSTIVE_GUARD);
            let Some(count) = count else {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive search over {n}^{l} partitions exceeds {EXHAUSTIVE_GUARD}; use the greedy strategy"
                )));
            };
            let mut digits = vec![0usize; l];
            let mut best: Option<(f64, Vec<usize>)> = None;
            for _ in 0..count {
                let masks = masks_of(&digits, n);
                if masks
                    .iter()
                    .all(|m| m.count_ones() as usize <= MAX_BLOCK_BITS)
                {
                    let (v, _) = table.score(&masks);
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, digits.clone()));
                    }
                }
                for d in digits.iter_mut() {
                    *d += 1;
                    if *d < n {
                        break;
                    }
                    *d = 0;
                }
            }
            best.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no partition keeps every block within {MAX_BLOCK_BITS} bits"
                ))
            })?
            .1
        }
    };
    let (value, per_concept) = table.score(&masks_of(&partition, n));
    Ok(ResidualEntropy {
        value,
        partition,
        per_concept,
    })
}

/// Residual entropy of a speaker's deterministic codes for `eval_strings`.
pub fn residual_entropy<E: Encoder + ?Sized>(
    speaker: &E,
    grammar: &GrammarSpec,
    eval_strings: &[ConceptString],
    strategy: EntropyStrategy,
) -> Result<ResidualEntropy> {
    let mut values = vec![Vec::with_capacity(eval_strings.len()); grammar.num_concepts];
    for s in eval_strings {
        for (i, v) in grammar.concepts_of(s)?.into_iter().enumerate() {
            values[i].push(v);
        }
    }
    let mut messages = Vec::with_capacity(eval_strings.len());
    for chunk in eval_strings.chunks(2048) {
        messages.extend(hard_encode(speaker, chunk)?);
    }
    residual_entropy_of_codes(&messages, &values, grammar.values_per_concept, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::synthetic::{ConstantModel, PerfectCode};
    use proptest::prelude::*;

    fn msgs(rows: &[&[u8]]) -> Vec<Message> {
        rows.iter()
            .map(|r| Message::new(r.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn empty_block_gives_marginal_entropy() {
        let m = msgs(&[&[0], &[0], &[0], &[0]]);
        let h = conditional_entropy(&m, &[0, 1, 2, 3], &[]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-15);
        assert!(conditional_entropy(&[], &[], &[]).is_err());
        assert!(conditional_entropy(&m, &[0], &[]).is_err());
        assert!(conditional_entropy(&m, &[0, 1, 2, 3], &[1]).is_err());
    }

    #[test]
    fn deterministic_concept_has_zero_entropy() {
        let m = msgs(&[&[0, 0], &[0, 1], &[1, 0], &[1, 1], &[1, 1]]);
        let h = conditional_entropy(&m, &[0, 1, 2, 3, 3], &[0, 1]).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn hand_built_table() {
        // z in {0,1}; C | z=0 ~ {a:2, b:1}, C | z=1 ~ {a:1, b:1, c:2}.
        let m = msgs(&[&[0], &[0], &[0], &[1], &[1], &[1], &[1]]);
        let c = [0, 0, 1, 0, 1, 2, 2];
        let h0 = -(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        let h1 = -(0.25 * 0.25f64.ln() * 2.0 + 0.5 * 0.5f64.ln());
        let want = 3.0 / 7.0 * h0 + 4.0 / 7.0 * h1;
        let got = conditional_entropy(&m, &c, &[0]).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    fn g(n: usize, v: usize) -> GrammarSpec {
        GrammarSpec::new(n, v).unwrap()
    }

    #[test]
    fn perfect_and_constant_codes() {
        let gr = g(3, 4);
        let all: Vec<_> = gr.enumerate(64).unwrap().collect();
        let pc = PerfectCode::new(&gr);
        for strategy in [EntropyStrategy::Exhaustive, EntropyStrategy::Greedy] {
            let re = residual_entropy(&pc, &gr, &all, strategy).unwrap();
            assert_eq!(re.value, 0.0);
            assert_eq!(re.partition, vec![0, 0, 1, 1, 2, 2]);
        }
        let c = ConstantModel::new(&gr, Message::new(vec![1, 0, 1, 1]).unwrap(), vec![0, 4, 8]);
        for strategy in [EntropyStrategy::Exhaustive, EntropyStrategy::Greedy] {
            let re = residual_entropy(&c, &gr, &all, strategy).unwrap();
            assert!((re.value - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exhaustive_guard() {
        let m = vec![Message::zeros(24); 3];
        let vals = vec![vec![0, 1, 2]; 2];
        let err = residual_entropy_of_codes(&m, &vals, 3, EntropyStrategy::Exhaustive).unwrap_err();
        assert!(err.to_string().contains("greedy"));
        assert!(residual_entropy_of_codes(&m, &vals, 3, EntropyStrategy::Greedy).is_ok());
    }

    #[test]
    fn disjoint_support_codes_make_greedy_optimal() {
        // Each concept is a function of its own bits, other bits constant.
        let gr = g(3, 3);
        let mut messages = Vec::new();
        let mut vals = vec![Vec::new(); 3];
        for s in gr.enumerate(27).unwrap() {
            let v = gr.concepts_of(&s).unwrap();
            let bits = vec![
                (v[1] & 1) as u8,
                (v[0] & 1) as u8,
                0,
                (v[2] >> 1) as u8,
                (v[0] >> 1) as u8,
                (v[2] & 1) as u8,
                (v[1] >> 1) as u8,
            ];
            messages.push(Message::new(bits).unwrap());
            for i in 0..3 {
                vals[i].push(v[i]);
            }
        }
        let ex =
            residual_entropy_of_codes(&messages, &vals, 3, EntropyStrategy::Exhaustive).unwrap();
        let gr_ = residual_entropy_of_codes(&messages, &vals, 3, EntropyStrategy::Greedy).unwrap();
        assert_eq!(ex.value, 0.0);
        assert_eq!(ex.value, gr_.value);
        assert_eq!(gr_.partition, vec![1, 0, 0, 2, 0, 2, 1]);
    }

    fn codes() -> impl Strategy<Value = (usize, usize, Vec<Vec<u8>>, Vec<Vec<u32>>)> {
        (1usize..=3, 2usize..=4, 1usize..=6, 4usize..=24).prop_flat_map(|(n, v, l, m)| {
            (
                Just(n),
                Just(v),
                prop::collection::vec(prop::collection::vec(0u8..2, l), m),
                prop::collection::vec(prop::collection::vec(0u32..v as u32, m), n),
            )
        })
    }

    proptest! {
        #[test]
        fn greedy_never_beats_exhaustive((n, v, bits, vals) in codes()) {
            let _ = n;
            let messages: Vec<Message> = bits.into_iter().map(|b| Message::new(b).unwrap()).collect();
            let ex = residual_entropy_of_codes(&messages, &vals, v, EntropyStrategy::Exhaustive).unwrap();
            let gr = residual_entropy_of_codes(&messages, &vals, v, EntropyStrategy::Greedy).unwrap();
            prop_assert!(gr.value >= ex.value);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ex.value));
        }

        #[test]
        fn invariant_under_bit_permutation((_n, v, bits, vals) in codes(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let l = bits[0].len();
            let mut perm: Vec<usize> = (0..l).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a: Vec<Message> = bits.iter().map(|b| Message::new(b.clone()).unwrap()).collect();
            let b: Vec<Message> = bits.iter().map(|b| Message::new(perm.iter().map(|&p| b[p]).collect()).unwrap()).collect();
            let ra = residual_entropy_of_codes(&a, &vals, v, EntropyStrategy::Exhaustive).unwrap();
            let rb = residual_entropy_of_codes(&b, &vals, v, EntropyStrategy::Exhaustive).unwrap();
            prop_assert!((ra.value - rb.value).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_value_relabeling((_n, v, bits, vals) in codes(), shift in 1u32..4) {
            let m: Vec<Message> = bits.into_iter().map(|b| Message::new(b).unwrap()).collect();
            let relabeled: Vec<Vec<u32>> = vals.iter().map(|c| c.iter().map(|x| (x + shift) % v as u32).collect()).collect();
            let ra = residual_entropy_of_codes(&m, &vals, v, EntropyStrategy::Exhaustive).unwrap();
            let rb = residual_entropy_of_codes(&m, &relabeled, v, EntropyStrategy::Exhaustive).unwrap();
            prop_assert!((ra.value - rb.value).abs() < 1e-12);
        }

        #[test]
        fn conditioning_reduces_entropy((_n, _v, bits, vals) in codes(), b1 in prop::collection::vec(0usize..6, 0..4), b2 in prop::collection::vec(0usize..6, 0..4)) {
            let l = bits[0].len();
            let m: Vec<Message> = bits.into_iter().map(|b| Message::new(b).unwrap()).collect();
            let b1: Vec<usize> = b1.into_iter().filter(|&t| t < l).collect();
            let union: Vec<usize> = b1.iter().cloned().chain(b2.into_iter().filter(|&t| t < l)).collect();
            let h1 = conditional_entropy(&m, &vals[0], &b1).unwrap();
            let h12 = conditional_entropy(&m, &vals[0], &union).unwrap();
            prop_assert!(h12 <= h1 + 1e-12);
        }
    }
}
