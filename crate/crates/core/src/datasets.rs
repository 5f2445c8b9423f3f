//! Train/validation/test splits with held-out concept-value pairs.
//!
//! Validation strings all share one fixed pair of concept values and test
//! strings share another; neither combination ever appears in training, so
//! both held-out sets probe systematic generalisation.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{ConceptString, GrammarSpec};

/// Largest language `build_splits` will enumerate.
pub const ENUMERATION_CAP: u64 = 10_000_000;

pub const DEFAULT_MAX_TRAIN: usize = 100_000;
pub const DEFAULT_MAX_HELD_OUT: usize = 10_000;

/// Two `(position, value)` constraints; a string matches when both hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeldOutPair(pub (usize, u32), pub (usize, u32));

impl HeldOutPair {
    pub fn matches(&self, values: &[u32]) -> bool {
        let HeldOutPair((i1, a1), (i2, a2)) = *self;
        values.get(i1) == Some(&a1) && values.get(i2) == Some(&a2)
    }

    fn validate(&self, grammar: &GrammarSpec, label: &str) -> Result<()> {
        let HeldOutPair((i1, a1), (i2, a2)) = *self;
        if i1 >= i2 {
            return Err(Error::InfeasibleSplit(format!(
                "{label} positions must satisfy i1 < i2, got ({i1}, {i2})"
            )));
        }
        if i2 >= grammar.num_concepts {
            return Err(Error::InfeasibleSplit(format!(
                "{label} position {i2} out of range for {} concepts",
                grammar.num_concepts
            )));
        }
        let v = grammar.values_per_concept as u32;
        if a1 >= v || a2 >= v {
            return Err(Error::InfeasibleSplit(format!(
                "{label} values ({a1}, {a2}) out of range for {v} values per concept"
            )));
        }
        Ok(())
    }

    pub fn to_text(self) -> String {
        let HeldOutPair((i1, a1), (i2, a2)) = self;
        format!("{i1}:{a1},{i2}:{a2}")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad held-out pair {s:?}"));
        let mut parts = s.split(',').map(|p| {
            let (pos, val) = p.trim().split_once(':').ok_or_else(bad)?;
            Ok::<_, Error>((
                pos.parse::<usize>().map_err(|_| bad())?,
                val.parse::<u32>().map_err(|_| bad())?,
            ))
        });
        let first = parts.next().ok_or_else(bad)??;
        let second = parts.next().ok_or_else(bad)??;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(HeldOutPair(first, second))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_pair: HeldOutPair,
    pub test_pair: HeldOutPair,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Candidate-set sizes before subsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Held-out positions (0, 1) with values drawn from `rng`, and sizes
    /// capped at 10⁵ train / 10⁴ held-out strings.
    pub fn with_defaults<R: Rng + ?Sized>(
        grammar: &GrammarSpec,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        if grammar.num_concepts < 2 {
            return Err(Error::InfeasibleSplit(
                "held-out pairs need at least two concepts".into(),
            ));
        }
        let v = grammar.values_per_concept as u32;
        let val_pair = HeldOutPair((0, rng.random_range(0..v)), (1, rng.random_range(0..v)));
        let test_pair = loop {
            let candidate = HeldOutPair((0, rng.random_range(0..v)), (1, rng.random_range(0..v)));
            if candidate != val_pair {
                break candidate;
            }
        };
        let mut spec = SplitSpec {
            val_pair,
            test_pair,
            n_train: 1,
            n_val: 1,
            n_test: 1,
            seed,
        };
        let counts = spec.candidate_counts(grammar)?;
        spec.n_train = counts.train.min(DEFAULT_MAX_TRAIN);
        spec.n_val = counts.val.min(DEFAULT_MAX_HELD_OUT);
        spec.n_test = counts.test.min(DEFAULT_MAX_HELD_OUT);
        Ok(spec)
    }

    pub fn validate(&self, grammar: &GrammarSpec) -> Result<()> {
        self.val_pair.validate(grammar, "val_pair")?;
        self.test_pair.validate(grammar, "test_pair")?;
        if self.val_pair == self.test_pair {
            return Err(Error::InfeasibleSplit(
                "val_pair and test_pair must differ".into(),
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InfeasibleSplit("split sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Counts |S_train|, |S_val|, |S_test| by enumeration.
    pub fn candidate_counts(&self, grammar: &GrammarSpec) -> Result<CandidateCounts> {
        let mut counts = CandidateCounts {
            train: 0,
            val: 0,
            test: 0,
        };
        for s in grammar.enumerate(ENUMERATION_CAP)? {
            match self.classify(grammar, &s) {
                Class::Train => counts.train += 1,
                Class::Val => counts.val += 1,
                Class::Test => counts.test += 1,
            }
        }
        Ok(counts)
    }

    fn classify(&self, grammar: &GrammarSpec, s: &ConceptString) -> Class {
        let values = grammar
            .concepts_of(s)
            .expect("enumerated strings are members");
        // A string matching both pairs belongs to validation.
        if self.val_pair.matches(&values) {
            Class::Val
        } else if self.test_pair.matches(&values) {
            Class::Test
        } else {
            Class::Train
        }
    }
}

enum Class {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    pub grammar: GrammarSpec,
    pub split: SplitSpec,
    pub train: Vec<ConceptString>,
    pub val: Vec<ConceptString>,
    pub test: Vec<ConceptString>,
}

/// `n` distinct items chosen uniformly without replacement, in random order.
pub fn subsample<T: Clone, R: Rng + ?Sized>(items: &[T], n: usize, rng: &mut R) -> Result<Vec<T>> {
    if n > items.len() {
        return Err(Error::InfeasibleSplit(format!(
            "cannot draw {n} items from {}",
            items.len()
        )));
    }
    Ok(index::sample(rng, items.len(), n)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Builds the three splits. Subsampling draws train, then val, then test
/// from `rng`.
pub fn build_splits<R: Rng + ?Sized>(
    grammar: &GrammarSpec,
    split: &SplitSpec,
    rng: &mut R,
) -> Result<DatasetBundle> {
    grammar.validate()?;
    split.validate(grammar)?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in grammar.enumerate(ENUMERATION_CAP)? {
        match split.classify(grammar, &s) {
            Class::Train => train.push(s),
            Class::Val => val.push(s),
            Class::Test => test.push(s),
        }
    }

    let check = |name: &str, want: usize, have: usize| {
        if want > have {
            Err(Error::InfeasibleSplit(format!(
                "requested {want} {name} strings but only {have} available \
                 (available: train {}, val {}, test {})",
                train.len(),
                val.len(),
                test.len()
            )))
        } else {
            Ok(())
        }
    };
    check("train", split.n_train, train.len())?;
    check("val", split.n_val, val.len())?;
    check("test", split.n_test, test.len())?;

    let train = subsample(&train, split.n_train, rng)?;
    let val = subsample(&val, split.n_val, rng)?;
    let test = subsample(&test, split.n_test, rng)?;
    Ok(DatasetBundle {
        grammar: *grammar,
        split: split.clone(),
        train,
        val,
        test,
    })
}

const FORMAT_LINE: &str = "# compvae dataset v1";

impl DatasetBundle {
    /// Checks every bundle invariant; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        use std::collections::HashSet;
        let g = &self.grammar;
        let values = |s: &ConceptString| g.concepts_of(s);
        // Every split keeps its requested size.
        for (name, part, n) in [
            ("train", &self.train, self.split.n_train),
            ("val", &self.val, self.split.n_val),
            ("test", &self.test, self.split.n_test),
        ] {
            if part.len() != n {
                return Err(Error::InfeasibleSplit(format!(
                    "{name} has {} strings, header says {n}",
                    part.len()
                )));
            }
            let unique: HashSet<_> = part.iter().collect();
            if unique.len() != part.len() {
                return Err(Error::InfeasibleSplit(format!("{name} has duplicates")));
            }
        }
        for s in &self.train {
            let v = values(s)?;
            if self.split.val_pair.matches(&v) || self.split.test_pair.matches(&v) {
                return Err(Error::InfeasibleSplit(format!(
                    "train string {:?} matches a held-out pair",
                    s.tokens()
                )));
            }
        }
        let val_set: HashSet<_> = self.val.iter().collect();
        for s in &self.val {
            if !self.split.val_pair.matches(&values(s)?) {
                return Err(Error::InfeasibleSplit(format!(
                    "val string {:?} misses the val pair",
                    s.tokens()
                )));
            }
        }
        for s in &self.test {
            if !self.split.test_pair.matches(&values(s)?) || val_set.contains(s) {
                return Err(Error::InfeasibleSplit(format!(
                    "test string {:?} misses the test pair or overlaps val",
                    s.tokens()
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let g = &self.grammar;
        let sp = &self.split;
        let _ = writeln!(out, "{FORMAT_LINE}");
        let _ = writeln!(out, "# num_concepts = {}", g.num_concepts);
        let _ = writeln!(out, "# values_per_concept = {}", g.values_per_concept);
        let _ = writeln!(out, "# val_pair = {}", sp.val_pair.to_text());
        let _ = writeln!(out, "# test_pair = {}", sp.test_pair.to_text());
        let _ = writeln!(out, "# n_train = {}", sp.n_train);
        let _ = writeln!(out, "# n_val = {}", sp.n_val);
        let _ = writeln!(out, "# n_test = {}", sp.n_test);
        let _ = writeln!(out, "# seed = {}", sp.seed);
        for (name, part) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            let _ = writeln!(out, "[{name}]");
            for s in part {
                let line: Vec<String> = s.tokens().iter().map(u32::to_string).collect();
                let _ = writeln!(out, "{}", line.join(","));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for line in BufReader::new(f).lines() {
            lines.push(line.map_err(|e| Error::io(path, e))?);
        }
        Self::parse(&lines.join("\n"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("dataset file: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_LINE) {
            return Err(bad("missing format line".into()));
        }
        let mut header = std::collections::HashMap::new();
        let mut section: Option<usize> = None;
        let mut parts: [Vec<Vec<u32>>; 3] = Default::default();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
                header.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            match line {
                "[train]" => section = Some(0),
                "[val]" => section = Some(1),
                "[test]" => section = Some(2),
                _ => {
                    let idx = section.ok_or_else(|| bad("string before section".into()))?;
                    let tokens = line
                        .split(',')
                        .map(|t| t.trim().parse::<u32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad token line {line:?}")))?;
                    parts[idx].push(tokens);
                }
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| bad(format!("missing header {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse::<u64>()
                .map_err(|_| bad(format!("bad number for {k}")))
        };
        let grammar = GrammarSpec::new(
            num("num_concepts")? as usize,
            num("values_per_concept")? as usize,
        )?;
        let split = SplitSpec {
            val_pair: HeldOutPair::from_text(get("val_pair")?)?,
            test_pair: HeldOutPair::from_text(get("test_pair")?)?,
            n_train: num("n_train")? as usize,
            n_val: num("n_val")? as usize,
            n_test: num("n_test")? as usize,
            seed: num("seed")?,
        };
        let [train, val, test] = parts;
        let convert = |v: Vec<Vec<u32>>| {
            v.into_iter()
                .map(|t| ConceptString::new(&grammar, t))
                .collect::<Result<Vec<_>>>()
        };
        let bundle = DatasetBundle {
            grammar,
            split,
            train: convert(train)?,
            val: convert(val)?,
            test: convert(test)?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn g34() -> GrammarSpec {
        GrammarSpec::new(3, 4).unwrap()
    }

    fn split34(n_train: usize, n_val: usize, n_test: usize) -> SplitSpec {
        SplitSpec {
            val_pair: HeldOutPair((0, 1), (1, 2)),
            test_pair: HeldOutPair((1, 3), (2, 0)),
            n_train,
            n_val,
            n_test,
            seed: 5,
        }
    }

    #[test]
    fn val_strings_match_the_val_pair() {
        let g = g34();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_splits(&g, &split34(10, 4, 3), &mut rng).unwrap();
        assert_eq!(b.val.len(), 4);
        for s in &b.val {
            let v = g.concepts_of(s).unwrap();
            assert_eq!((v[0], v[1]), (1, 2));
        }
        b.validate().unwrap();
    }

    #[test]
    fn full_grammar_held_out_candidates() {
        let g = GrammarSpec::new(6, 10).unwrap();
        let split = SplitSpec {
            val_pair: HeldOutPair((0, 3), (1, 7)),
            test_pair: HeldOutPair((0, 5), (1, 1)),
            n_train: 1,
            n_val: 1,
            n_test: 1,
            seed: 0,
        };
        let c = split.candidate_counts(&g).unwrap();
        assert_eq!(c.val, 10_000);
        assert_eq!(c.test, 10_000);
        assert_eq!(c.train, 1_000_000 - 20_000);
    }

    #[test]
    fn exhaustive_partition_against_brute_force() {
        // Overlapping pairs: a string can match both, which must land in val.
        let g = g34();
        let split = split34(1, 1, 1);
        let all: Vec<ConceptString> = g.enumerate(64).unwrap().collect();
        let mut val = HashSet::new();
        let mut test = HashSet::new();
        let mut train = HashSet::new();
        for s in &all {
            let v = g.concepts_of(s).unwrap();
            let mv = v[0] == 1 && v[1] == 2;
            let mt = v[1] == 3 && v[2] == 0;
            if mv {
                val.insert(s.clone());
            } else if mt {
                test.insert(s.clone());
            } else {
                train.insert(s.clone());
            }
        }
        // |S_val| = 4, |S_test| = 4 - overlap; here the pairs disagree on
        // concept 1 so nothing overlaps.
        assert_eq!(val.len(), 4);
        assert_eq!(test.len(), 4);
        assert_eq!(train.len(), 64 - 4 - 4);
        let c = split.candidate_counts(&g).unwrap();
        assert_eq!((c.train, c.val, c.test), (56, 4, 4));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_splits(&g, &split34(56, 4, 4), &mut rng).unwrap();
        assert_eq!(b.train.iter().cloned().collect::<HashSet<_>>(), train);
        assert_eq!(b.val.iter().cloned().collect::<HashSet<_>>(), val);
        assert_eq!(b.test.iter().cloned().collect::<HashSet<_>>(), test);
    }

    #[test]
    fn overlapping_pairs_assign_to_val() {
        let g = g34();
        let split = SplitSpec {
            val_pair: HeldOutPair((0, 1), (1, 2)),
            test_pair: HeldOutPair((0, 1), (2, 3)),
            n_train: 1,
            n_val: 1,
            n_test: 1,
            seed: 0,
        };
        // (1,2,3) matches both pairs.
        let c = split.candidate_counts(&g).unwrap();
        assert_eq!(c.val, 4);
        assert_eq!(c.test, 3);
        assert_eq!(c.train, 64 - 7);
    }

    #[test]
    fn infeasible_and_invalid_splits() {
        let g = g34();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_splits(&g, &split34(10, 5, 1), &mut rng).unwrap_err();
        assert!(err.to_string().contains("only 4 available"), "{err}");
        let mut same = split34(1, 1, 1);
        same.test_pair = same.val_pair;
        assert!(build_splits(&g, &same, &mut rng).is_err());
        let mut bad_pos = split34(1, 1, 1);
        bad_pos.val_pair = HeldOutPair((1, 0), (1, 2));
        assert!(build_splits(&g, &bad_pos, &mut rng).is_err());
        assert!(build_splits(&g, &split34(0, 1, 1), &mut rng).is_err());
    }

    #[test]
    fn defaults_fill_sizes_from_candidates() {
        let g = g34();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = SplitSpec::with_defaults(&g, 9, &mut rng).unwrap();
        assert_eq!(s.val_pair.0 .0, 0);
        assert_eq!(s.val_pair.1 .0, 1);
        assert_ne!(s.val_pair, s.test_pair);
        assert_eq!((s.n_train, s.n_val, s.n_test), (56, 4, 4));
    }

    #[test]
    fn builds_are_deterministic_and_round_trip() {
        let g = g34();
        let split = split34(30, 4, 4);
        let a = build_splits(&g, &split, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build_splits(&g, &split, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let parsed = DatasetBundle::parse(&a.to_text()).unwrap();
        assert_eq!(parsed, a);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        a.write(&path).unwrap();
        assert_eq!(DatasetBundle::read(&path).unwrap(), a);
    }

    #[test]
    fn parse_rejects_corrupted_bundles() {
        let g = g34();
        let a = build_splits(&g, &split34(30, 4, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // Move a val string into train.
        let text = a.to_text();
        let val_line = a.val[0]
            .tokens()
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let corrupted = text.replacen("[train]\n", &format!("[train]\n{val_line}\n"), 1);
        assert!(DatasetBundle::parse(&corrupted).is_err());
        assert!(DatasetBundle::parse("not a dataset").is_err());
    }

    #[test]
    fn subsample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample(&["x"], 1, &mut rng).unwrap(), vec!["x"]);
        let items: Vec<u32> = (0..64).collect();
        let mut perm = subsample(&items, 64, &mut rng).unwrap();
        perm.sort();
        assert_eq!(perm, items);
        assert!(subsample(&items, 65, &mut rng).is_err());
    }

    #[test]
    fn subsample_inclusion_is_uniform() {
        let items: Vec<usize> = (0..20).collect();
        let n = 5;
        let trials = 10_000;
        let mut hits = [0usize; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..trials {
            for i in subsample(&items, n, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let p = n as f64 / items.len() as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!((freq - p).abs() < 3.0 * sigma, "item {i}: {freq}");
        }
    }
}
