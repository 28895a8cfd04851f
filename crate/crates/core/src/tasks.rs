//! Seeded generators for small synthetic sequence-classification tasks.
//!
//! Each task isolates one property of a token sequence:
//!
//! * `seq_len_bucket`: which length bucket the sequence falls in.
//! * `word_content`: which of `classes` marker tokens the sequence contains.
//! * `bigram_shift`: whether two adjacent tokens were swapped. Clean
//!   sequences follow a position-anchored grammar: the token at position
//!   `j` has class `j mod 3`, where `class(t) = t mod 3`. A swap moves two
//!   tokens out of their class slots but keeps the bag of tokens.
//! * `token_count_parity`: parity of the number of occurrences of token 0.
//!
//! Generation draws from one ChaCha8 stream seeded by `TaskSpec::seed`, in
//! the order train, valid, test. Within each split, labels are `i mod
//! classes` shuffled, then every example is drawn conditioned on its label.
//! Sequences are unique across all three splits.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of token classes in the `bigram_shift` grammar.
pub const BIGRAM_CYCLE: usize = 3;

const MAX_DRAWS_PER_EXAMPLE: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SeqLenBucket,
    WordContent,
    BigramShift,
    TokenCountParity,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SeqLenBucket => "seq_len_bucket",
            TaskKind::WordContent => "word_content",
            TaskKind::BigramShift => "bigram_shift",
            TaskKind::TokenCountParity => "token_count_parity",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_len_bucket" => Ok(TaskKind::SeqLenBucket),
            "word_content" => Ok(TaskKind::WordContent),
            "bigram_shift" => Ok(TaskKind::BigramShift),
            "token_count_parity" => Ok(TaskKind::TokenCountParity),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub classes: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Desk-scale defaults: 10k/1k/1k examples, vocabulary 64, lengths 4 to 16.
    pub fn desk(kind: TaskKind, seed: u64) -> Self {
        let classes = match kind {
            TaskKind::WordContent => 8,
            TaskKind::SeqLenBucket => 3,
            TaskKind::BigramShift | TaskKind::TokenCountParity => 2,
        };
        TaskSpec {
            kind,
            vocab_size: 64,
            min_len: 4,
            max_len: 16,
            classes,
            train_size: 10_000,
            valid_size: 1_000,
            test_size: 1_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return err(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.classes < 2 {
            return err(format!("need at least two classes, got {}", self.classes));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return err("every split needs at least one example".into());
        }
        let lengths = self.max_len - self.min_len + 1;
        match self.kind {
            TaskKind::SeqLenBucket => {
                if self.classes > lengths {
                    return err(format!("{} length buckets but only {lengths} distinct lengths", self.classes));
                }
                if self.vocab_size < 1 {
                    return err("empty vocabulary".into());
                }
            }
            TaskKind::WordContent => {
                if self.vocab_size <= self.classes {
                    return err(format!(
                        "word_content needs filler tokens beyond the {} markers (vocab {})",
                        self.classes, self.vocab_size
                    ));
                }
            }
            TaskKind::BigramShift => {
                if self.classes != 2 {
                    return err("bigram_shift is a two-class task".into());
                }
                if self.min_len < 2 {
                    return err("bigram_shift needs sequences of at least two tokens".into());
                }
                if self.vocab_size < BIGRAM_CYCLE {
                    return err(format!("bigram_shift needs at least {BIGRAM_CYCLE} tokens"));
                }
            }
            TaskKind::TokenCountParity => {
                if self.classes != 2 {
                    return err("token_count_parity is a two-class task".into());
                }
                if self.vocab_size < 2 {
                    return err("token_count_parity needs at least two tokens".into());
                }
            }
        }
        Ok(())
    }

    /// Bucket index of a sequence length.
    pub fn length_bucket(&self, len: usize) -> usize {
        let lengths = self.max_len - self.min_len + 1;
        (len - self.min_len) * self.classes / lengths
    }
}

/// One labelled token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, valid or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes `train.tsv`, `valid.tsv` and `test.tsv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in Split::ALL {
            write_examples(&dir.join(format!("{s}.tsv")), self.split(s))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            train: read_examples(&dir.join("train.tsv"))?,
            valid: read_examples(&dir.join("valid.tsv"))?,
            test: read_examples(&dir.join("test.tsv"))?,
        })
    }
}

/// Builds all three splits. Pure in `spec`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let train = generate_split(spec, spec.train_size, &mut rng, &mut seen)?;
    let valid = generate_split(spec, spec.valid_size, &mut rng, &mut seen)?;
    let test = generate_split(spec, spec.test_size, &mut rng, &mut seen)?;
    Ok(Dataset { train, valid, test })
}

fn generate_split(spec: &TaskSpec, size: usize, rng: &mut ChaCha8Rng, seen: &mut HashSet<Vec<usize>>) -> Result<Vec<Example>> {
    let mut labels: Vec<usize> = (0..size).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let mut out = Vec::with_capacity(size);
    for label in labels {
        let mut draws = 0;
        let tokens = loop {
            let t = draw(spec, label, rng);
            if seen.insert(t.clone()) {
                break t;
            }
            draws += 1;
            if draws >= MAX_DRAWS_PER_EXAMPLE {
                return Err(Error::Config(format!(
                    "cannot draw enough distinct {} sequences for class {label}; enlarge vocabulary or lengths",
                    spec.kind
                )));
            }
        };
        out.push(Example { tokens, label });
    }
    Ok(out)
}

fn draw(spec: &TaskSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let v = spec.vocab_size;
    match spec.kind {
        TaskKind::SeqLenBucket => {
            let lens: Vec<usize> = (spec.min_len..=spec.max_len).filter(|&l| spec.length_bucket(l) == label).collect();
            let len = lens[rng.random_range(0..lens.len())];
            (0..len).map(|_| rng.random_range(0..v)).collect()
        }
        TaskKind::WordContent => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(spec.classes..v)).collect();
            let at = rng.random_range(0..len);
            t[at] = label;
            t
        }
        TaskKind::BigramShift => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut t: Vec<usize> = (0..len)
                .map(|j| {
                    let class = j % BIGRAM_CYCLE;
                    let members = (v - class).div_ceil(BIGRAM_CYCLE);
                    class + BIGRAM_CYCLE * rng.random_range(0..members)
                })
                .collect();
            if label == 1 {
                let j = rng.random_range(0..len - 1);
                t.swap(j, j + 1);
            }
            t
        }
        TaskKind::TokenCountParity => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let choices: Vec<usize> = (label..=len).step_by(2).collect();
            let count = if choices.is_empty() { label } else { choices[rng.random_range(0..choices.len())] };
            let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(rng);
            for &p in positions.iter().take(count) {
                t[p] = 0;
            }
            t
        }
    }
}

/// Recomputes the ground-truth label of a token sequence.
pub fn label_oracle(spec: &TaskSpec, tokens: &[usize]) -> Result<usize> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(Error::Data(format!("token {bad} outside vocabulary of {}", spec.vocab_size)));
    }
    match spec.kind {
        TaskKind::SeqLenBucket => {
            if tokens.len() < spec.min_len || tokens.len() > spec.max_len {
                return Err(Error::Data(format!("length {} outside {}..={}", tokens.len(), spec.min_len, spec.max_len)));
            }
            Ok(spec.length_bucket(tokens.len()))
        }
        TaskKind::WordContent => {
            let mut markers = tokens.iter().filter(|&&t| t < spec.classes);
            match (markers.next(), markers.next()) {
                (Some(&m), None) => Ok(m),
                _ => Err(Error::Data("word_content sequence must contain exactly one marker token".into())),
            }
        }
        TaskKind::BigramShift => {
            let broken = tokens.iter().enumerate().any(|(j, &t)| t % BIGRAM_CYCLE != j % BIGRAM_CYCLE);
            Ok(usize::from(broken))
        }
        TaskKind::TokenCountParity => Ok(tokens.iter().filter(|&&t| t == 0).count() % 2),
    }
}

/// Line format: `label<TAB>space-separated token ids`, LF endings.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        write!(w, "{}\t", e.label)?;
        for (i, t) in e.tokens.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{t}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), n + 1));
        let (label, toks) = line.split_once('\t').ok_or_else(|| bad("missing tab separator"))?;
        let label = label.parse().map_err(|_| bad("label is not an integer"))?;
        let tokens = toks
            .split(' ')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("token is not an integer"))?;
        out.push(Example { tokens, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind) -> TaskSpec {
        TaskSpec { train_size: 300, valid_size: 60, test_size: 60, ..TaskSpec::desk(kind, 42) }
    }

    #[test]
    fn length_buckets() {
        let spec = TaskSpec { min_len: 4, max_len: 10, classes: 2, ..small(TaskKind::SeqLenBucket) };
        for len in 4..=10 {
            assert_eq!(spec.length_bucket(len), usize::from(len > 7), "len {len}");
        }
        let ds = generate(&spec).unwrap();
        for e in &ds.train {
            assert_eq!(e.label, usize::from(e.tokens.len() > 7));
        }
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let spec = TaskSpec { min_len: 4, max_len: 5, classes: 3, ..small(TaskKind::SeqLenBucket) };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = TaskSpec { classes: 3, ..small(TaskKind::BigramShift) };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = TaskSpec { vocab_size: 8, ..small(TaskKind::WordContent) };
        assert!(generate(&spec).is_err());
        // too few distinct sequences exist
        let spec = TaskSpec { vocab_size: 2, min_len: 2, max_len: 2, ..small(TaskKind::TokenCountParity) };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn every_example_matches_its_oracle() {
        for kind in [TaskKind::SeqLenBucket, TaskKind::WordContent, TaskKind::BigramShift, TaskKind::TokenCountParity] {
            let spec = small(kind);
            let ds = generate(&spec).unwrap();
            for s in Split::ALL {
                for e in ds.split(s) {
                    assert_eq!(label_oracle(&spec, &e.tokens).unwrap(), e.label, "{kind}");
                    assert!(e.tokens.len() >= spec.min_len && e.tokens.len() <= spec.max_len);
                }
            }
        }
    }

    #[test]
    fn bigram_swap_flips_label_iff_pair_differs() {
        let spec = small(TaskKind::BigramShift);
        let ds = generate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for e in ds.train.iter().filter(|e| e.label == 0).take(100) {
            let j = rng.random_range(0..e.tokens.len() - 1);
            let mut t = e.tokens.clone();
            t.swap(j, j + 1);
            let differs = e.tokens[j] != e.tokens[j + 1];
            assert!(differs);
            assert_eq!(label_oracle(&spec, &t).unwrap(), 1);
        }
        // swapping two equal tokens leaves the sequence, hence the label, alone
        let t = vec![0, 1, 2, 2, 0];
        let mut s = t.clone();
        s.swap(2, 3);
        assert_eq!(label_oracle(&spec, &t).unwrap(), label_oracle(&spec, &s).unwrap());
    }

    #[test]
    fn regeneration_is_identical_and_seed_sensitive() {
        let spec = small(TaskKind::WordContent);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = TaskSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn tsv_round_trip_and_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(TaskKind::TokenCountParity)).unwrap();
        ds.write_dir(dir.path()).unwrap();
        assert_eq!(Dataset::read_dir(dir.path()).unwrap(), ds);
        let raw = std::fs::read_to_string(dir.path().join("train.tsv")).unwrap();
        let first = raw.lines().next().unwrap();
        let e = &ds.train[0];
        let expected: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        assert_eq!(first, format!("{}\t{}", e.label, expected.join(" ")));
        assert!(!raw.contains('\r'));

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "1 2 3\n").unwrap();
        assert!(matches!(read_examples(&bad), Err(Error::Data(_))));
    }
}
