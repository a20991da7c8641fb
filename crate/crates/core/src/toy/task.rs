//! Deterministic synthetic tasks.
//!
//! Tokens `0..4` are answer words, token `4` is a separator, and everything from `5`
//! up is content.

use super::{Logits, ToyError};
use crate::noise::mix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SEPARATOR: usize = 4;
pub const FIRST_CONTENT: usize = 5;
const EVAL_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    /// `c₁…c_m SEP c₁…c_{m−1}`, predict the copy after the separator.
    SequenceCopy,
    /// Walk a fixed random permutation of the content tokens; predict every successor.
    NextTokenSynthetic,
    /// `c₁…c_m SEP q`, answer whether `q` occurred among the `cᵢ`.
    BinaryQaSynthetic,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sequence_copy" => Some(TaskKind::SequenceCopy),
            "next_token_synthetic" => Some(TaskKind::NextTokenSynthetic),
            "binary_qa_synthetic" => Some(TaskKind::BinaryQaSynthetic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SequenceCopy => "sequence_copy",
            TaskKind::NextTokenSynthetic => "next_token_synthetic",
            TaskKind::BinaryQaSynthetic => "binary_qa_synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// `[yes, no]` answer words for the QA task, each below [`SEPARATOR`].
    pub answer_tokens: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

/// Examples packed row-major for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        ToyTask { kind, vocab_size, seq_len, seed, answer_tokens: [0, 1] }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT);
        if content < 2 {
            return Err(ToyError::Shape(format!("vocab_size {} leaves fewer than 2 content tokens", self.vocab_size)));
        }
        let ok = match self.kind {
            TaskKind::SequenceCopy => self.seq_len >= 2 && self.seq_len % 2 == 0,
            TaskKind::NextTokenSynthetic => self.seq_len >= 1,
            TaskKind::BinaryQaSynthetic => self.seq_len >= 3,
        };
        if !ok {
            return Err(ToyError::Shape(format!("seq_len {} is invalid for {}", self.seq_len, self.kind.as_str())));
        }
        if self.answer_tokens.iter().any(|&t| t >= SEPARATOR) || self.answer_tokens[0] == self.answer_tokens[1] {
            return Err(ToyError::Shape(format!("answer tokens {:?} must be distinct and below {SEPARATOR}", self.answer_tokens)));
        }
        Ok(())
    }

    /// Tokens that accuracy is decided over; `None` means the whole vocabulary.
    pub fn candidates(&self) -> Option<&[usize]> {
        match self.kind {
            TaskKind::BinaryQaSynthetic => Some(&self.answer_tokens),
            _ => None,
        }
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(index)))
    }

    fn content(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(FIRST_CONTENT..self.vocab_size)
    }

    /// Successor map for [`TaskKind::NextTokenSynthetic`], a permutation of the content tokens.
    pub fn successor_table(&self) -> Vec<usize> {
        let mut rng = self.rng(u64::MAX);
        let mut perm: Vec<usize> = (FIRST_CONTENT..self.vocab_size).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut table = vec![0; self.vocab_size];
        for (from, to) in (FIRST_CONTENT..self.vocab_size).zip(perm) {
            table[from] = to;
        }
        table
    }

    /// Example number `index` of the stream. Training uses indices below `2⁶³`.
    pub fn sample(&self, index: u64) -> Example {
        let mut rng = self.rng(index);
        let n = self.seq_len;
        match self.kind {
            TaskKind::SequenceCopy => {
                let m = n / 2;
                let body: Vec<usize> = (0..m).map(|_| self.content(&mut rng)).collect();
                let mut tokens = body.clone();
                tokens.push(SEPARATOR);
                tokens.extend_from_slice(&body[..m - 1]);
                let mut targets = vec![None; m];
                targets.extend(body.iter().map(|&t| Some(t)));
                Example { tokens, targets }
            }
            TaskKind::NextTokenSynthetic => {
                let table = self.successor_table();
                let mut tokens = vec![self.content(&mut rng)];
                while tokens.len() < n {
                    tokens.push(table[*tokens.last().unwrap()]);
                }
                let targets = tokens.iter().map(|&t| Some(table[t])).collect();
                Example { tokens, targets }
            }
            TaskKind::BinaryQaSynthetic => {
                let m = n - 2;
                let mut tokens: Vec<usize> = (0..m).map(|_| self.content(&mut rng)).collect();
                let want_yes = rng.random_bool(0.5);
                let absent: Vec<usize> =
                    (FIRST_CONTENT..self.vocab_size).filter(|t| !tokens.contains(t)).collect();
                let query = if want_yes || absent.is_empty() {
                    tokens[rng.random_range(0..m)]
                } else {
                    absent[rng.random_range(0..absent.len())]
                };
                let answer = if tokens.contains(&query) { self.answer_tokens[0] } else { self.answer_tokens[1] };
                tokens.push(SEPARATOR);
                tokens.push(query);
                let mut targets = vec![None; n];
                targets[n - 1] = Some(answer);
                Example { tokens, targets }
            }
        }
    }

    pub fn train_example(&self, index: u64) -> Example {
        self.sample(index & !EVAL_BIT)
    }

    /// Held-out examples live in the upper half of the index space.
    pub fn eval_example(&self, index: u64) -> Example {
        self.sample(index | EVAL_BIT)
    }

    pub fn train_batch(&self, first: u64, count: usize) -> Batch {
        pack((0..count as u64).map(|i| self.train_example(first + i)))
    }

    pub fn eval_batch(&self, first: u64, count: usize) -> Batch {
        pack((0..count as u64).map(|i| self.eval_example(first + i)))
    }
}

fn pack(examples: impl Iterator<Item = Example>) -> Batch {
    let mut batch = Batch { tokens: Vec::new(), targets: Vec::new(), batch: 0 };
    for e in examples {
        batch.tokens.extend(e.tokens);
        batch.targets.extend(e.targets);
        batch.batch += 1;
    }
    batch
}

/// Fraction of targeted positions whose highest-scoring candidate is the target.
pub fn accuracy(logits: &Logits, targets: &[Option<usize>], candidates: Option<&[usize]>) -> f64 {
    let v = logits.vocab;
    let mut hits = 0usize;
    let mut scored = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits.data[r * v..(r + 1) * v];
        let best = match candidates {
            Some(c) => *c.iter().max_by(|&&a, &&b| row[a].total_cmp(&row[b])).unwrap(),
            None => (0..v).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap(),
        };
        scored += 1;
        hits += (best == t) as usize;
    }
    if scored == 0 {
        0.0
    } else {
        hits as f64 / scored as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split() {
        let task = ToyTask::new(TaskKind::BinaryQaSynthetic, 24, 10, 5);
        assert_eq!(task.train_example(3), task.train_example(3));
        assert_ne!(task.train_example(3), task.eval_example(3));
        assert_eq!(task.sample(3 | EVAL_BIT), task.eval_example(3));
    }

    #[test]
    fn copy_layout() {
        let task = ToyTask::new(TaskKind::SequenceCopy, 16, 8, 1);
        let e = task.sample(0);
        assert_eq!(e.tokens.len(), 8);
        assert_eq!(e.tokens[4], SEPARATOR);
        for j in 0..4 {
            assert_eq!(e.targets[4 + j], Some(e.tokens[j]));
        }
        assert!(e.targets[..4].iter().all(Option::is_none));
    }

    #[test]
    fn next_token_follows_table() {
        let task = ToyTask::new(TaskKind::NextTokenSynthetic, 12, 6, 9);
        let table = task.successor_table();
        let mut seen: Vec<usize> = table[FIRST_CONTENT..].to_vec();
        seen.sort();
        assert_eq!(seen, (FIRST_CONTENT..12).collect::<Vec<_>>());
        let e = task.sample(2);
        for t in 0..5 {
            assert_eq!(e.tokens[t + 1], table[e.tokens[t]]);
            assert_eq!(e.targets[t], Some(e.tokens[t + 1]));
        }
    }

    #[test]
    fn qa_answers_are_correct_and_balanced() {
        let task = ToyTask { answer_tokens: [2, 3], ..ToyTask::new(TaskKind::BinaryQaSynthetic, 20, 8, 4) };
        let mut yes = 0;
        for i in 0..2000 {
            let e = task.sample(i);
            let q = e.tokens[7];
            let present = e.tokens[..6].contains(&q);
            assert_eq!(e.targets[7], Some(if present { 2 } else { 3 }));
            yes += present as usize;
        }
        assert!((900..1100).contains(&yes), "{yes}");
    }

    #[test]
    fn validation() {
        assert!(ToyTask::new(TaskKind::SequenceCopy, 16, 7, 0).validate().is_err());
        assert!(ToyTask::new(TaskKind::BinaryQaSynthetic, 6, 8, 0).validate().is_err());
        let bad = ToyTask { answer_tokens: [1, 1], ..ToyTask::new(TaskKind::BinaryQaSynthetic, 16, 8, 0) };
        assert!(bad.validate().is_err());
        assert!(ToyTask::new(TaskKind::NextTokenSynthetic, 16, 8, 0).validate().is_ok());
    }

    #[test]
    fn accuracy_over_candidates() {
        let logits = Logits { batch: 1, seq_len: 2, vocab: 3, data: vec![0.0, 1.0, 5.0, 3.0, 2.0, 1.0] };
        let targets = [Some(1), Some(0)];
        assert_eq!(accuracy(&logits, &targets, None), 0.5);
        assert_eq!(accuracy(&logits, &targets, Some(&[0, 1])), 1.0);
    }
}
