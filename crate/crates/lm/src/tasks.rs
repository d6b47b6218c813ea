//! Synthetic diagnostic tasks and a byte-level corpus.

use rand::seq::index::sample;
use rand::Rng;

use crate::config::TaskConfig;
use crate::error::{LmError, Result};

/// Copy-task separator token.
pub const SEP: usize = 0;

/// Equal-length input sequences with next-token targets flattened in the
/// same column order as the model's logits. `None` positions carry no loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// `k1 v1 … kn vn q1 a1 … qm am`; loss only on the answers.
    AssocRecall { n_pairs: usize, n_queries: usize, vocab: usize },
    /// `x1 … xP SEP x1 … x(P-1)`; loss on every position from `SEP` on.
    Copy { prefix_len: usize, vocab: usize },
    CharCorpus { data: Vec<u8> },
}

impl Task {
    pub fn from_config(cfg: &TaskConfig) -> Result<Self> {
        match cfg {
            &TaskConfig::AssocRecall { n_pairs, n_queries, vocab } => {
                if n_pairs == 0 || n_queries == 0 {
                    return Err(LmError::Task("assoc recall needs at least one pair and one query".into()));
                }
                if n_pairs > vocab {
                    return Err(LmError::Task(format!("{n_pairs} distinct keys do not fit in vocab {vocab}")));
                }
                if n_queries > n_pairs {
                    return Err(LmError::Task("more queries than pairs".into()));
                }
                Ok(Task::AssocRecall { n_pairs, n_queries, vocab })
            }
            &TaskConfig::Copy { prefix_len, vocab } => {
                if prefix_len == 0 || vocab < 2 {
                    return Err(LmError::Task("copy needs a prefix and at least one content token".into()));
                }
                Ok(Task::Copy { prefix_len, vocab })
            }
            TaskConfig::CharCorpus { path } => {
                let data = std::fs::read(path)?;
                Self::char_corpus(data)
            }
        }
    }

    pub fn char_corpus(data: Vec<u8>) -> Result<Self> {
        if data.len() < 2 {
            return Err(LmError::Task("corpus needs at least two bytes".into()));
        }
        Ok(Task::CharCorpus { data })
    }

    pub fn vocab(&self) -> usize {
        match self {
            Task::AssocRecall { vocab, .. } | Task::Copy { vocab, .. } => *vocab,
            Task::CharCorpus { .. } => 256,
        }
    }

    /// Input length of one example. Synthetic tasks fix their own length;
    /// the corpus uses `max_len`.
    pub fn seq_len(&self, max_len: usize) -> usize {
        match self {
            Task::AssocRecall { n_pairs, n_queries, .. } => 2 * n_pairs + 2 * n_queries - 1,
            Task::Copy { prefix_len, .. } => 2 * prefix_len,
            Task::CharCorpus { data } => max_len.min(data.len() - 1),
        }
    }

    /// Full token sequence (inputs plus the final target) and the mask of
    /// input positions whose next token is scored.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        match *self {
            Task::AssocRecall { n_pairs, n_queries, vocab } => {
                let keys = sample(rng, vocab, n_pairs).into_vec();
                let values: Vec<usize> = (0..n_pairs).map(|_| rng.random_range(0..vocab)).collect();
                let mut seq = Vec::with_capacity(2 * (n_pairs + n_queries));
                for (k, v) in keys.iter().zip(&values) {
                    seq.extend([*k, *v]);
                }
                let mut scored = vec![false; 2 * n_pairs];
                for q in sample(rng, n_pairs, n_queries).into_iter() {
                    seq.extend([keys[q], values[q]]);
                    scored.extend([true, false]);
                }
                scored.pop();
                (seq, scored)
            }
            Task::Copy { prefix_len, vocab } => {
                let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.random_range(1..vocab)).collect();
                let mut seq = prefix.clone();
                seq.push(SEP);
                seq.extend(&prefix);
                let scored = (0..2 * prefix_len).map(|i| i >= prefix_len).collect();
                (seq, scored)
            }
            Task::CharCorpus { ref data } => {
                let len = self.seq_len(max_len);
                let start = rng.random_range(0..data.len() - len);
                let seq = data[start..=start + len].iter().map(|&b| b as usize).collect();
                (seq, vec![true; len])
            }
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, max_len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::new();
        for _ in 0..batch {
            let (seq, scored) = self.sample(rng, max_len);
            let n = seq.len() - 1;
            targets.extend((0..n).map(|i| scored[i].then_some(seq[i + 1])));
            inputs.push(seq[..n].to_vec());
        }
        Batch { inputs, targets }
    }
}

/// Non-overlapping windows of `max_len` inputs over a token stream; the
/// last window may be shorter.
pub fn windows(tokens: &[usize], max_len: usize) -> Result<Vec<Batch>> {
    if tokens.len() < 2 {
        return Err(LmError::Task("token stream needs at least two tokens".into()));
    }
    if max_len == 0 {
        return Err(LmError::Task("max_len must be positive".into()));
    }
    let n_inputs = tokens.len() - 1;
    Ok((0..n_inputs)
        .step_by(max_len)
        .map(|start| {
            let end = (start + max_len).min(n_inputs);
            Batch {
                inputs: vec![tokens[start..end].to_vec()],
                targets: tokens[start + 1..=end].iter().map(|&t| Some(t)).collect(),
            }
        })
        .collect())
}
