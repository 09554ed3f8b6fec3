//! Hit@10 and NDCG@10 under sampled-candidate ranking.
//!
//! The ground truth is ranked against its negatives pessimistically: every
//! negative scoring at least as high as the truth is placed above it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{EvalCase, Split, SplitKind};
use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const CUTOFF: usize = 10;
pub const DEFAULT_NEGATIVES: usize = 100;

/// `1 / log2(rank + 1)` inside the cutoff, 0 beyond it.
pub fn ndcg_single(rank: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= CUTOFF {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn is_hit(rank: usize) -> bool {
    rank <= CUTOFF
}

/// 1-based rank of `truth` among `truth` and `negatives`, ties counted against the truth.
pub fn rank_of(truth: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= truth).count()
}

/// Which items each ground truth is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "count")]
pub enum Candidates {
    /// This many negatives drawn uniformly, with replacement, from items
    /// outside the user's history.
    Sampled(usize),
    /// Every item outside the user's history.
    Full,
}

impl Default for Candidates {
    fn default() -> Self {
        Candidates::Sampled(DEFAULT_NEGATIVES)
    }
}

/// Negatives for one user. Returns an empty list when the history covers
/// every item.
pub fn sample_negatives(history: &HashSet<usize>, num_items: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if history.len() >= num_items && (0..num_items).all(|i| history.contains(&i)) {
        return Vec::new();
    }
    (0..count)
        .map(|_| loop {
            let i = rng.below(num_items);
            if !history.contains(&i) {
                break i;
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction in `[0, 1]`.
    pub hit_at_10: f64,
    /// Fraction in `[0, 1]`.
    pub ndcg: f64,
    pub ranks: Vec<usize>,
    /// Candidates per query, including the truth (sampled mode).
    pub candidate_count: usize,
    pub seed: u64,
}

impl EvalResult {
    pub fn from_ranks(ranks: Vec<usize>, candidate_count: usize, seed: u64) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyDataset(": no evaluation queries".into()));
        }
        let n = ranks.len() as f64;
        let hit_at_10 = ranks.iter().filter(|&&r| is_hit(r)).count() as f64 / n;
        let ndcg = ranks.iter().map(|&r| ndcg_single(r)).sum::<f64>() / n;
        Ok(EvalResult {
            hit_at_10,
            ndcg,
            ranks,
            candidate_count,
            seed,
        })
    }

    pub fn hit_percent(&self) -> f64 {
        100.0 * self.hit_at_10
    }

    pub fn ndcg_percent(&self) -> f64 {
        100.0 * self.ndcg
    }
}

/// Anything that can score candidate items after a context.
pub trait Scorer {
    /// `scores[q][c]` for candidate `c` of query `q`.
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Queries scored per [`Scorer::score`] call.
const EVAL_BATCH: usize = 256;

/// Rank every query of a split. Negatives for user `u` come from stream
/// `stream` of `seed`, forked by `u`, so results do not depend on batching.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    split: &Split,
    kind: SplitKind,
    candidates: Candidates,
    seed: u64,
    stream: u64,
) -> Result<EvalResult> {
    let cases = split.cases(kind);
    evaluate_cases(scorer, split, &cases, candidates, seed, stream)
}

pub fn evaluate_cases<S: Scorer + ?Sized>(
    scorer: &S,
    split: &Split,
    cases: &[EvalCase],
    candidates: Candidates,
    seed: u64,
    stream: u64,
) -> Result<EvalResult> {
    let base = Rng::new(seed, stream);
    let mut ranks = Vec::with_capacity(cases.len());
    let mut width = 0;
    for chunk in cases.chunks(EVAL_BATCH) {
        let lists: Vec<Vec<usize>> = chunk
            .iter()
            .map(|case| {
                let history = split.history(case.user);
                let negatives = match candidates {
                    Candidates::Sampled(n) => {
                        let mut rng = base.fork(case.user as u64);
                        sample_negatives(history, split.num_items, n, &mut rng)
                    }
                    Candidates::Full => (0..split.num_items).filter(|i| !history.contains(i)).collect(),
                };
                let mut list = Vec::with_capacity(negatives.len() + 1);
                list.push(case.target);
                list.extend(negatives);
                list
            })
            .collect();
        width = width.max(lists.iter().map(Vec::len).max().unwrap_or(0));
        let contexts: Vec<&[usize]> = chunk.iter().map(|c| c.context.as_slice()).collect();
        let scores = scorer.score(&contexts, &lists)?;
        for s in scores {
            ranks.push(rank_of(s[0], &s[1..]));
        }
    }
    EvalResult::from_ranks(ranks, width, seed)
}
