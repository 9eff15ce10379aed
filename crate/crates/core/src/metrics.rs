//! BLEU (up to 4-grams, brevity penalty, sentence and corpus level) and
//! ROUGE-2 recall. Metrics only compare tokens for equality, so they work on
//! word indices and on surface strings alike.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Zero-precision floor used for sentence-level training rewards.
pub const REWARD_EPSILON: f64 = 1e-9;

/// Counts of every n-gram of one order.
pub type NGramCounts<T> = HashMap<Vec<T>, usize>;

pub fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> NGramCounts<T> {
    let mut counts = HashMap::new();
    if n == 0 || seq.len() < n {
        return counts;
    }
    for w in seq.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Sufficient statistics for BLEU. Additive across segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, `matched[n-1]` for n-grams.
    pub matched: [u64; MAX_ORDER],
    /// Candidate n-gram totals per order.
    pub total: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

impl Add for BleuStats {
    type Output = BleuStats;

    fn add(mut self, rhs: BleuStats) -> BleuStats {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matched[n] += rhs.matched[n];
            self.total[n] += rhs.total[n];
        }
        self.cand_len += rhs.cand_len;
        self.ref_len += rhs.ref_len;
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = BleuStats>>(iter: I) -> BleuStats {
        iter.fold(BleuStats::default(), Add::add)
    }
}

impl BleuStats {
    pub fn precision(&self, n: usize) -> Option<f64> {
        let t = self.total[n - 1];
        (t > 0).then(|| self.matched[n - 1] as f64 / t as f64)
    }
}

/// Clipped n-gram statistics of `candidate` against one or more references.
/// Each candidate n-gram count is clipped by its maximum count in any single
/// reference; the effective reference length is the one closest to the
/// candidate length (ties to the shorter).
pub fn bleu_stats<T, R>(candidate: &[T], references: &[R]) -> Result<BleuStats>
where
    T: Eq + Hash + Clone,
    R: AsRef<[T]>,
{
    if references.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one reference".into()));
    }
    let c = candidate.len();
    let ref_len = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("non-empty references");
    let mut stats = BleuStats {
        cand_len: c as u64,
        ref_len: ref_len as u64,
        ..Default::default()
    };
    if c == 0 {
        return Ok(stats);
    }
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        if cand.is_empty() {
            continue;
        }
        let mut max_ref: NGramCounts<T> = HashMap::new();
        for r in references {
            for (g, k) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        for (g, k) in &cand {
            stats.total[n - 1] += *k as u64;
            stats.matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0)) as u64;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    None,
    /// Zero (or undefined) n-gram precisions are replaced by this value.
    Floor(f64),
}

pub fn brevity_penalty(cand_len: u64, ref_len: u64) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// `BP · exp(¼ Σ ln p_n)`.
pub fn bleu_score(stats: &BleuStats, smoothing: Smoothing) -> f64 {
    if stats.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let p = match (stats.precision(n), smoothing) {
            (Some(p), _) if p > 0.0 => p,
            (_, Smoothing::None) => return 0.0,
            (_, Smoothing::Floor(eps)) => eps,
        };
        log_sum += p.ln();
    }
    let score = brevity_penalty(stats.cand_len, stats.ref_len) * (log_sum / MAX_ORDER as f64).exp();
    score.clamp(0.0, 1.0)
}

pub fn sentence_bleu<T, R>(candidate: &[T], references: &[R], smoothing: Smoothing) -> Result<f64>
where
    T: Eq + Hash + Clone,
    R: AsRef<[T]>,
{
    Ok(bleu_score(&bleu_stats(candidate, references)?, smoothing))
}

/// Bigram recall of `candidate` against `reference`, with candidate counts
/// clipped by reference counts. References shorter than two tokens score 0.
pub fn rouge2<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> f64 {
    let refs = ngram_counts(reference, 2);
    let total: usize = refs.values().sum();
    if total == 0 {
        return 0.0;
    }
    let cand = ngram_counts(candidate, 2);
    let matched: usize = refs
        .iter()
        .map(|(g, &k)| k.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

/// How multiple references are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefReduce {
    /// Clip against all references jointly.
    #[default]
    Pooled,
    /// Score each reference on its own and keep the best.
    Max,
}

/// Corpus BLEU from pooled statistics, no smoothing.
pub fn corpus_bleu<T, C, R>(pairs: &[(C, Vec<R>)]) -> Result<f64>
where
    T: Eq + Hash + Clone,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    corpus_bleu_with(pairs, RefReduce::Pooled)
}

pub fn corpus_bleu_with<T, C, R>(pairs: &[(C, Vec<R>)], reduce: RefReduce) -> Result<f64>
where
    T: Eq + Hash + Clone,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("corpus BLEU needs at least one pair".into()));
    }
    let mut pooled = BleuStats::default();
    for (cand, refs) in pairs {
        let cand = cand.as_ref();
        pooled += match reduce {
            RefReduce::Pooled => bleu_stats(cand, refs)?,
            RefReduce::Max => best_single_reference(cand, refs)?,
        };
    }
    Ok(bleu_score(&pooled, Smoothing::None))
}

fn best_single_reference<T, R>(cand: &[T], refs: &[R]) -> Result<BleuStats>
where
    T: Eq + Hash + Clone,
    R: AsRef<[T]>,
{
    let mut best: Option<(f64, BleuStats)> = None;
    for r in refs {
        let s = bleu_stats(cand, std::slice::from_ref(r))?;
        let score = bleu_score(&s, Smoothing::Floor(REWARD_EPSILON));
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, s));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::InvalidArgument("BLEU needs at least one reference".into()))
}

/// Sentence BLEU with per-reference maximum or pooled clipping.
pub fn sentence_bleu_with<T, R>(
    candidate: &[T],
    references: &[R],
    smoothing: Smoothing,
    reduce: RefReduce,
) -> Result<f64>
where
    T: Eq + Hash + Clone,
    R: AsRef<[T]>,
{
    match reduce {
        RefReduce::Pooled => sentence_bleu(candidate, references, smoothing),
        RefReduce::Max => {
            let mut best = 0.0f64;
            for r in references {
                best = best.max(sentence_bleu(candidate, std::slice::from_ref(r), smoothing)?);
            }
            Ok(best)
        }
    }
}

/// Sequence-level reward used during REINFORCE training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardMetric {
    #[default]
    Bleu,
    Rouge2,
}

impl RewardMetric {
    /// Reward of a generated word sequence (frame already stripped) against
    /// the reference words. BLEU uses the [`REWARD_EPSILON`] floor so partial
    /// matches still rank.
    pub fn reward(self, generated: &[usize], reference: &[usize]) -> f64 {
        match self {
            RewardMetric::Bleu => bleu_score(
                &bleu_stats(generated, &[reference]).expect("one reference"),
                Smoothing::Floor(REWARD_EPSILON),
            ),
            RewardMetric::Rouge2 => rouge2(generated, reference),
        }
    }

    /// Evaluation score (no smoothing).
    pub fn evaluate(self, generated: &[usize], reference: &[usize]) -> f64 {
        match self {
            RewardMetric::Bleu => bleu_score(
                &bleu_stats(generated, &[reference]).expect("one reference"),
                Smoothing::None,
            ),
            RewardMetric::Rouge2 => rouge2(generated, reference),
        }
    }
}

impl FromStr for RewardMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(RewardMetric::Bleu),
            "rouge2" => Ok(RewardMetric::Rouge2),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric {other:?} (expected bleu or rouge2)"
            ))),
        }
    }
}

impl fmt::Display for RewardMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMetric::Bleu => "bleu",
            RewardMetric::Rouge2 => "rouge2",
        })
    }
}
