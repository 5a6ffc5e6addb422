//! Corpus-level BLEU4 over single-reference pairs.
//!
//! Modified n-gram precision with clipping, pooled across the corpus
//! (sum of clipped matches over sum of hypothesis n-gram counts), brevity
//! penalty `min(1, e^{1−r/c})`, and a uniform-¼ geometric mean. Unsmoothed
//! by default — any zero precision zeroes the score, as competition
//! scoring does; add-one smoothing (numerator and denominator +1 for
//! n ≥ 2) is available for desk-scale corpora where 4-gram matches vanish.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    AddOne,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("corpus size mismatch: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BleuReport {
    pub bleu4: f64,
    /// Modified precisions p₁..p₄.
    pub p: [f64; 4],
    /// Brevity penalty in (0, 1].
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// All contiguous length-`n` windows of `tokens` with multiplicity.
/// Shorter-than-`n` inputs have no n-grams.
pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    debug_assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU4 with one reference per hypothesis.
pub fn bleu4<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    smoothing: Smoothing,
) -> Result<BleuReport, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }

    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();

    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (hyp, reference) in hypotheses.iter().zip(references) {
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &ngram_counts(hyp, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }

    let mut p = [0.0f64; 4];
    for n in 0..4 {
        let (mut num, mut den) = (matched[n] as f64, total[n] as f64);
        if smoothing == Smoothing::AddOne && n >= 1 {
            num += 1.0;
            den += 1.0;
        }
        // A corpus with no n-grams of this order (every hypothesis shorter
        // than n) makes the precision vacuous, not zero; counting it as 1
        // keeps "perfect match ⇒ 1.0" true at any sentence length. Short
        // hypotheses still pay through the brevity penalty.
        p[n] = if den > 0.0 { num / den } else { 1.0 };
    }

    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let bleu4 = if p.iter().any(|&x| x == 0.0) {
        0.0
    } else {
        bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
    };

    Ok(BleuReport {
        bleu4,
        p,
        bp,
        hyp_len,
        ref_len,
    })
}

/// Convenience for scoring whitespace-token strings.
pub fn bleu4_str(
    hypotheses: &[&str],
    references: &[&str],
    smoothing: Smoothing,
) -> Result<BleuReport, MetricsError> {
    let toks = |s: &&str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    bleu4(
        &hypotheses.iter().map(toks).collect::<Vec<_>>(),
        &references.iter().map(toks).collect::<Vec<_>>(),
        smoothing,
    )
}
