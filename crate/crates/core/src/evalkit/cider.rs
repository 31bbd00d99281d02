//! Consensus metric over TF-IDF weighted n-grams, in the variant with count
//! clipping and a Gaussian length penalty.

use std::collections::HashMap;

use super::{EvalPair, EvalError};
use crate::corpus::normalize_words;

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;
const SCALE: f64 = 10.0;

type NgramCounts = HashMap<String, f64>;

fn ngram_counts(words: &[String], n: usize) -> NgramCounts {
    let mut counts = NgramCounts::new();
    if words.len() < n {
        return counts;
    }
    for w in words.windows(n) {
        *counts.entry(w.join("\u{1}")).or_insert(0.0) += 1.0;
    }
    counts
}

struct TfIdfVec {
    /// Per order n: ngram -> tf * idf.
    weights: Vec<NgramCounts>,
    /// Per order n: euclidean norm of the weight vector.
    norms: Vec<f64>,
    /// Token count, used by the length penalty.
    length: f64,
}

fn counts_to_vec(words: &[String], df: &NgramCounts, log_num_images: f64) -> TfIdfVec {
    let mut weights = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let counts = ngram_counts(words, n);
        let mut w = NgramCounts::new();
        let mut norm = 0.0;
        for (ng, tf) in counts {
            let idf = log_num_images - df.get(&ng).copied().unwrap_or(0.0).max(1.0).ln();
            let val = tf * idf;
            norm += val * val;
            w.insert(ng, val);
        }
        weights.push(w);
        norms.push(norm.sqrt());
    }
    TfIdfVec { weights, norms, length: words.len() as f64 }
}

fn similarity(hyp: &TfIdfVec, reference: &TfIdfVec) -> f64 {
    let delta = hyp.length - reference.length;
    let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (ng, &hw) in &hyp.weights[n] {
            if let Some(&rw) = reference.weights[n].get(ng) {
                // Count clipping: the hypothesis weight counts only up to the
                // reference weight.
                val += hw.min(rw) * rw;
            }
        }
        if hyp.norms[n] > 0.0 && reference.norms[n] > 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// Per-pair scores. Document frequencies come from the evaluation corpus's
/// own reference sets, so scores are corpus-relative.
pub fn cider_d_scores(pairs: &[EvalPair]) -> Result<Vec<f64>, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::DegenerateDocumentFrequency);
    }
    // df[ngram] = number of images whose reference set contains the ngram.
    let mut df = NgramCounts::new();
    let ref_words: Vec<Vec<Vec<String>>> = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| normalize_words(r)).collect())
        .collect();
    for refs in &ref_words {
        let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
        for words in refs {
            for n in 1..=MAX_N {
                for ng in ngram_counts(words, n).into_keys() {
                    seen.insert(ng);
                }
            }
        }
        for ng in seen {
            *df.entry(ng).or_insert(0.0) += 1.0;
        }
    }
    let log_num_images = (pairs.len() as f64).ln();

    let mut scores = Vec::with_capacity(pairs.len());
    for (pair, refs) in pairs.iter().zip(&ref_words) {
        let hyp_words = normalize_words(&pair.candidate);
        let hyp = counts_to_vec(&hyp_words, &df, log_num_images);
        let mut total = 0.0;
        for words in refs {
            let rv = counts_to_vec(words, &df, log_num_images);
            total += similarity(&hyp, &rv);
        }
        scores.push(SCALE * total / refs.len() as f64);
    }
    Ok(scores)
}

/// Corpus score: the mean per-pair score.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64, EvalError> {
    let scores = cider_d_scores(pairs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
