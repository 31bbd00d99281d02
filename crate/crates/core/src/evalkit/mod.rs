//! Caption metrics built from scratch — corpus BLEU-1..4, ROUGE-L, CIDEr-D
//! and keyword recognition accuracy — plus the model evaluation driver.
//!
//! All metrics tokenize with the corpus module's normalization.

mod cider;

pub use cider::{cider_d, cider_d_scores};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_words, CaptionExample, ImageFeatures, KnowevalExample, Vocabulary};
use crate::model::{Model, ModelError, Scalar};
use crate::replay::{detect_keyword, KnowledgeKeyword, ReplayError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation corpus")]
    EmptyCorpus,
    #[error("max_n {0} exceeds 4")]
    BadMaxN(usize),
    #[error("degenerate document frequency")]
    DegenerateDocumentFrequency,
    #[error("pair {0} is missing its gold keyword")]
    MissingKeyword(usize),
    #[error("pair {0} has no references")]
    MissingReferences(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// One evaluation item: a generated candidate, its references and, for
/// knowledge eval sets, the gold keyword.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub candidate: String,
    pub references: Vec<String>,
    pub gold_keyword: Option<KnowledgeKeyword>,
}

/// Metric suite for one model on one eval set. `recog_acc` is present only
/// for knowledge eval sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub recog_acc: Option<f64>,
    pub n_examples: usize,
}

fn check_pairs(pairs: &[EvalPair]) -> Result<(), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.references.is_empty() {
            return Err(EvalError::MissingReferences(i));
        }
    }
    Ok(())
}

/// Corpus BLEU for orders 1..=max_n: clipped modified n-gram precision,
/// uniform geometric mean, brevity penalty from the closest reference length.
/// No smoothing; an order with zero matches scores 0.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<Vec<f64>, EvalError> {
    check_pairs(pairs)?;
    if max_n == 0 || max_n > 4 {
        return Err(EvalError::BadMaxN(max_n));
    }
    let mut numer = vec![0.0f64; max_n];
    let mut denom = vec![0.0f64; max_n];
    let mut cand_len_total = 0usize;
    let mut ref_len_total = 0usize;

    for pair in pairs {
        let cand = normalize_words(&pair.candidate);
        let refs: Vec<Vec<String>> = pair.references.iter().map(|r| normalize_words(r)).collect();

        // Closest reference length; ties prefer the shorter reference.
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
            .unwrap_or(0);
        cand_len_total += cand.len();
        ref_len_total += closest;

        for n in 1..=max_n {
            let cand_counts = ngram_counts(&cand, n);
            if cand_counts.is_empty() {
                continue;
            }
            let mut max_ref: HashMap<String, usize> = HashMap::new();
            for r in &refs {
                for (ng, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(ng).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (ng, c) in &cand_counts {
                let clip = max_ref.get(ng).copied().unwrap_or(0);
                numer[n - 1] += (*c).min(clip) as f64;
                denom[n - 1] += *c as f64;
            }
        }
    }

    let bp = if cand_len_total == 0 {
        0.0
    } else if cand_len_total < ref_len_total {
        (1.0 - ref_len_total as f64 / cand_len_total as f64).exp()
    } else {
        1.0
    };

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| if denom[i] > 0.0 { numer[i] / denom[i] } else { 0.0 })
        .collect();

    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        if precisions[..n].iter().any(|&p| p == 0.0) {
            out.push(0.0);
        } else {
            let log_mean = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            out.push(bp * log_mean.exp());
        }
    }
    Ok(out)
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if words.len() < n {
        return counts;
    }
    for w in words.windows(n) {
        *counts.entry(w.join("\u{1}")).or_insert(0) += 1;
    }
    counts
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[b.len()]
}

/// ROUGE-L: per pair, LCS-based F-measure (beta^2 = 1.2) against each
/// reference, max over references, mean over the corpus.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, EvalError> {
    check_pairs(pairs)?;
    const BETA_SQ: f64 = 1.2;
    let mut total = 0.0;
    for pair in pairs {
        let cand = normalize_words(&pair.candidate);
        let mut best: f64 = 0.0;
        for reference in &pair.references {
            let r = normalize_words(reference);
            if cand.is_empty() || r.is_empty() {
                continue;
            }
            let lcs = lcs_len(&cand, &r) as f64;
            if lcs == 0.0 {
                continue;
            }
            let p = lcs / cand.len() as f64;
            let rec = lcs / r.len() as f64;
            let f = ((1.0 + BETA_SQ) * p * rec) / (rec + BETA_SQ * p);
            best = best.max(f);
        }
        total += best;
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of candidates containing their gold keyword.
pub fn recog_acc(pairs: &[EvalPair]) -> Result<f64, EvalError> {
    check_pairs(pairs)?;
    let mut hits = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let kw = pair.gold_keyword.as_ref().ok_or(EvalError::MissingKeyword(i))?;
        if detect_keyword(&pair.candidate, kw) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Computes all metrics over prepared pairs. `with_recog` selects whether the
/// report carries recognition accuracy (knowledge eval sets only).
pub fn metrics_from_pairs(pairs: &[EvalPair], with_recog: bool) -> Result<MetricsReport, EvalError> {
    check_pairs(pairs)?;
    let b = bleu(pairs, 4)?;
    let rouge = rouge_l(pairs)?;
    let cider = cider_d(pairs)?;
    let recog = if with_recog { Some(recog_acc(pairs)?) } else { None };
    Ok(MetricsReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge,
        cider,
        recog_acc: recog,
        n_examples: pairs.len(),
    })
}

/// Anything that maps an image to a caption. Implemented by the model via
/// greedy decoding; tests substitute fixed channels.
pub trait CaptionSource {
    fn caption(&self, image: &ImageFeatures, vocab: &Vocabulary) -> Result<String, EvalError>;
}

impl<S: Scalar> CaptionSource for Model<S> {
    fn caption(&self, image: &ImageFeatures, vocab: &Vocabulary) -> Result<String, EvalError> {
        let seq = self.greedy_decode(image, self.config.max_len - 1)?;
        Ok(vocab.detokenize(&seq.ids))
    }
}

/// An eval set the driver can decode against.
pub enum EvalSet<'a> {
    Captions(&'a [CaptionExample]),
    Knoweval(&'a [KnowevalExample]),
}

impl EvalSet<'_> {
    pub fn len(&self) -> usize {
        match self {
            EvalSet::Captions(v) => v.len(),
            EvalSet::Knoweval(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Greedy-decodes every image and computes the full metric suite.
/// Recognition accuracy is reported only for knowledge eval sets.
pub fn evaluate_model(
    source: &impl CaptionSource,
    set: EvalSet<'_>,
    vocab: &Vocabulary,
) -> Result<MetricsReport, EvalError> {
    if set.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    match set {
        EvalSet::Captions(examples) => {
            let pairs: Vec<EvalPair> = examples
                .iter()
                .map(|ex| {
                    Ok(EvalPair {
                        candidate: source.caption(&ex.image, vocab)?,
                        references: vec![ex.text.clone()],
                        gold_keyword: None,
                    })
                })
                .collect::<Result<_, EvalError>>()?;
            metrics_from_pairs(&pairs, false)
        }
        EvalSet::Knoweval(examples) => {
            let pairs: Vec<EvalPair> = examples
                .iter()
                .map(|ex| {
                    let keyword = KnowledgeKeyword::new(&ex.keyword_surface, 0, vocab)?;
                    Ok(EvalPair {
                        candidate: source.caption(&ex.image, vocab)?,
                        references: ex.references.clone(),
                        gold_keyword: Some(keyword),
                    })
                })
                .collect::<Result<_, EvalError>>()?;
            metrics_from_pairs(&pairs, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pair(candidate: &str, references: &[&str]) -> EvalPair {
        EvalPair {
            candidate: candidate.to_string(),
            references: references.iter().map(|r| r.to_string()).collect(),
            gold_keyword: None,
        }
    }

    #[test]
    fn bleu_identity_is_one() {
        let pairs = vec![
            pair("the cat sat on the mat", &["the cat sat on the mat"]),
            pair("a dog ran in the park", &["a dog ran in the park"]),
        ];
        let scores = bleu(&pairs, 4).unwrap();
        for s in scores {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bleu_brevity_penalty_closed_form() {
        let pairs = vec![pair("the cat sat", &["the cat sat down"])];
        let scores = bleu(&pairs, 1).unwrap();
        let expected = (1.0f64 - 4.0 / 3.0).exp();
        assert_abs_diff_eq!(scores[0], expected, epsilon = 1e-9);
        assert_abs_diff_eq!(scores[0], 0.7165, epsilon = 1e-4);
    }

    #[test]
    fn bleu_clipping_hand_count() {
        let pairs = vec![pair("the the the", &["the cat"])];
        // Clipped unigram matches: min(3, 1) = 1 of 3.
        let scores = bleu(&pairs, 1).unwrap();
        // Candidate length 3 >= closest ref length 2, so no brevity penalty.
        assert_abs_diff_eq!(scores[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bleu_rejects_empty_and_bad_n() {
        assert!(matches!(bleu(&[], 4), Err(EvalError::EmptyCorpus)));
        let p = vec![pair("a", &["a"])];
        assert!(matches!(bleu(&p, 5), Err(EvalError::BadMaxN(5))));
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let same = vec![pair("a b c", &["a b c"])];
        assert_abs_diff_eq!(rouge_l(&same).unwrap(), 1.0, epsilon = 1e-12);
        let disjoint = vec![pair("a b c", &["x y z"])];
        assert_abs_diff_eq!(rouge_l(&disjoint).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rouge_hand_lcs() {
        // LCS("a b c d", "a c d e") = 3; P = R = 3/4; F = 0.75 for any beta.
        let pairs = vec![pair("a b c d", &["a c d e"])];
        assert_abs_diff_eq!(rouge_l(&pairs).unwrap(), 0.75, epsilon = 1e-9);
    }

    #[test]
    fn cider_identity_scores_ten() {
        // Varied corpus so document frequencies stay below the corpus size.
        let pairs = vec![
            pair("a red car on the road", &["a red car on the road"]),
            pair("a blue boat on the lake", &["a blue boat on the lake"]),
            pair("a green tree near the hill", &["a green tree near the hill"]),
        ];
        let scores = cider_d_scores(&pairs).unwrap();
        for s in scores {
            assert_abs_diff_eq!(s, 10.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cider_disjoint_scores_zero() {
        let pairs = vec![
            pair("x y z w", &["a red car drives fast"]),
            pair("a blue boat sails by", &["a blue boat sails by"]),
        ];
        let scores = cider_d_scores(&pairs).unwrap();
        assert_abs_diff_eq!(scores[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cider_single_pair_is_degenerate() {
        let pairs = vec![pair("a", &["a"])];
        assert!(matches!(cider_d(&pairs), Err(EvalError::DegenerateDocumentFrequency)));
    }

    #[test]
    fn recog_acc_counts_and_monotonicity() {
        let vocab = Vocabulary::build(&["zarvik tower with a tree and a dog"], 1).unwrap();
        let kw = KnowledgeKeyword::new("zarvik tower", 0, &vocab).unwrap();
        let mk = |cand: &str| EvalPair {
            candidate: cand.to_string(),
            references: vec!["zarvik tower".to_string()],
            gold_keyword: Some(kw.clone()),
        };
        let pairs = vec![
            mk("a photo of zarvik tower"),
            mk("a photo of a tree"),
            mk("zarvik tower with a dog"),
            mk("a dog"),
        ];
        assert_abs_diff_eq!(recog_acc(&pairs).unwrap(), 0.5, epsilon = 1e-12);

        // Appending non-keyword words never decreases the score.
        let extended: Vec<EvalPair> = pairs
            .iter()
            .map(|p| EvalPair {
                candidate: format!("{} and a tree", p.candidate),
                references: p.references.clone(),
                gold_keyword: p.gold_keyword.clone(),
            })
            .collect();
        assert!(recog_acc(&extended).unwrap() >= recog_acc(&pairs).unwrap());
    }

    #[test]
    fn recog_acc_requires_keywords() {
        let pairs = vec![pair("a", &["a"])];
        assert!(matches!(recog_acc(&pairs), Err(EvalError::MissingKeyword(0))));
    }

    #[test]
    fn all_candidates_empty_scores_zero_recog() {
        let vocab = Vocabulary::build(&["tower"], 1).unwrap();
        let kw = KnowledgeKeyword::new("tower", 0, &vocab).unwrap();
        let pairs: Vec<EvalPair> = (0..3)
            .map(|_| EvalPair {
                candidate: String::new(),
                references: vec!["tower".into()],
                gold_keyword: Some(kw.clone()),
            })
            .collect();
        assert_eq!(recog_acc(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn identity_channel_maxes_bleu_and_rouge() {
        struct FirstReference;
        impl CaptionSource for FirstReference {
            fn caption(&self, image: &ImageFeatures, _vocab: &Vocabulary) -> Result<String, EvalError> {
                // The image id smuggles the reference through for this test.
                Ok(image.source_id.clone())
            }
        }
        let mk = |text: &str, id: &str| CaptionExample {
            image: ImageFeatures::new(ndarray::Array2::zeros((1, 4)), id.to_string()).unwrap(),
            reference: crate::corpus::TokenSequence::new(vec![]),
            text: text.to_string(),
        };
        let examples = vec![
            mk("a red car on the road", "a red car on the road"),
            mk("a blue boat on the lake", "a blue boat on the lake"),
            mk("a tall tree near a hill", "a tall tree near a hill"),
        ];
        let vocab = Vocabulary::build(&["x"], 1).unwrap();
        let report = evaluate_model(&FirstReference, EvalSet::Captions(&examples), &vocab).unwrap();
        assert_abs_diff_eq!(report.bleu1, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(report.bleu4, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(report.rouge_l, 1.0, epsilon = 1e-9);
        assert_eq!(report.n_examples, 3);
        assert!(report.recog_acc.is_none());
    }

    #[test]
    fn bleu_non_increasing_in_n_on_overlapping_corpus() {
        let pairs = vec![
            pair("a red car on the road", &["a red car in the road", "a red car on a road"]),
            pair("a blue boat on the lake", &["the blue boat on the lake"]),
            pair("a tall tree near a hill", &["a tall tree near the hill"]),
        ];
        let scores = bleu(&pairs, 4).unwrap();
        for w in scores.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "BLEU must be non-increasing in n: {scores:?}");
        }
    }

    proptest! {
        /// Metric reports are invariant to the order of pairs.
        #[test]
        fn order_invariance(seed in 0u64..50) {
            use rand::seq::SliceRandom;
            let base = vec![
                pair("a red car on the road", &["a red car on the road", "a car on a road"]),
                pair("a blue boat on the lake", &["the boat on the lake"]),
                pair("a tall tree near a hill", &["a tall tree near the hill"]),
                pair("a dog under a bench", &["a dog under the bench"]),
            ];
            let a = metrics_from_pairs(&base, false).unwrap();
            let mut shuffled = base.clone();
            let mut rng = crate::util::seeded_rng(seed, "shuffle");
            shuffled.shuffle(&mut rng);
            let b = metrics_from_pairs(&shuffled, false).unwrap();
            prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.cider - b.cider).abs() < 1e-12);
        }
    }
}
