//! Replay exemplar set construction: keyword filtering of the pretraining
//! corpus, per-category caps with proportional subsampling, and seeded
//! seen/unseen category splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    normalize_words, CorpusError, ImageFeatures, PretrainPair, TokenSequence, Vocabulary, UNK_ID,
};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("keyword `{0}` contains out-of-vocabulary tokens")]
    OutOfVocabKeyword(String),
    #[error("keyword `{0}` is empty after normalization")]
    EmptyKeyword(String),
    #[error("no replay exemplars found")]
    NoExemplars,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A named-entity surface form plus its token-id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeKeyword {
    pub surface: String,
    pub tokens: TokenSequence,
    pub category_id: usize,
}

impl KnowledgeKeyword {
    /// Builds a keyword from its surface form. Out-of-vocabulary keywords are
    /// rejected rather than silently mapped to `unk`.
    pub fn new(
        surface: &str,
        category_id: usize,
        vocab: &Vocabulary,
    ) -> Result<Self, ReplayError> {
        let words = normalize_words(surface);
        if words.is_empty() {
            return Err(ReplayError::EmptyKeyword(surface.to_string()));
        }
        let tokens = vocab.tokenize(surface);
        if tokens.ids.iter().any(|&id| id == UNK_ID) {
            return Err(ReplayError::OutOfVocabKeyword(surface.to_string()));
        }
        Ok(Self { surface: surface.to_string(), tokens, category_id })
    }

    /// Normalized word sequence of the surface form.
    pub fn words(&self) -> Vec<String> {
        normalize_words(&self.surface)
    }
}

/// True iff the keyword's token sequence occurs contiguously in the
/// normalized text. Matching is case-insensitive and word-boundary exact, so
/// "tower" never matches inside "towering".
pub fn detect_keyword(text: &str, keyword: &KnowledgeKeyword) -> bool {
    let words = normalize_words(text);
    let needle = keyword.words();
    crate::corpus::contains_subsequence(&words, &needle)
}

/// One replay exemplar: image features plus the keyword its source text
/// matched.
#[derive(Debug, Clone)]
pub struct ReplayExemplar {
    pub image: ImageFeatures,
    pub keyword: KnowledgeKeyword,
}

/// The replay set with its keyword list and source-image provenance.
#[derive(Debug, Clone)]
pub struct ReplaySet {
    pub exemplars: Vec<ReplayExemplar>,
    pub keyword_set: Vec<KnowledgeKeyword>,
    pub provenance: Vec<String>,
    pub seed: u64,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    /// Exemplar count per category id.
    pub fn category_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for ex in &self.exemplars {
            *counts.entry(ex.keyword.category_id).or_insert(0) += 1;
        }
        counts
    }
}

/// Scans the corpus in order and assigns each matching pair to the first
/// keyword (in list order) that its text contains. Per-category counts are
/// capped at `per_category_cap`; if the total exceeds `total_cap`, a seeded
/// subsample preserves per-category proportions up to integer rounding.
pub fn build_replay_set(
    corpus: &[PretrainPair],
    keywords: &[KnowledgeKeyword],
    per_category_cap: usize,
    total_cap: usize,
    seed: u64,
) -> Result<ReplaySet, ReplayError> {
    if keywords.is_empty() {
        return Err(ReplayError::InvalidArgument("keywords must be non-empty".into()));
    }
    if per_category_cap == 0 || total_cap == 0 {
        return Err(ReplayError::InvalidArgument("caps must be at least 1".into()));
    }

    // Category id -> indices into `corpus`, in scan order.
    let mut matched: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let keyword_words: Vec<Vec<String>> = keywords.iter().map(|k| k.words()).collect();
    for (idx, pair) in corpus.iter().enumerate() {
        let words = normalize_words(&pair.text);
        for (k, kw) in keywords.iter().enumerate() {
            if crate::corpus::contains_subsequence(&words, &keyword_words[k]) {
                let bucket = matched.entry(kw.category_id).or_default();
                if bucket.len() < per_category_cap {
                    bucket.push(idx);
                }
                break; // first matching keyword wins
            }
        }
    }

    let total: usize = matched.values().map(Vec::len).sum();
    if total == 0 {
        return Err(ReplayError::NoExemplars);
    }

    if total > total_cap {
        subsample_proportional(&mut matched, total, total_cap, seed);
    }

    // Deterministic output order: original corpus scan order.
    let mut chosen: Vec<(usize, usize)> = Vec::new(); // (corpus idx, category)
    for (cat, idxs) in &matched {
        for &i in idxs {
            chosen.push((i, *cat));
        }
    }
    chosen.sort_unstable();

    let by_category: BTreeMap<usize, &KnowledgeKeyword> =
        keywords.iter().map(|k| (k.category_id, k)).collect();
    let mut exemplars = Vec::with_capacity(chosen.len());
    let mut provenance = Vec::with_capacity(chosen.len());
    for (idx, cat) in chosen {
        let pair = &corpus[idx];
        exemplars.push(ReplayExemplar {
            image: pair.image.clone(),
            keyword: (*by_category[&cat]).clone(),
        });
        provenance.push(pair.image.source_id.clone());
    }

    Ok(ReplaySet { exemplars, keyword_set: keywords.to_vec(), provenance, seed })
}

/// Largest-remainder allocation of `total_cap` across categories, then a
/// seeded uniform without-replacement pick inside each category.
fn subsample_proportional(
    matched: &mut BTreeMap<usize, Vec<usize>>,
    total: usize,
    total_cap: usize,
    seed: u64,
) {
    let cats: Vec<usize> = matched.keys().copied().collect();
    let mut quota: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0usize;
    for &cat in &cats {
        let n = matched[&cat].len();
        let exact = n as f64 * total_cap as f64 / total as f64;
        let floor = exact.floor() as usize;
        let floor = floor.min(n);
        quota.insert(cat, floor);
        assigned += floor;
        remainders.push((exact - floor as f64, cat));
    }
    // Hand out the remaining slots to the largest fractional remainders;
    // ties break on category id for determinism.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = total_cap.saturating_sub(assigned);
    for (_, cat) in remainders {
        if left == 0 {
            break;
        }
        if quota[&cat] < matched[&cat].len() {
            *quota.get_mut(&cat).unwrap() += 1;
            left -= 1;
        }
    }

    let mut rng = seeded_rng(seed, "replay-subsample");
    for &cat in &cats {
        let want = quota[&cat];
        let bucket = matched.get_mut(&cat).unwrap();
        if want < bucket.len() {
            let mut order: Vec<usize> = (0..bucket.len()).collect();
            order.shuffle(&mut rng);
            let mut keep: Vec<usize> = order[..want].iter().map(|&i| bucket[i]).collect();
            keep.sort_unstable();
            *bucket = keep;
        }
    }
}

/// Seeded partition of keywords into (seen, unseen); the unseen side gets
/// `round(unseen_fraction * M)` categories.
pub fn split_categories(
    keywords: &[KnowledgeKeyword],
    unseen_fraction: f64,
    seed: u64,
) -> Result<(Vec<KnowledgeKeyword>, Vec<KnowledgeKeyword>), ReplayError> {
    if keywords.len() < 2 {
        return Err(ReplayError::InvalidArgument("need at least 2 keywords to split".into()));
    }
    let m = keywords.len();
    let unseen_n = (unseen_fraction * m as f64).round() as usize;
    if unseen_n == 0 || unseen_n >= m {
        return Err(ReplayError::InvalidArgument(format!(
            "unseen_fraction {unseen_fraction} yields an empty side for {m} keywords"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = seeded_rng(seed, "category-split");
    order.shuffle(&mut rng);
    let mut unseen_idx: Vec<usize> = order[..unseen_n].to_vec();
    let mut seen_idx: Vec<usize> = order[unseen_n..].to_vec();
    seen_idx.sort_unstable();
    unseen_idx.sort_unstable();
    let seen = seen_idx.into_iter().map(|i| keywords[i].clone()).collect();
    let unseen = unseen_idx.into_iter().map(|i| keywords[i].clone()).collect();
    Ok((seen, unseen))
}

// ---------------------------------------------------------------------------
// Persistence: JSON Lines exemplars plus a JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub image_id: String,
    pub keyword: String,
    pub category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplaySidecar {
    pub keyword_set: Vec<ReplayKeywordEntry>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayKeywordEntry {
    pub surface: String,
    pub category_id: usize,
}

/// Writes `<stem>.jsonl` with one exemplar per line and `<stem>.meta.json`
/// with the keyword set and seed.
pub fn save_replay_set(dir: &Path, stem: &str, set: &ReplaySet) -> Result<(), ReplayError> {
    let records: Vec<ReplayRecord> = set
        .exemplars
        .iter()
        .map(|ex| ReplayRecord {
            image_id: ex.image.source_id.clone(),
            keyword: ex.keyword.surface.clone(),
            category_id: ex.keyword.category_id,
        })
        .collect();
    crate::corpus::save_jsonl(&dir.join(format!("{stem}.jsonl")), &records)?;
    let sidecar = ReplaySidecar {
        keyword_set: set
            .keyword_set
            .iter()
            .map(|k| ReplayKeywordEntry {
                surface: k.surface.clone(),
                category_id: k.category_id,
            })
            .collect(),
        seed: set.seed,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("serializable sidecar");
    std::fs::write(dir.join(format!("{stem}.meta.json")), json).map_err(|e| {
        ReplayError::Corpus(CorpusError::Io { path: dir.display().to_string(), source: e })
    })?;
    Ok(())
}

/// Reconstructs a replay set from its records, resolving image ids against
/// the given pretraining pairs.
pub fn load_replay_set(
    dir: &Path,
    stem: &str,
    corpus: &[PretrainPair],
    vocab: &Vocabulary,
) -> Result<ReplaySet, ReplayError> {
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let raw = std::fs::read_to_string(&jsonl_path).map_err(|e| {
        ReplayError::Corpus(CorpusError::Io { path: jsonl_path.display().to_string(), source: e })
    })?;
    let meta_path = dir.join(format!("{stem}.meta.json"));
    let meta_raw = std::fs::read_to_string(&meta_path).map_err(|e| {
        ReplayError::Corpus(CorpusError::Io { path: meta_path.display().to_string(), source: e })
    })?;
    let sidecar: ReplaySidecar = serde_json::from_str(&meta_raw)
        .map_err(|e| ReplayError::InvalidArgument(format!("bad sidecar: {e}")))?;

    let keyword_set: Vec<KnowledgeKeyword> = sidecar
        .keyword_set
        .iter()
        .map(|e| KnowledgeKeyword::new(&e.surface, e.category_id, vocab))
        .collect::<Result<_, _>>()?;

    let by_id: BTreeMap<&str, &PretrainPair> =
        corpus.iter().map(|p| (p.image.source_id.as_str(), p)).collect();
    let mut exemplars = Vec::new();
    let mut provenance = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let rec: ReplayRecord = serde_json::from_str(line).map_err(|e| {
            ReplayError::Corpus(CorpusError::Malformed {
                path: jsonl_path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })
        })?;
        let pair = by_id.get(rec.image_id.as_str()).ok_or_else(|| {
            ReplayError::InvalidArgument(format!("unknown image_id `{}`", rec.image_id))
        })?;
        let keyword = KnowledgeKeyword::new(&rec.keyword, rec.category_id, vocab)?;
        exemplars.push(ReplayExemplar { image: pair.image.clone(), keyword });
        provenance.push(rec.image_id);
    }
    Ok(ReplaySet { exemplars, keyword_set, provenance, seed: sidecar.seed })
}
