//! Deterministic generator of a miniature data regime for knowledge-retention
//! experiments: a noisy knowledge-bearing pretraining corpus, an entity-free
//! generic captioning set (the generic-bias source) and a knowledge eval set
//! with seen/unseen entity splits.
//!
//! Entities carry distinctive feature signatures built from a shared
//! superordinate direction plus a per-entity direction, so a small model can
//! both learn per-entity names in pretraining and generalize the
//! name-suppressing generic style across entities during fine-tuning.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    load_dataset, normalize_words, save_jsonl, CaptionExample, CorpusError, DatasetKind,
    ImageFeatures, ImageTextRecord, KnowevalExample, KnowevalRecord, LoadedDataset, PretrainPair,
    Vocabulary,
};
use crate::replay::{KnowledgeKeyword, ReplayError};
use crate::util::{fnv1a64, seeded_rng};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: field `{field}`: {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("world is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Number of entity categories (split into seen/unseen).
    pub num_entities: usize,
    /// Generic object vocabulary size.
    pub num_objects: usize,
    /// Number of superordinate words entities collapse to under generic
    /// captioning ("tower", "castle", ...).
    pub num_superordinates: usize,
    /// Pretraining images per entity.
    pub images_per_entity: usize,
    /// Plain object images in the pretraining corpus and the generic training
    /// set.
    pub generic_images: usize,
    /// Probability that a pretraining pair's text is swapped with another
    /// image's text.
    pub noise_rate: f64,
    /// Dimension of region feature vectors.
    pub feature_dim: usize,
    /// Fraction of entity categories held out of the replay data.
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_entities: 40,
            num_objects: 60,
            num_superordinates: 8,
            images_per_entity: 50,
            generic_images: 2000,
            noise_rate: 0.15,
            feature_dim: 32,
            unseen_fraction: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |field: &'static str, msg: String| Err(WorldError::InvalidConfig { field, msg });
        if self.num_entities < 2 {
            return err("num_entities", format!("must be at least 2, got {}", self.num_entities));
        }
        if self.num_objects == 0 {
            return err("num_objects", "must be at least 1".into());
        }
        if self.num_superordinates == 0 {
            return err("num_superordinates", "must be at least 1".into());
        }
        if self.images_per_entity == 0 {
            return err("images_per_entity", "must be at least 1".into());
        }
        if self.generic_images == 0 {
            return err("generic_images", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return err("noise_rate", format!("must lie in [0, 1), got {}", self.noise_rate));
        }
        if self.feature_dim < 4 {
            return err("feature_dim", format!("must be at least 4, got {}", self.feature_dim));
        }
        let m = self.num_entities as f64;
        let unseen = (self.unseen_fraction * m).round();
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0)
            || unseen < 1.0
            || unseen >= m
        {
            return err(
                "unseen_fraction",
                format!("{} leaves an empty seen or unseen side", self.unseen_fraction),
            );
        }
        Ok(())
    }

    /// Eval images generated per entity.
    pub fn eval_images_per_entity(&self) -> usize {
        3
    }

    /// Generically captioned entity images per seen entity in the fine-tuning
    /// set.
    pub fn generic_entity_images(&self) -> usize {
        (self.images_per_entity / 5).max(2)
    }
}

const SUPERORDINATE_POOL: [&str; 12] = [
    "tower", "castle", "bridge", "museum", "statue", "temple", "palace", "arena", "garden",
    "fountain", "harbor", "cathedral",
];

const OBJECT_POOL: [&str; 72] = [
    "tree", "car", "dog", "bench", "boat", "lamp", "bird", "fence", "flag", "cloud", "bus",
    "bike", "rock", "river", "hill", "road", "sign", "roof", "door", "window", "wall", "crowd",
    "horse", "cat", "flower", "bush", "path", "stair", "tent", "kite", "train", "truck", "plane",
    "field", "lake", "pond", "gate", "pole", "wire", "light", "chair", "table", "umbrella",
    "balloon", "cart", "scooter", "van", "bridge-rail", "booth", "stall", "basket", "barrel",
    "crate", "ladder", "rope", "anchor", "buoy", "dock", "pier", "sail", "mast", "wheel", "bell",
    "clock", "banner", "post", "arch", "step", "rail", "hedge", "lawn", "fern",
];

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "han", "jel", "kor", "lim", "mun", "nar", "pol", "qui", "ros",
    "tev", "vum", "wex", "yol", "zan", "bri",
];

/// Weight of the shared superordinate direction inside an entity signature.
const SUPER_COMPONENT: f64 = 0.35;
/// Standard deviation of per-image feature jitter.
const FEATURE_JITTER: f64 = 0.05;

fn synth_word(rng: &mut ChaCha20Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

fn unit_vector(rng: &mut ChaCha20Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Derived word lists and feature vectors of a world. Fully determined by the
/// world config, so it can be rebuilt from a manifest.
#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    pub feature_dim: usize,
    seed: u64,
    pub entity_names: Vec<String>,
    pub superordinate_words: Vec<String>,
    pub object_words: Vec<String>,
    /// Superordinate index per entity.
    pub superordinate_of: Vec<usize>,
    signatures: Vec<Array1<f64>>,
    object_vectors: Vec<Array1<f64>>,
    name_to_entity: BTreeMap<String, usize>,
}

impl FeatureCatalog {
    pub fn build(cfg: &WorldConfig) -> Self {
        let mut rng = seeded_rng(cfg.seed, "catalog");

        let mut superordinate_words: Vec<String> = SUPERORDINATE_POOL
            .iter()
            .take(cfg.num_superordinates)
            .map(|s| s.to_string())
            .collect();
        while superordinate_words.len() < cfg.num_superordinates {
            let w = synth_word(&mut rng);
            if !superordinate_words.contains(&w) {
                superordinate_words.push(w);
            }
        }

        let mut object_words: Vec<String> =
            OBJECT_POOL.iter().take(cfg.num_objects).map(|s| s.to_string()).collect();
        while object_words.len() < cfg.num_objects {
            let w = synth_word(&mut rng);
            if !object_words.contains(&w) && !superordinate_words.contains(&w) {
                object_words.push(w);
            }
        }

        // Words that must never collide with entity-name words.
        let mut reserved: HashSet<String> = superordinate_words.iter().cloned().collect();
        reserved.extend(object_words.iter().cloned());
        for w in ["a", "an", "of", "the", "with", "near", "and", "this", "is", "photo", "image", "picture"] {
            reserved.insert(w.to_string());
        }

        let mut entity_names = Vec::with_capacity(cfg.num_entities);
        let mut used_names: HashSet<String> = HashSet::new();
        for e in 0..cfg.num_entities {
            loop {
                let words = if e % 2 == 0 {
                    vec![synth_word(&mut rng)]
                } else {
                    vec![synth_word(&mut rng), synth_word(&mut rng)]
                };
                if words.iter().any(|w| reserved.contains(w)) {
                    continue;
                }
                let name = words.join(" ");
                if used_names.contains(&name) {
                    continue;
                }
                for w in &words {
                    reserved.insert(w.clone());
                }
                used_names.insert(name.clone());
                entity_names.push(name);
                break;
            }
        }

        let super_dirs: Vec<Array1<f64>> =
            (0..cfg.num_superordinates).map(|_| unit_vector(&mut rng, cfg.feature_dim)).collect();
        let superordinate_of: Vec<usize> =
            (0..cfg.num_entities).map(|e| e % cfg.num_superordinates).collect();
        let signatures: Vec<Array1<f64>> = (0..cfg.num_entities)
            .map(|e| {
                let unique = unit_vector(&mut rng, cfg.feature_dim);
                let mixed = &super_dirs[superordinate_of[e]] * SUPER_COMPONENT.sqrt()
                    + &unique * (1.0 - SUPER_COMPONENT).sqrt();
                let norm = mixed.dot(&mixed).sqrt();
                mixed / norm
            })
            .collect();
        let object_vectors: Vec<Array1<f64>> =
            (0..cfg.num_objects).map(|_| unit_vector(&mut rng, cfg.feature_dim)).collect();

        let name_to_entity =
            entity_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();

        Self {
            feature_dim: cfg.feature_dim,
            seed: cfg.seed,
            entity_names,
            superordinate_words,
            object_words,
            superordinate_of,
            signatures,
            object_vectors,
            name_to_entity,
        }
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.name_to_entity.get(name).copied()
    }

    pub fn superordinate_word(&self, entity: usize) -> &str {
        &self.superordinate_words[self.superordinate_of[entity]]
    }

    /// Renders the region matrix for a record: the entity signature (if any)
    /// followed by the object vectors, each with seeded per-image jitter.
    pub fn render(
        &self,
        entity: Option<&str>,
        objects: &[usize],
        image_id: &str,
    ) -> Result<ImageFeatures, WorldError> {
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(objects.len() + 1);
        if let Some(name) = entity {
            let idx = self.entity_index(name).ok_or_else(|| {
                WorldError::Inconsistent(format!("{image_id}: unknown entity `{name}`"))
            })?;
            rows.push(self.signatures[idx].clone());
        }
        for &o in objects {
            let vec = self.object_vectors.get(o).ok_or_else(|| {
                WorldError::Inconsistent(format!("{image_id}: object index {o} out of range"))
            })?;
            rows.push(vec.clone());
        }
        if rows.is_empty() {
            return Err(WorldError::Inconsistent(format!("{image_id}: image has no regions")));
        }

        let mut jitter_rng = ChaCha20Rng::seed_from_u64(self.image_stream(image_id));
        let mut regions = Array2::zeros((rows.len(), self.feature_dim));
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let noise: f64 = jitter_rng.sample(StandardNormal);
                regions[[r, c]] = v + FEATURE_JITTER * noise;
            }
        }
        ImageFeatures::new(regions, image_id.to_string()).map_err(WorldError::from)
    }

    fn image_stream(&self, image_id: &str) -> u64 {
        let mut bytes = Vec::with_capacity(8 + image_id.len());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(image_id.as_bytes());
        fnv1a64(&bytes)
    }
}

fn object_phrase(words: &[&str]) -> String {
    let parts: Vec<String> = words.iter().map(|w| format!("a {w}")).collect();
    parts.join(" and ")
}

fn entity_text(variant: usize, name: &str, objp: &str) -> String {
    match variant % 3 {
        0 => format!("a photo of {name} with {objp}"),
        1 => format!("an image of {name} near {objp}"),
        _ => format!("this is {name} with {objp}"),
    }
}

fn object_text(variant: usize, objp: &str) -> String {
    match variant % 3 {
        0 => format!("a photo of {objp}"),
        1 => format!("an image of {objp}"),
        _ => format!("a picture of {objp}"),
    }
}

/// A keyword plus whether its category may appear in replay data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledKeyword {
    pub keyword: KnowledgeKeyword,
    pub seen: bool,
}

/// Everything one experiment needs: records for serialization, the catalog
/// for feature rendering, the vocabulary and the labeled keyword list.
#[derive(Debug, Clone)]
pub struct WorldBundle {
    pub config: WorldConfig,
    pub catalog: FeatureCatalog,
    pub vocab: Vocabulary,
    pub keywords: Vec<LabeledKeyword>,
    pub pretrain_records: Vec<ImageTextRecord>,
    pub pretrain_noisy: Vec<bool>,
    pub generic_train_records: Vec<ImageTextRecord>,
    pub generic_val_records: Vec<ImageTextRecord>,
    pub knoweval_seen_records: Vec<KnowevalRecord>,
    pub knoweval_unseen_records: Vec<KnowevalRecord>,
}

fn sample_objects(rng: &mut ChaCha20Rng, num_objects: usize, lo: usize, hi: usize) -> Vec<usize> {
    let hi = hi.min(num_objects).max(1);
    let lo = lo.min(hi);
    let n = rng.random_range(lo..=hi);
    let mut idx = rand::seq::index::sample(rng, num_objects, n).into_vec();
    // Canonical order: ascending object id, mirrored by the text templates,
    // so references are predictable from the feature set.
    idx.sort_unstable();
    idx
}

/// Generates the full world. Output is a pure function of the config.
pub fn generate_world(cfg: &WorldConfig) -> Result<WorldBundle, WorldError> {
    cfg.validate()?;
    let catalog = FeatureCatalog::build(cfg);

    // Pretraining records: entity images then plain object images.
    let mut rng = seeded_rng(cfg.seed, "pretrain-data");
    let mut pretrain_records = Vec::new();
    for (e, name) in catalog.entity_names.iter().enumerate() {
        for i in 0..cfg.images_per_entity {
            let objects = sample_objects(&mut rng, cfg.num_objects, 1, 3);
            let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
            let variant = rng.random_range(0..3usize);
            pretrain_records.push(ImageTextRecord {
                image_id: format!("ent{e:03}-{i:04}"),
                objects,
                entity: Some(name.clone()),
                text: entity_text(variant, name, &object_phrase(&words)),
            });
        }
    }
    for g in 0..cfg.generic_images {
        let objects = sample_objects(&mut rng, cfg.num_objects, 2, 3);
        let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
        let variant = rng.random_range(0..3usize);
        pretrain_records.push(ImageTextRecord {
            image_id: format!("gen-{g:05}"),
            objects,
            entity: None,
            text: object_text(variant, &object_phrase(&words)),
        });
    }

    // Noisy correspondence: with probability `noise_rate`, replace a pair's
    // text with the original text of a uniformly sampled different image.
    let mut noise_rng = seeded_rng(cfg.seed, "noise");
    let originals: Vec<String> = pretrain_records.iter().map(|r| r.text.clone()).collect();
    let n = pretrain_records.len();
    let mut pretrain_noisy = vec![false; n];
    for i in 0..n {
        if noise_rng.random::<f64>() < cfg.noise_rate {
            let mut j = noise_rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            pretrain_records[i].text = originals[j].clone();
            pretrain_noisy[i] = true;
        }
    }

    // Keyword split decides which entities may appear in replay data; the
    // generic fine-tuning sets cover only seen entities.
    let seen_flags = {
        // Indices are split on a dedicated stream derived from the seed.
        let m = cfg.num_entities;
        let unseen_n = (cfg.unseen_fraction * m as f64).round() as usize;
        let mut order: Vec<usize> = (0..m).collect();
        use rand::seq::SliceRandom;
        let mut split_rng = seeded_rng(cfg.seed, "category-split");
        order.shuffle(&mut split_rng);
        let unseen: HashSet<usize> = order[..unseen_n].iter().copied().collect();
        (0..m).map(|e| !unseen.contains(&e)).collect::<Vec<bool>>()
    };

    // Generic fine-tuning sets: seen-entity images captioned generically
    // (name replaced by its superordinate word) plus plain object images.
    let mut gen_rng = seeded_rng(cfg.seed, "generic-data");
    let mut generic_train_records = Vec::new();
    let mut generic_val_records = Vec::new();
    for (e, name) in catalog.entity_names.iter().enumerate() {
        if !seen_flags[e] {
            continue;
        }
        let superordinate = format!("the {}", catalog.superordinate_word(e));
        for i in 0..cfg.generic_entity_images() {
            let objects = sample_objects(&mut gen_rng, cfg.num_objects, 1, 3);
            let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
            let variant = gen_rng.random_range(0..3usize);
            generic_train_records.push(ImageTextRecord {
                image_id: format!("egen{e:03}-{i:02}"),
                objects,
                entity: Some(name.clone()),
                text: entity_text(variant, &superordinate, &object_phrase(&words)),
            });
        }
        let objects = sample_objects(&mut gen_rng, cfg.num_objects, 1, 3);
        let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
        let variant = gen_rng.random_range(0..3usize);
        generic_val_records.push(ImageTextRecord {
            image_id: format!("egval{e:03}-00"),
            objects,
            entity: Some(name.clone()),
            text: entity_text(variant, &superordinate, &object_phrase(&words)),
        });
    }
    for g in 0..cfg.generic_images {
        let objects = sample_objects(&mut gen_rng, cfg.num_objects, 2, 3);
        let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
        let variant = gen_rng.random_range(0..3usize);
        generic_train_records.push(ImageTextRecord {
            image_id: format!("gtrn-{g:05}"),
            objects,
            entity: None,
            text: object_text(variant, &object_phrase(&words)),
        });
    }
    let val_objects = (cfg.generic_images / 5).max(16);
    for g in 0..val_objects {
        let objects = sample_objects(&mut gen_rng, cfg.num_objects, 2, 3);
        let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
        let variant = gen_rng.random_range(0..3usize);
        generic_val_records.push(ImageTextRecord {
            image_id: format!("gval-{g:04}"),
            objects,
            entity: None,
            text: object_text(variant, &object_phrase(&words)),
        });
    }

    // Knowledge eval sets: fresh images per entity, three knowledge-bearing
    // references each (one per template), keyword present in all of them.
    let mut eval_rng = seeded_rng(cfg.seed, "knoweval-data");
    let mut knoweval_seen_records = Vec::new();
    let mut knoweval_unseen_records = Vec::new();
    for (e, name) in catalog.entity_names.iter().enumerate() {
        for j in 0..cfg.eval_images_per_entity() {
            let objects = sample_objects(&mut eval_rng, cfg.num_objects, 2, 2);
            let words: Vec<&str> = objects.iter().map(|&o| catalog.object_words[o].as_str()).collect();
            let objp = object_phrase(&words);
            let record = KnowevalRecord {
                image_id: format!("eval{e:03}-{j}"),
                objects,
                entity: name.clone(),
                keyword: name.clone(),
                references: (0..3).map(|v| entity_text(v, name, &objp)).collect(),
            };
            if seen_flags[e] {
                knoweval_seen_records.push(record);
            } else {
                knoweval_unseen_records.push(record);
            }
        }
    }

    // Vocabulary over every text in the world.
    let mut all_texts: Vec<&str> = Vec::new();
    all_texts.extend(pretrain_records.iter().map(|r| r.text.as_str()));
    all_texts.extend(generic_train_records.iter().map(|r| r.text.as_str()));
    all_texts.extend(generic_val_records.iter().map(|r| r.text.as_str()));
    for r in knoweval_seen_records.iter().chain(&knoweval_unseen_records) {
        all_texts.extend(r.references.iter().map(String::as_str));
    }
    let vocab = Vocabulary::build(&all_texts, 1)?;

    let keywords: Vec<LabeledKeyword> = catalog
        .entity_names
        .iter()
        .enumerate()
        .map(|(e, name)| {
            KnowledgeKeyword::new(name, e, &vocab)
                .map(|keyword| LabeledKeyword { keyword, seen: seen_flags[e] })
        })
        .collect::<Result<_, _>>()?;

    let bundle = WorldBundle {
        config: cfg.clone(),
        catalog,
        vocab,
        keywords,
        pretrain_records,
        pretrain_noisy,
        generic_train_records,
        generic_val_records,
        knoweval_seen_records,
        knoweval_unseen_records,
    };
    bundle.validate()?;
    Ok(bundle)
}

impl WorldBundle {
    pub fn seen_keywords(&self) -> Vec<KnowledgeKeyword> {
        self.keywords.iter().filter(|k| k.seen).map(|k| k.keyword.clone()).collect()
    }

    pub fn unseen_keywords(&self) -> Vec<KnowledgeKeyword> {
        self.keywords.iter().filter(|k| !k.seen).map(|k| k.keyword.clone()).collect()
    }

    pub fn pretrain_pairs(&self) -> Result<Vec<PretrainPair>, WorldError> {
        self.pretrain_records
            .iter()
            .zip(&self.pretrain_noisy)
            .map(|(r, &noisy)| {
                let image =
                    self.catalog.render(r.entity.as_deref(), &r.objects, &r.image_id)?;
                Ok(PretrainPair { image, text: r.text.clone(), is_noisy: noisy })
            })
            .collect()
    }

    fn captions(&self, records: &[ImageTextRecord]) -> Result<Vec<CaptionExample>, WorldError> {
        records
            .iter()
            .map(|r| {
                let image =
                    self.catalog.render(r.entity.as_deref(), &r.objects, &r.image_id)?;
                Ok(CaptionExample {
                    image,
                    reference: self.vocab.tokenize(&r.text),
                    text: r.text.clone(),
                })
            })
            .collect()
    }

    pub fn generic_train(&self) -> Result<Vec<CaptionExample>, WorldError> {
        self.captions(&self.generic_train_records)
    }

    pub fn generic_val(&self) -> Result<Vec<CaptionExample>, WorldError> {
        self.captions(&self.generic_val_records)
    }

    fn knoweval(&self, records: &[KnowevalRecord]) -> Result<Vec<KnowevalExample>, WorldError> {
        records
            .iter()
            .map(|r| {
                let image = self.catalog.render(Some(&r.entity), &r.objects, &r.image_id)?;
                Ok(KnowevalExample {
                    image,
                    keyword_surface: r.keyword.clone(),
                    references: r.references.clone(),
                })
            })
            .collect()
    }

    pub fn knoweval_seen(&self) -> Result<Vec<KnowevalExample>, WorldError> {
        self.knoweval(&self.knoweval_seen_records)
    }

    pub fn knoweval_unseen(&self) -> Result<Vec<KnowevalExample>, WorldError> {
        self.knoweval(&self.knoweval_unseen_records)
    }

    /// Split hygiene and construction invariants.
    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |msg: String| Err(WorldError::Inconsistent(msg));

        // Disjoint image ids between training and eval sets.
        let train_ids: HashSet<&str> = self
            .pretrain_records
            .iter()
            .map(|r| r.image_id.as_str())
            .chain(self.generic_train_records.iter().map(|r| r.image_id.as_str()))
            .collect();
        for r in &self.generic_val_records {
            if train_ids.contains(r.image_id.as_str()) {
                return fail(format!("generic_val image {} appears in training data", r.image_id));
            }
        }
        for r in self.knoweval_seen_records.iter().chain(&self.knoweval_unseen_records) {
            if train_ids.contains(r.image_id.as_str()) {
                return fail(format!("knoweval image {} appears in training data", r.image_id));
            }
        }

        // Seen and unseen keyword categories are disjoint and exhaustive.
        let seen: HashSet<usize> =
            self.keywords.iter().filter(|k| k.seen).map(|k| k.keyword.category_id).collect();
        let unseen: HashSet<usize> =
            self.keywords.iter().filter(|k| !k.seen).map(|k| k.keyword.category_id).collect();
        if !seen.is_disjoint(&unseen) || seen.len() + unseen.len() != self.config.num_entities {
            return fail("seen/unseen split is not a partition".into());
        }

        // No entity name (seen or unseen) appears in any generic text.
        let name_words: Vec<Vec<String>> =
            self.keywords.iter().map(|k| normalize_words(&k.keyword.surface)).collect();
        for r in self.generic_train_records.iter().chain(&self.generic_val_records) {
            let words = normalize_words(&r.text);
            for nw in &name_words {
                if crate::corpus::contains_subsequence(&words, nw) {
                    return fail(format!("entity name leaked into generic text `{}`", r.text));
                }
            }
        }

        // Every knoweval reference contains the record's keyword.
        for r in self.knoweval_seen_records.iter().chain(&self.knoweval_unseen_records) {
            let kw = normalize_words(&r.keyword);
            for reference in &r.references {
                if !crate::corpus::contains_subsequence(&normalize_words(reference), &kw) {
                    return fail(format!(
                        "knoweval reference `{reference}` lacks keyword `{}`",
                        r.keyword
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Summary statistics of a generated bundle.
#[derive(Debug, Clone, Serialize)]
pub struct WorldStats {
    pub pretrain_size: usize,
    pub noise_fraction: f64,
    /// Pretraining images per entity, by entity name.
    pub per_entity_image_counts: Vec<(String, usize)>,
    /// Keyword occurrences in pretraining texts (after noise), by entity name.
    pub per_entity_text_mentions: Vec<(String, usize)>,
    /// Mean knoweval reference length in tokens.
    pub mean_reference_length: f64,
}

pub fn world_stats(bundle: &WorldBundle) -> WorldStats {
    let noisy = bundle.pretrain_noisy.iter().filter(|&&b| b).count();
    let mut image_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &bundle.pretrain_records {
        if let Some(name) = &r.entity {
            *image_counts.entry(name.as_str()).or_insert(0) += 1;
        }
    }
    let mut mention_counts: Vec<(String, usize)> = Vec::new();
    for lk in &bundle.keywords {
        let words = normalize_words(&lk.keyword.surface);
        let count = bundle
            .pretrain_records
            .iter()
            .filter(|r| crate::corpus::contains_subsequence(&normalize_words(&r.text), &words))
            .count();
        mention_counts.push((lk.keyword.surface.clone(), count));
    }
    let mut ref_tokens = 0usize;
    let mut ref_count = 0usize;
    for r in bundle.knoweval_seen_records.iter().chain(&bundle.knoweval_unseen_records) {
        for reference in &r.references {
            ref_tokens += normalize_words(reference).len();
            ref_count += 1;
        }
    }
    WorldStats {
        pretrain_size: bundle.pretrain_records.len(),
        noise_fraction: noisy as f64 / bundle.pretrain_records.len().max(1) as f64,
        per_entity_image_counts: bundle
            .catalog
            .entity_names
            .iter()
            .map(|n| (n.clone(), image_counts.get(n.as_str()).copied().unwrap_or(0)))
            .collect(),
        per_entity_text_mentions: mention_counts,
        mean_reference_length: ref_tokens as f64 / ref_count.max(1) as f64,
    }
}

// ---------------------------------------------------------------------------
// World persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WorldManifest {
    config: WorldConfig,
    keywords: Vec<ManifestKeyword>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestKeyword {
    surface: String,
    category_id: usize,
    seen: bool,
}

/// Writes the world as JSON Lines datasets plus a manifest and the
/// vocabulary. Byte-identical for identical configs.
pub fn write_world(dir: &Path, bundle: &WorldBundle) -> Result<(), WorldError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        WorldError::Corpus(CorpusError::Io { path: dir.display().to_string(), source: e })
    })?;
    let manifest = WorldManifest {
        config: bundle.config.clone(),
        keywords: bundle
            .keywords
            .iter()
            .map(|k| ManifestKeyword {
                surface: k.keyword.surface.clone(),
                category_id: k.keyword.category_id,
                seen: k.seen,
            })
            .collect(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(dir.join("manifest.json"), manifest_json).map_err(|e| {
        WorldError::Corpus(CorpusError::Io { path: dir.display().to_string(), source: e })
    })?;
    bundle.vocab.save(&dir.join("vocab.json"))?;
    save_jsonl(&dir.join("pretrain.jsonl"), &bundle.pretrain_records)?;
    save_jsonl(&dir.join("generic_train.jsonl"), &bundle.generic_train_records)?;
    save_jsonl(&dir.join("generic_val.jsonl"), &bundle.generic_val_records)?;
    save_jsonl(&dir.join("knoweval_seen.jsonl"), &bundle.knoweval_seen_records)?;
    save_jsonl(&dir.join("knoweval_unseen.jsonl"), &bundle.knoweval_unseen_records)?;
    Ok(())
}

/// Loads a world directory. The catalog is rebuilt from the manifest config;
/// noise flags are not recoverable from disk and load as `false`.
pub fn load_world(dir: &Path) -> Result<WorldBundle, WorldError> {
    let manifest_raw = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
        WorldError::Corpus(CorpusError::Io { path: dir.display().to_string(), source: e })
    })?;
    let manifest: WorldManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| WorldError::Inconsistent(format!("bad manifest: {e}")))?;
    manifest.config.validate()?;
    let catalog = FeatureCatalog::build(&manifest.config);
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;

    for mk in &manifest.keywords {
        match catalog.entity_index(&mk.surface) {
            Some(idx) if idx == mk.category_id => {}
            _ => {
                return Err(WorldError::Inconsistent(format!(
                    "manifest keyword `{}` does not match the catalog derived from the config",
                    mk.surface
                )))
            }
        }
    }
    let keywords = manifest
        .keywords
        .iter()
        .map(|mk| {
            KnowledgeKeyword::new(&mk.surface, mk.category_id, &vocab)
                .map(|keyword| LabeledKeyword { keyword, seen: mk.seen })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let pretrain_records = match load_dataset(&dir.join("pretrain.jsonl"), DatasetKind::Pretrain)? {
        LoadedDataset::Pretrain(v) => v,
        _ => unreachable!(),
    };
    let generic_train_records =
        match load_dataset(&dir.join("generic_train.jsonl"), DatasetKind::Caption)? {
            LoadedDataset::Caption(v) => v,
            _ => unreachable!(),
        };
    let generic_val_records =
        match load_dataset(&dir.join("generic_val.jsonl"), DatasetKind::Caption)? {
            LoadedDataset::Caption(v) => v,
            _ => unreachable!(),
        };
    let knoweval_seen_records =
        match load_dataset(&dir.join("knoweval_seen.jsonl"), DatasetKind::Knoweval)? {
            LoadedDataset::Knoweval(v) => v,
            _ => unreachable!(),
        };
    let knoweval_unseen_records =
        match load_dataset(&dir.join("knoweval_unseen.jsonl"), DatasetKind::Knoweval)? {
            LoadedDataset::Knoweval(v) => v,
            _ => unreachable!(),
        };

    let noisy = vec![false; pretrain_records.len()];
    let bundle = WorldBundle {
        config: manifest.config,
        catalog,
        vocab,
        keywords,
        pretrain_records,
        pretrain_noisy: noisy,
        generic_train_records,
        generic_val_records,
        knoweval_seen_records,
        knoweval_unseen_records,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn small_config() -> WorldConfig {
        WorldConfig {
            num_entities: 6,
            num_objects: 12,
            num_superordinates: 3,
            images_per_entity: 8,
            generic_images: 40,
            noise_rate: 0.1,
            feature_dim: 8,
            unseen_fraction: 0.5,
            seed: 21,
        }
    }

    #[test]
    fn zero_noise_rate_marks_nothing_noisy() {
        let cfg = WorldConfig { noise_rate: 0.0, ..small_config() };
        let bundle = generate_world(&cfg).unwrap();
        assert!(bundle.pretrain_noisy.iter().all(|&b| !b));
        assert_eq!(world_stats(&bundle).noise_fraction, 0.0);
    }

    #[test]
    fn generation_is_deterministic_byte_identical() {
        let cfg = small_config();
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        let da = tempdir().unwrap();
        let db = tempdir().unwrap();
        write_world(da.path(), &a).unwrap();
        write_world(db.path(), &b).unwrap();
        for name in [
            "manifest.json",
            "vocab.json",
            "pretrain.jsonl",
            "generic_train.jsonl",
            "generic_val.jsonl",
            "knoweval_seen.jsonl",
            "knoweval_unseen.jsonl",
        ] {
            let x = std::fs::read(da.path().join(name)).unwrap();
            let y = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(x, y, "file {name} differs between identical configs");
        }
    }

    #[test]
    fn noisy_fraction_concentrates_around_rate() {
        let cfg = WorldConfig {
            num_entities: 40,
            num_objects: 20,
            num_superordinates: 4,
            images_per_entity: 50,
            generic_images: 200,
            noise_rate: 0.2,
            feature_dim: 8,
            unseen_fraction: 0.5,
            seed: 3,
        };
        let bundle = generate_world(&cfg).unwrap();
        let frac = world_stats(&bundle).noise_fraction;
        assert!((frac - 0.2).abs() < 0.03, "noise fraction {frac} too far from 0.2");
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = WorldConfig { num_entities: 1, ..small_config() };
        let err = generate_world(&cfg).unwrap_err();
        assert!(err.to_string().contains("num_entities"), "got: {err}");
        let cfg = WorldConfig { noise_rate: 1.0, ..small_config() };
        assert!(generate_world(&cfg).unwrap_err().to_string().contains("noise_rate"));
        let cfg = WorldConfig { feature_dim: 2, ..small_config() };
        assert!(generate_world(&cfg).unwrap_err().to_string().contains("feature_dim"));
    }

    #[test]
    fn per_entity_frequencies_sum_to_entity_image_count() {
        let bundle = generate_world(&small_config()).unwrap();
        let stats = world_stats(&bundle);
        let total: usize = stats.per_entity_image_counts.iter().map(|(_, c)| c).sum();
        assert_eq!(total, bundle.config.num_entities * bundle.config.images_per_entity);
    }

    #[test]
    fn mean_reference_length_matches_independent_recount() {
        let bundle = generate_world(&small_config()).unwrap();
        let stats = world_stats(&bundle);
        // Independent recount with plain whitespace splitting (reference
        // texts contain no punctuation).
        let mut total = 0usize;
        let mut count = 0usize;
        for r in bundle.knoweval_seen_records.iter().chain(&bundle.knoweval_unseen_records) {
            for reference in &r.references {
                total += reference.split_whitespace().count();
                count += 1;
            }
        }
        let expected = total as f64 / count as f64;
        assert!((stats.mean_reference_length - expected).abs() < 1e-12);
    }

    #[test]
    fn world_round_trips_through_disk() {
        let bundle = generate_world(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        write_world(dir.path(), &bundle).unwrap();
        let loaded = load_world(dir.path()).unwrap();
        assert_eq!(loaded.pretrain_records, bundle.pretrain_records);
        assert_eq!(loaded.generic_train_records, bundle.generic_train_records);
        assert_eq!(loaded.knoweval_seen_records, bundle.knoweval_seen_records);
        assert_eq!(loaded.vocab.hash(), bundle.vocab.hash());
        // Feature rendering agrees between generated and loaded worlds.
        let a = bundle.pretrain_pairs().unwrap();
        let b = loaded.pretrain_pairs().unwrap();
        assert_eq!(a[0].image.regions, b[0].image.regions);
    }

    #[test]
    fn rendered_features_are_deterministic_per_image() {
        let bundle = generate_world(&small_config()).unwrap();
        let r = &bundle.pretrain_records[0];
        let a = bundle.catalog.render(r.entity.as_deref(), &r.objects, &r.image_id).unwrap();
        let b = bundle.catalog.render(r.entity.as_deref(), &r.objects, &r.image_id).unwrap();
        assert_eq!(a.regions, b.regions);
        // A different image id jitters differently.
        let c = bundle.catalog.render(r.entity.as_deref(), &r.objects, "other-id").unwrap();
        assert_ne!(a.regions, c.regions);
    }

    #[test]
    fn keywords_are_half_seen_half_unseen() {
        let bundle = generate_world(&small_config()).unwrap();
        assert_eq!(bundle.seen_keywords().len(), 3);
        assert_eq!(bundle.unseen_keywords().len(), 3);
    }
}
