//! The three training stages — pretraining, vanilla fine-tuning, and
//! replay fine-tuning with the knowledge objective — plus run records,
//! model selection and run-directory persistence.

mod adam;

pub use adam::Adam;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaptionExample, ImageFeatures, KnowevalExample, PretrainPair, Vocabulary, BOS_ID, EOS_ID};
use crate::evalkit::{evaluate_model, EvalError, EvalSet, MetricsReport};
use crate::losses::{ce_grad, ce_loss, kd_grad, knowledge_grad, total_loss, KdConfig, LossBreakdown, LossError};
use crate::model::{step_probs, CheckpointHeader, Model, ModelError, StageTag};
use crate::replay::{ReplayExemplar, ReplaySet};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config is for stage `{found}`, expected `{expected}`")]
    WrongStage { expected: &'static str, found: String },
    #[error("model is tagged `{found}`, expected `{expected}`")]
    WrongModelTag { expected: &'static str, found: String },
    #[error("teacher/student vocabulary hash mismatch")]
    VocabHashMismatch,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    VanillaFt,
    Kreplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoPred,
    NoKd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(rename = "λ_know", alias = "lambda_know")]
    pub lambda_know: f64,
    pub kd: KdConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Replay samples mixed into each batch during the replay stage.
    pub replay_per_batch: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.replay_per_batch >= self.batch_size {
            return Err(TrainError::InvalidConfig(format!(
                "replay_per_batch ({}) must be smaller than batch_size ({})",
                self.replay_per_batch, self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be at least 1".into()));
        }
        if self.lambda_know < 0.0 {
            return Err(TrainError::InvalidConfig("λ_know must be nonnegative".into()));
        }
        self.kd.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    /// Knowledge-loss weight after the ablation switch.
    pub fn effective_lambda_know(&self) -> f64 {
        match self.ablation {
            Ablation::NoPred => 0.0,
            _ => self.lambda_know,
        }
    }

    /// Distillation weight after the ablation switch.
    pub fn effective_lambda_kd(&self) -> f64 {
        match self.ablation {
            Ablation::NoKd => 0.0,
            _ => self.kd.lambda_kd,
        }
    }

    fn expect_stage(&self, expected: Stage, name: &'static str) -> Result<(), TrainError> {
        if self.stage != expected {
            return Err(TrainError::WrongStage { expected: name, found: format!("{:?}", self.stage) });
        }
        Ok(())
    }
}

/// A model plus the provenance a checkpoint header carries.
#[derive(Debug, Clone)]
pub struct TaggedModel {
    pub model: Model<f32>,
    pub stage: StageTag,
    pub vocab_hash: String,
    pub step: usize,
    pub seed: u64,
}

impl TaggedModel {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.model.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            param_checksum: self.model.checksum(),
        }
    }
}

/// Validation material shared by all stages: the knowledge validation set
/// used for model selection and the generic validation set, which is logged
/// but never drives selection.
pub struct EvalSuite<'a> {
    pub vocab: &'a Vocabulary,
    pub knoweval: &'a [KnowevalExample],
    pub generic_val: &'a [CaptionExample],
}

/// One periodic evaluation during training.
#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub knoweval: MetricsReport,
    pub generic_val: MetricsReport,
    /// Evaluation-mode CE over a fixed slice of the training corpus
    /// (pretraining stage only).
    pub val_ce: Option<f64>,
}

/// Full log of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    /// Step of the selected checkpoint: highest knowledge-validation CIDEr
    /// for the fine-tuning stages, lowest validation CE for pretraining.
    pub best_step: usize,
    pub best_metric: f64,
}

/// A teacher-forcing item: `input[t]` predicts `target[t]`.
pub struct PreparedItem<'a> {
    pub image: &'a ImageFeatures,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Builds the shifted input/target pair `[bos] + ref -> ref + [eos]`,
/// truncated to the model's max length.
pub fn prepare_item<'a>(
    image: &'a ImageFeatures,
    reference: &[usize],
    max_len: usize,
) -> PreparedItem<'a> {
    let mut seq = Vec::with_capacity(reference.len() + 2);
    seq.push(BOS_ID);
    seq.extend_from_slice(reference);
    seq.push(EOS_ID);
    seq.truncate(max_len + 1);
    let input = seq[..seq.len() - 1].to_vec();
    let target = seq[1..].to_vec();
    PreparedItem { image, input, target }
}

/// Without-replacement batch sampler; reshuffles each epoch.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next_batch(&mut self, k: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
        if self.cursor + k > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        batch
    }
}

/// One cross-entropy training step over a batch of prepared items.
fn ce_step(
    model: &mut Model<f32>,
    items: &[&PreparedItem<'_>],
    opt: &mut Adam,
    rng: &mut ChaCha20Rng,
    step: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut grads = model.params.zeros_like();
    let inv = 1.0f32 / items.len() as f32;
    let mut ce_total = 0.0f64;
    for item in items {
        let (logits, cache) = model.forward_train(item.image, &item.input, rng)?;
        let mask = vec![true; item.target.len()];
        let (val, mut dl) = ce_grad(&logits, &item.target, &mask)?;
        dl.mapv_inplace(|v| v * inv);
        model.backward(&cache, &dl, &mut grads);
        ce_total += f64::from(val);
    }
    let l_ce = ce_total / items.len() as f64;
    if !l_ce.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    opt.step(&mut model.params, &grads);
    Ok(LossBreakdown {
        l_ce,
        l_cov: 0.0,
        l_rep: 0.0,
        l_know: 0.0,
        l_kd: 0.0,
        total: l_ce,
        ce_count: items.len(),
        know_count: 0,
        kd_count: 0,
    })
}

/// Evaluation-mode CE over items (no dropout, no update).
fn eval_ce(model: &Model<f32>, items: &[PreparedItem<'_>]) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    for item in items {
        let logits = model.forward(
            item.image,
            &crate::corpus::TokenSequence::new(item.input.clone()),
        )?;
        let probs = step_probs(&logits);
        let mask = vec![true; item.target.len()];
        total += f64::from(ce_loss(&probs, &item.target, &mask)?);
    }
    Ok(total / items.len().max(1) as f64)
}

fn run_evals(
    model: &Model<f32>,
    suite: &EvalSuite<'_>,
    step: usize,
    val_ce: Option<f64>,
) -> Result<EvalPoint, TrainError> {
    let knoweval = evaluate_model(model, EvalSet::Knoweval(suite.knoweval), suite.vocab)?;
    let generic_val = evaluate_model(model, EvalSet::Captions(suite.generic_val), suite.vocab)?;
    Ok(EvalPoint { step, knoweval, generic_val, val_ce })
}

/// Pretraining: mini-batch CE over the noisy image-text corpus.
pub fn pretrain(
    model: Model<f32>,
    corpus: &[PretrainPair],
    cfg: &TrainConfig,
    suite: &EvalSuite<'_>,
) -> Result<(TaggedModel, RunRecord), TrainError> {
    cfg.validate()?;
    cfg.expect_stage(Stage::Pretrain, "pretrain")?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset("pretrain corpus"));
    }
    let max_len = model.config.max_len;
    let items: Vec<PreparedItem<'_>> = corpus
        .iter()
        .map(|p| prepare_item(&p.image, &suite.vocab.tokenize(&p.text).ids, max_len))
        .collect();
    if cfg.batch_size > items.len() {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds corpus size {}",
            cfg.batch_size,
            items.len()
        )));
    }
    // Fixed slice for validation CE; pretraining deliberately overfits, so
    // train and validation distributions coincide here.
    let val_slice = &items[..items.len().min(256)];

    let mut model = model;
    let mut rng = seeded_rng(cfg.seed, "pretrain");
    let mut opt = Adam::new(&model.params, cfg.learning_rate as f32);
    let mut sampler = EpochSampler::new(items.len(), &mut rng);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best_step = 0usize;
    let mut best_metric = f64::INFINITY;

    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch: Vec<&PreparedItem<'_>> = idx.iter().map(|&i| &items[i]).collect();
        losses.push(ce_step(&mut model, &batch, &mut opt, &mut rng, step)?);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let ce = eval_ce(&model, val_slice)?;
            let point = run_evals(&model, suite, step, Some(ce))?;
            if ce < best_metric {
                best_metric = ce;
                best_step = step;
            }
            evals.push(point);
        }
    }

    let record = RunRecord { config: cfg.clone(), losses, evals, best_step, best_metric };
    let tagged = TaggedModel {
        model,
        stage: StageTag::Pretrained,
        vocab_hash: suite.vocab.hash(),
        step: cfg.max_steps,
        seed: cfg.seed,
    };
    Ok((tagged, record))
}

/// Vanilla fine-tuning: CE-only training on the captioning set. The returned
/// model is the final checkpoint, usable as the distillation teacher.
pub fn vanilla_finetune(
    pretrained: &TaggedModel,
    d_c: &[CaptionExample],
    cfg: &TrainConfig,
    suite: &EvalSuite<'_>,
) -> Result<(TaggedModel, RunRecord), TrainError> {
    cfg.validate()?;
    cfg.expect_stage(Stage::VanillaFt, "vanilla_ft")?;
    if pretrained.stage != StageTag::Pretrained {
        return Err(TrainError::WrongModelTag {
            expected: "pretrained",
            found: pretrained.stage.to_string(),
        });
    }
    if pretrained.vocab_hash != suite.vocab.hash() {
        return Err(TrainError::VocabHashMismatch);
    }
    if d_c.is_empty() {
        return Err(TrainError::EmptyDataset("caption dataset"));
    }
    let max_len = pretrained.model.config.max_len;
    let items: Vec<PreparedItem<'_>> =
        d_c.iter().map(|ex| prepare_item(&ex.image, &ex.reference.ids, max_len)).collect();
    if cfg.batch_size > items.len() {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            items.len()
        )));
    }

    let mut model = pretrained.model.clone();
    let mut rng = seeded_rng(cfg.seed, "vanilla_ft");
    let mut opt = Adam::new(&model.params, cfg.learning_rate as f32);
    let mut sampler = EpochSampler::new(items.len(), &mut rng);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best_step = 0usize;
    let mut best_metric = f64::NEG_INFINITY;

    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch: Vec<&PreparedItem<'_>> = idx.iter().map(|&i| &items[i]).collect();
        losses.push(ce_step(&mut model, &batch, &mut opt, &mut rng, step)?);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let point = run_evals(&model, suite, step, None)?;
            if point.knoweval.cider > best_metric {
                best_metric = point.knoweval.cider;
                best_step = step;
            }
            evals.push(point);
        }
    }

    let record = RunRecord { config: cfg.clone(), losses, evals, best_step, best_metric };
    let tagged = TaggedModel {
        model,
        stage: StageTag::VanillaFt,
        vocab_hash: pretrained.vocab_hash.clone(),
        step: cfg.max_steps,
        seed: cfg.seed,
    };
    Ok((tagged, record))
}

/// One mixed batch for the replay stage.
pub struct KreplayBatch<'a> {
    pub captions: Vec<PreparedItem<'a>>,
    pub replays: Vec<&'a ReplayExemplar>,
    /// Greedy decode budget for pseudo-captions: the longest reference in
    /// the captioning set.
    pub pseudo_max_len: usize,
}

/// One replay training step:
/// 1. greedy-decode a pseudo-caption for every replay image (dropout off);
/// 2. teacher forward on (image, pseudo-caption) for distillation targets;
/// 3. one student training forward over the mixed batch;
/// 4. CE on caption items; coverage + penalty and KD on replay items;
/// 5. a single optimizer step on the weighted total.
pub fn kreplay_step(
    student: &mut Model<f32>,
    teacher: &Model<f32>,
    batch: &KreplayBatch<'_>,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha20Rng,
    step: usize,
) -> Result<LossBreakdown, TrainError> {
    let lambda_know = cfg.effective_lambda_know();
    let lambda_kd = cfg.effective_lambda_kd();
    let mut grads = student.params.zeros_like();

    // Caption side: plain CE, averaged over caption samples.
    let mut ce_total = 0.0f64;
    if !batch.captions.is_empty() {
        let inv = 1.0f32 / batch.captions.len() as f32;
        for item in &batch.captions {
            let (logits, cache) = student.forward_train(item.image, &item.input, rng)?;
            let mask = vec![true; item.target.len()];
            let (val, mut dl) = ce_grad(&logits, &item.target, &mask)?;
            dl.mapv_inplace(|v| v * inv);
            student.backward(&cache, &dl, &mut grads);
            ce_total += f64::from(val);
        }
        ce_total /= batch.captions.len() as f64;
    }

    // Replay side: pseudo-caption generation, then one teacher-forced student
    // pass shared by the knowledge and distillation terms.
    let mut cov_total = 0.0f64;
    let mut rep_total = 0.0f64;
    let mut kd_total = 0.0f64;
    if !batch.replays.is_empty() {
        let inv = 1.0f32 / batch.replays.len() as f32;
        for ex in &batch.replays {
            let pseudo = student.greedy_decode(&ex.image, batch.pseudo_max_len)?;
            let mut input = Vec::with_capacity(pseudo.len());
            input.push(BOS_ID);
            input.extend_from_slice(&pseudo.ids[..pseudo.len() - 1]);

            let (logits, cache) = student.forward_train(&ex.image, &input, rng)?;
            let mut dl = logits.mapv(|_| 0.0f32);
            if lambda_know > 0.0 {
                let (cov, rep, mut dk) = knowledge_grad(&logits, &ex.keyword)?;
                dk.mapv_inplace(|v| v * (lambda_know as f32) * inv);
                dl += &dk;
                cov_total += f64::from(cov);
                rep_total += f64::from(rep);
            }
            if lambda_kd > 0.0 {
                let teacher_logits = teacher.forward(
                    &ex.image,
                    &crate::corpus::TokenSequence::new(input.clone()),
                )?;
                let (kd, mut dkd) = kd_grad(&teacher_logits, &logits, cfg.kd.temperature)?;
                dkd.mapv_inplace(|v| v * (lambda_kd as f32) * inv);
                dl += &dkd;
                kd_total += f64::from(kd);
            }
            student.backward(&cache, &dl, &mut grads);
        }
        let n = batch.replays.len() as f64;
        cov_total /= n;
        rep_total /= n;
        kd_total /= n;
    }

    let l_know = cov_total + rep_total;
    let total = total_loss(ce_total, l_know, kd_total, lambda_know, lambda_kd)?;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    opt.step(&mut student.params, &grads);

    Ok(LossBreakdown {
        l_ce: ce_total,
        l_cov: cov_total,
        l_rep: rep_total,
        l_know,
        l_kd: kd_total,
        total,
        ce_count: batch.captions.len(),
        know_count: batch.replays.len(),
        kd_count: batch.replays.len(),
    })
}

/// Replay fine-tuning from the pretrained model, with the vanilla fine-tuned
/// model as frozen teacher. Returns the checkpoint with the highest
/// knowledge-validation CIDEr among periodic evaluations.
pub fn kreplay_finetune(
    pretrained: &TaggedModel,
    teacher: &TaggedModel,
    d_c: &[CaptionExample],
    d_k: &ReplaySet,
    cfg: &TrainConfig,
    suite: &EvalSuite<'_>,
) -> Result<(TaggedModel, RunRecord), TrainError> {
    cfg.validate()?;
    cfg.expect_stage(Stage::Kreplay, "kreplay")?;
    if pretrained.stage != StageTag::Pretrained {
        return Err(TrainError::WrongModelTag {
            expected: "pretrained",
            found: pretrained.stage.to_string(),
        });
    }
    if teacher.stage != StageTag::VanillaFt {
        return Err(TrainError::WrongModelTag {
            expected: "vanilla_ft",
            found: teacher.stage.to_string(),
        });
    }
    let vocab_hash = suite.vocab.hash();
    if pretrained.vocab_hash != vocab_hash || teacher.vocab_hash != vocab_hash {
        return Err(TrainError::VocabHashMismatch);
    }
    if d_c.is_empty() {
        return Err(TrainError::EmptyDataset("caption dataset"));
    }
    if d_k.is_empty() {
        return Err(TrainError::EmptyDataset("replay set"));
    }
    let caption_per_batch = cfg.batch_size - cfg.replay_per_batch;
    if caption_per_batch > d_c.len() {
        return Err(TrainError::InvalidConfig(format!(
            "batch needs {} caption samples but the dataset has {}",
            caption_per_batch,
            d_c.len()
        )));
    }

    let max_len = pretrained.model.config.max_len;
    let pseudo_max_len = d_c.iter().map(|ex| ex.reference.len()).max().unwrap_or(1).max(1);
    let items: Vec<PreparedItem<'_>> =
        d_c.iter().map(|ex| prepare_item(&ex.image, &ex.reference.ids, max_len)).collect();

    let mut student = pretrained.model.clone();
    let mut rng = seeded_rng(cfg.seed, "kreplay");
    let mut opt = Adam::new(&student.params, cfg.learning_rate as f32);
    let mut sampler = EpochSampler::new(items.len(), &mut rng);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best_step = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = None;

    for step in 1..=cfg.max_steps {
        // Caption indices first, then replay draws: fixed order keeps the
        // stream reproducible.
        let cap_idx = sampler.next_batch(caption_per_batch, &mut rng);
        let rep_idx: Vec<usize> =
            (0..cfg.replay_per_batch).map(|_| rng.random_range(0..d_k.len())).collect();
        let batch = KreplayBatch {
            captions: cap_idx
                .iter()
                .map(|&i| PreparedItem {
                    image: items[i].image,
                    input: items[i].input.clone(),
                    target: items[i].target.clone(),
                })
                .collect(),
            replays: rep_idx.iter().map(|&i| &d_k.exemplars[i]).collect(),
            pseudo_max_len,
        };
        losses.push(kreplay_step(&mut student, &teacher.model, &batch, cfg, &mut opt, &mut rng, step)?);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let point = run_evals(&student, suite, step, None)?;
            if point.knoweval.cider > best_metric {
                best_metric = point.knoweval.cider;
                best_step = step;
                best_params = Some(student.params.clone());
            }
            evals.push(point);
        }
    }

    if let Some(p) = best_params {
        student.params = p;
    }
    let record = RunRecord { config: cfg.clone(), losses, evals, best_step, best_metric };
    let tagged = TaggedModel {
        model: student,
        stage: StageTag::Kreplay,
        vocab_hash,
        step: best_step,
        seed: cfg.seed,
    };
    Ok((tagged, record))
}

// ---------------------------------------------------------------------------
// Run-directory persistence
// ---------------------------------------------------------------------------

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    std::fs::write(path, contents)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}

/// Writes `losses.csv` with one row per executed step.
pub fn write_losses_csv(path: &Path, losses: &[LossBreakdown]) -> Result<(), TrainError> {
    let mut out = String::from("step,l_ce,l_cov,l_rep,l_know,l_kd,total\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            l.l_ce,
            l.l_cov,
            l.l_rep,
            l.l_know,
            l.l_kd,
            l.total
        ));
    }
    write_file(path, &out)
}

/// Writes `eval.csv` in long format: step,split,metric,value.
pub fn write_eval_csv(path: &Path, evals: &[EvalPoint]) -> Result<(), TrainError> {
    let mut out = String::from("step,split,metric,value\n");
    for point in evals {
        for (split, report) in
            [("knoweval", &point.knoweval), ("generic-val", &point.generic_val)]
        {
            out.push_str(&format!("{},{},cider,{}\n", point.step, split, report.cider));
            out.push_str(&format!("{},{},bleu4,{}\n", point.step, split, report.bleu4));
            out.push_str(&format!("{},{},rouge_l,{}\n", point.step, split, report.rouge_l));
            if let Some(r) = report.recog_acc {
                out.push_str(&format!("{},{},recog_acc,{}\n", point.step, split, r));
            }
        }
        if let Some(ce) = point.val_ce {
            out.push_str(&format!("{},pretrain-val,ce,{}\n", point.step, ce));
        }
    }
    write_file(path, &out)
}
