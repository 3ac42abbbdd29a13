//! Gate, relation and joint training with N/A subsampling, plus bundles.

mod bundle;

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{enumerate_pairs, linearize, relations, Document, LinearDoc, PairInstance, Vocabulary};
use crate::encoder::EncoderConfig;
use crate::eval;
use crate::model::ModelError;
use crate::numerics::{flush_denormals, Adam, Gradients, NumericsError, ParamStore, Tape};
use crate::relhead::HeadConfig;

pub use bundle::{load_bundle, save_bundle, BundleError, ModelBundle, BUNDLE_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTask {
    Gate,
    Relation,
    Joint,
}

impl TrainTask {
    pub fn n_classes(self) -> usize {
        match self {
            TrainTask::Gate => 2,
            TrainTask::Relation => relations::NUM_RELATIONS,
            TrainTask::Joint => relations::NUM_RELATIONS + 1,
        }
    }

    /// Corpus relation class of a model output class; `None` for N/A and
    /// for gate outputs.
    pub fn relation_class(self, model_class: usize) -> Option<usize> {
        match self {
            TrainTask::Gate => None,
            TrainTask::Relation => Some(model_class + 1),
            TrainTask::Joint => (model_class != relations::NA_CLASS).then_some(model_class),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainTask::Gate => "gate",
            TrainTask::Relation => "relation",
            TrainTask::Joint => "joint",
        }
    }
}

impl fmt::Display for TrainTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gate" => Ok(TrainTask::Gate),
            "relation" => Ok(TrainTask::Relation),
            "joint" => Ok(TrainTask::Joint),
            other => Err(format!("unknown task `{other}` (expected gate, relation or joint)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub lr: f64,
    pub batch_docs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub na_ratio: f64,
    pub subsample: bool,
    /// Stop after this many dev evaluations without improvement.
    pub patience: Option<usize>,
    pub eval_every: usize,
}

impl TrainConfig {
    pub const FINETUNE_LR: f64 = 1e-5;

    pub fn new(task: TrainTask) -> Self {
        TrainConfig {
            task,
            lr: 1e-3,
            batch_docs: 4,
            epochs: 30,
            seed: 0,
            na_ratio: 3.0,
            subsample: true,
            patience: None,
            eval_every: 1,
        }
    }

    /// Learning rate for fine-tuning a pretrained encoder.
    pub fn finetune(task: TrainTask) -> Self {
        TrainConfig {
            lr: Self::FINETUNE_LR,
            ..Self::new(task)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.na_ratio >= 0.0 && self.na_ratio.is_finite()) {
            return fail(format!("na_ratio must be non-negative, got {}", self.na_ratio));
        }
        if self.batch_docs == 0 {
            return fail("batch_docs must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Architecture choices not fixed by the task or vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `vocab_size` is overwritten with the vocabulary length.
    pub encoder: EncoderConfig,
    pub d_low: usize,
    pub use_bias: bool,
}

impl ModelSpec {
    pub fn desk() -> Self {
        ModelSpec {
            encoder: EncoderConfig::desk(2),
            d_low: 128,
            use_bias: true,
        }
    }

    pub fn resolve(&self, vocab: &Vocabulary, task: TrainTask) -> (EncoderConfig, HeadConfig) {
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            ..self.encoder.clone()
        };
        let head = HeadConfig {
            d_model: encoder.d_model,
            d_low: self.d_low,
            n_classes: task.n_classes(),
            use_bias: self.use_bias,
        };
        (encoder, head)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no {0} training examples in the corpus")]
    EmptyTrainingSet(TrainTask),
    #[error("loss diverged at epoch {epoch}, step {step}: {loss} (last finite loss {last_finite:?})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_finite: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

/// Number of N/A items kept next to `positives` positive items.
pub fn na_quota(positives: usize, available: usize, na_ratio: f64) -> usize {
    let base = if positives == 0 { 1.0 } else { positives as f64 };
    let quota = (na_ratio * base).floor();
    if quota >= available as f64 {
        available
    } else {
        quota as usize
    }
}

/// Keeps every item for which `is_na` is false and a uniform sample without
/// replacement of [`na_quota`] of the others. Relative order is preserved.
pub fn subsample_by<T: Clone, R: Rng>(
    items: &[T],
    is_na: impl Fn(&T) -> bool,
    na_ratio: f64,
    rng: &mut R,
) -> Vec<T> {
    let na: Vec<usize> = (0..items.len()).filter(|&i| is_na(&items[i])).collect();
    let positives = items.len() - na.len();
    let quota = na_quota(positives, na.len(), na_ratio);
    let mut keep = vec![true; items.len()];
    if quota < na.len() {
        na.iter().for_each(|&i| keep[i] = false);
        for j in index::sample(rng, na.len(), quota) {
            keep[na[j]] = true;
        }
    }
    items
        .iter()
        .zip(keep)
        .filter_map(|(x, k)| k.then(|| x.clone()))
        .collect()
}

pub fn subsample_na<R: Rng>(pairs: &[PairInstance], na_ratio: f64, rng: &mut R) -> Vec<PairInstance> {
    subsample_by(pairs, PairInstance::is_na, na_ratio, rng)
}

/// A pair with its label in the model's output space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub doc: usize,
    pub head: usize,
    pub tail: usize,
    pub label: usize,
}

impl TaskExample {
    /// True for examples standing for the N/A class (gate 0, joint 0).
    pub fn is_na(&self, task: TrainTask) -> bool {
        task != TrainTask::Relation && self.label == 0
    }
}

/// Maps enumerated pairs to task labels: gate gives one 0/1 example per pair;
/// relation drops N/A pairs and shifts classes down by one; joint keeps the
/// corpus classes. Multi-label pairs yield one example per gold class
/// (relation, joint).
pub fn relabel_for_task(pairs: &[PairInstance], task: TrainTask) -> Vec<TaskExample> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ex = |label| TaskExample {
            doc: p.doc,
            head: p.head,
            tail: p.tail,
            label,
        };
        match task {
            TrainTask::Gate => out.push(ex(usize::from(!p.all_gold_classes.is_empty()))),
            TrainTask::Relation => out.extend(p.all_gold_classes.iter().map(|&c| ex(c - 1))),
            TrainTask::Joint if p.all_gold_classes.is_empty() => out.push(ex(relations::NA_CLASS)),
            TrainTask::Joint => out.extend(p.all_gold_classes.iter().map(|&c| ex(c))),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
    pub history: Vec<EpochRecord>,
}

struct Prepared {
    lin: LinearDoc,
    examples: Vec<TaskExample>,
}

fn prepare(docs: &[Document], vocab: &Vocabulary, max_len: usize, task: TrainTask) -> Vec<Prepared> {
    docs.par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let lin = linearize(doc, vocab, max_len);
            let pairs: Vec<PairInstance> = enumerate_pairs(i, doc)
                .into_iter()
                .filter(|p| lin.in_window(p.head) && lin.in_window(p.tail))
                .collect();
            let examples = relabel_for_task(&pairs, task);
            Prepared { lin, examples }
        })
        .collect()
}

/// Dev metric used for model selection: binary F1 for the gate, step-2
/// accuracy for the relation model, micro-F1 for the joint model.
pub fn dev_metric(bundle: &ModelBundle, dev: &[Document], vocab: &Vocabulary) -> Result<f64, TrainError> {
    Ok(match bundle.task {
        TrainTask::Gate => eval::gate_f1(bundle, dev, vocab, eval::DEFAULT_GATE_THRESHOLD)?,
        TrainTask::Relation => eval::step2_accuracy(bundle, dev, vocab)?.unwrap_or(0.0),
        TrainTask::Joint => {
            let preds = eval::joint_predict(bundle, dev, vocab)?;
            eval::micro_f1(&preds, dev)?.f1
        }
    })
}

/// Trains a fresh model on `docs`. With a non-empty `dev` set the bundle with
/// the best dev metric is returned; otherwise the final one.
pub fn train(
    docs: &[Document],
    dev: &[Document],
    vocab: &Vocabulary,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<ModelBundle, TrainError> {
    train_with(docs, dev, vocab, spec, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    docs: &[Document],
    dev: &[Document],
    vocab: &Vocabulary,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelBundle, TrainError> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let task = cfg.task;
    let mut bundle = ModelBundle::untrained(vocab, spec, cfg)?;
    let prepared = prepare(docs, vocab, bundle.model.encoder.max_len, task);
    if prepared.iter().all(|p| p.examples.is_empty()) {
        return Err(TrainError::EmptyTrainingSet(task));
    }

    let adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut last_finite = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_docs) {
            let mut examples: Vec<TaskExample> = batch
                .iter()
                .flat_map(|&d| prepared[d].examples.iter().copied())
                .collect();
            if cfg.subsample && task != TrainTask::Relation {
                examples = subsample_by(&examples, |e| e.is_na(task), cfg.na_ratio, &mut rng);
            }
            if examples.is_empty() {
                continue;
            }
            let loss = step(&mut bundle, &prepared, batch, &examples, &adam, &mut rng)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: bundle.meta.steps,
                    loss,
                    last_finite,
                });
            }
            last_finite = Some(loss);
            losses.push(loss);
        }
        let loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let dev_metric = if !dev.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            Some(dev_metric(&bundle, dev, vocab)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss,
            dev_metric,
        };
        on_epoch(&record);
        bundle.meta.history.push(record);
        bundle.meta.epochs_run = epoch;
        if let Some(m) = dev_metric {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, bundle.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((metric, epoch, params)) = best {
        bundle.params = params;
        bundle.meta.best_dev = Some(metric);
        bundle.meta.best_epoch = Some(epoch);
    }
    bundle.params.zero_grad();
    Ok(bundle)
}

/// One optimizer step over a batch. Documents are encoded independently and
/// their gradients summed in batch order.
fn step(
    bundle: &mut ModelBundle,
    prepared: &[Prepared],
    batch: &[usize],
    examples: &[TaskExample],
    adam: &Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let total = examples.len() as f64;
    let work: Vec<(usize, Vec<(usize, usize)>, Vec<usize>, u64)> = batch
        .iter()
        .filter_map(|&d| {
            let (pairs, labels): (Vec<_>, Vec<_>) = examples
                .iter()
                .filter(|e| e.doc == d)
                .map(|e| ((e.head, e.tail), e.label))
                .unzip();
            (!pairs.is_empty()).then_some((d, pairs, labels))
        })
        .map(|(d, p, l)| (d, p, l, rng.gen()))
        .collect();
    let model = &bundle.model;
    let params = &bundle.params;
    let results: Vec<Result<(f64, Gradients<f32>), TrainError>> = work
        .par_iter()
        .map(|(d, pairs, labels, seed)| {
            flush_denormals();
            let mut dropout = ChaCha8Rng::seed_from_u64(*seed);
            let mut tape = Tape::new(params);
            let logits = model.score(&mut tape, &prepared[*d].lin, pairs, Some(&mut dropout))?;
            let ce = tape.cross_entropy(logits, labels)?;
            let loss = tape.scale(ce, (labels.len() as f64 / total) as f32);
            let value = tape.value(loss).data()[0] as f64;
            Ok((value, tape.backward(loss)?))
        })
        .collect();
    let mut loss = 0.0;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        bundle.params.accumulate(grads);
    }
    if loss.is_finite() {
        adam.step(&mut bundle.params)?;
        bundle.meta.steps += 1;
    }
    Ok(loss)
}
