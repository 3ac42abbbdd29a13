//! Pipeline and joint inference, prediction files, and scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{enumerate_pairs, linearize, relations, Document, LinearDoc, Vocabulary};
use crate::model::{argmax, ModelError};
use crate::relhead::surviving_pairs;
use crate::training::{BundleError, ModelBundle, TrainTask};

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown document title `{0}`")]
    UnknownTitle(String),
    #[error("document title `{0}` occurs more than once in the gold corpus")]
    DuplicateTitle(String),
    #[error("document `{title}` has {entities} entities, prediction references entity {index}")]
    EntityOutOfRange {
        title: String,
        index: usize,
        entities: usize,
    },
    #[error("unknown relation id `{0}`")]
    UnknownRelation(String),
    #[error("duplicate prediction ({title}, {h_idx}, {t_idx}, {r})")]
    Duplicate {
        title: String,
        h_idx: usize,
        t_idx: usize,
        r: String,
    },
    #[error("prediction ({title}, {h_idx}, {t_idx}, {r}) has score {score} outside (0, 1]")]
    Score {
        title: String,
        h_idx: usize,
        t_idx: usize,
        r: String,
        score: f64,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub title: String,
    pub h_idx: usize,
    pub t_idx: usize,
    pub r: String,
    pub score: f64,
}

impl PredictionRecord {
    fn key(&self) -> (&str, usize, usize, &str) {
        (&self.title, self.h_idx, self.t_idx, &self.r)
    }
}

fn require_task(bundle: &ModelBundle, task: TrainTask) -> Result<(), EvalError> {
    if bundle.task != task {
        return Err(EvalError::Config(format!(
            "expected a {task} bundle, got {}",
            bundle.task
        )));
    }
    Ok(())
}

fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::Config(format!(
            "gate threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(())
}

fn probabilities(
    bundle: &ModelBundle,
    lin: &LinearDoc,
    pairs: &[(usize, usize)],
) -> Result<Vec<Vec<f32>>, EvalError> {
    Ok(bundle.model.probabilities(&bundle.params, lin, pairs)?)
}

fn relation_id(class: usize) -> String {
    relations::relation_of(class)
        .expect("relation class in range")
        .to_string()
}

/// Two-step inference: pairs the gate admits (`p₁ > threshold`) receive the
/// relation model's top class with score `p₁·p₂`.
pub fn pipeline_predict(
    gate: &ModelBundle,
    relation: &ModelBundle,
    docs: &[Document],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<Vec<PredictionRecord>, EvalError> {
    require_task(gate, TrainTask::Gate)?;
    require_task(relation, TrainTask::Relation)?;
    check_threshold(threshold)?;
    if gate.vocab_hash != relation.vocab_hash {
        return Err(EvalError::Config(
            "gate and relation bundles were trained with different vocabularies".into(),
        ));
    }
    gate.check_vocab(vocab)?;
    let per_doc = docs
        .par_iter()
        .map(|doc| {
            let lin_g = linearize(doc, vocab, gate.model.encoder.max_len);
            let lin_r = linearize(doc, vocab, relation.model.encoder.max_len);
            let pairs: Vec<(usize, usize)> = surviving_pairs(&lin_g.entity_positions)
                .into_iter()
                .filter(|&(h, t)| lin_r.in_window(h) && lin_r.in_window(t))
                .collect();
            if pairs.is_empty() {
                return Ok(Vec::new());
            }
            let gate_probs = probabilities(gate, &lin_g, &pairs)?;
            let admitted: Vec<((usize, usize), f32)> = pairs
                .iter()
                .zip(&gate_probs)
                .filter(|(_, p)| f64::from(p[1]) > threshold)
                .map(|(&pair, p)| (pair, p[1]))
                .collect();
            if admitted.is_empty() {
                return Ok(Vec::new());
            }
            let admitted_pairs: Vec<(usize, usize)> = admitted.iter().map(|(p, _)| *p).collect();
            let rel_probs = probabilities(relation, &lin_r, &admitted_pairs)?;
            Ok(admitted
                .iter()
                .zip(rel_probs)
                .map(|(&((h, t), p1), p2)| {
                    let c = argmax(&p2);
                    let class = TrainTask::Relation.relation_class(c).expect("relation output");
                    PredictionRecord {
                        title: doc.title.clone(),
                        h_idx: h,
                        t_idx: t,
                        r: relation_id(class),
                        score: f64::from(p1) * f64::from(p2[c]),
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<_>>, EvalError>>()?;
    Ok(per_doc.concat())
}

/// Single-step inference: a record for each pair whose top class is not N/A.
pub fn joint_predict(
    bundle: &ModelBundle,
    docs: &[Document],
    vocab: &Vocabulary,
) -> Result<Vec<PredictionRecord>, EvalError> {
    require_task(bundle, TrainTask::Joint)?;
    bundle.check_vocab(vocab)?;
    let per_doc = docs
        .par_iter()
        .map(|doc| {
            let lin = linearize(doc, vocab, bundle.model.encoder.max_len);
            let pairs = surviving_pairs(&lin.entity_positions);
            if pairs.is_empty() {
                return Ok(Vec::new());
            }
            let probs = probabilities(bundle, &lin, &pairs)?;
            Ok(pairs
                .iter()
                .zip(probs)
                .filter_map(|(&(h, t), p)| {
                    let c = argmax(&p);
                    TrainTask::Joint.relation_class(c).map(|class| PredictionRecord {
                        title: doc.title.clone(),
                        h_idx: h,
                        t_idx: t,
                        r: relation_id(class),
                        score: f64::from(p[c]),
                    })
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<_>>, EvalError>>()?;
    Ok(per_doc.concat())
}

/// Binary F1 of the gate on relation existence. Gold positives outside the
/// encoder window count as missed.
pub fn gate_f1(
    bundle: &ModelBundle,
    docs: &[Document],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<f64, EvalError> {
    require_task(bundle, TrainTask::Gate)?;
    check_threshold(threshold)?;
    let counts = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let lin = linearize(doc, vocab, bundle.model.encoder.max_len);
            let gold: BTreeSet<(usize, usize)> = enumerate_pairs(i, doc)
                .into_iter()
                .filter(|p| !p.all_gold_classes.is_empty())
                .map(|p| (p.head, p.tail))
                .collect();
            let pairs = surviving_pairs(&lin.entity_positions);
            let probs = if pairs.is_empty() {
                Vec::new()
            } else {
                probabilities(bundle, &lin, &pairs)?
            };
            let predicted: Vec<&(usize, usize)> = pairs
                .iter()
                .zip(&probs)
                .filter(|(_, p)| f64::from(p[1]) > threshold)
                .map(|(pair, _)| pair)
                .collect();
            let tp = predicted.iter().filter(|p| gold.contains(p)).count();
            Ok((tp, predicted.len(), gold.len()))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (tp, pred, gold) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(f1_from_counts(tp, pred, gold))
}

/// Fraction of gold-positive pairs whose top relation is one of their gold
/// relations. Pairs outside the encoder window count as wrong. `None` when
/// there are no gold-positive pairs.
pub fn step2_accuracy(
    bundle: &ModelBundle,
    docs: &[Document],
    vocab: &Vocabulary,
) -> Result<Option<f64>, EvalError> {
    require_task(bundle, TrainTask::Relation)?;
    let counts = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let lin = linearize(doc, vocab, bundle.model.encoder.max_len);
            let gold: Vec<_> = enumerate_pairs(i, doc)
                .into_iter()
                .filter(|p| !p.all_gold_classes.is_empty())
                .collect();
            let scorable: Vec<_> = gold
                .iter()
                .filter(|p| lin.in_window(p.head) && lin.in_window(p.tail))
                .collect();
            let pairs: Vec<(usize, usize)> = scorable.iter().map(|p| (p.head, p.tail)).collect();
            let probs = if pairs.is_empty() {
                Vec::new()
            } else {
                probabilities(bundle, &lin, &pairs)?
            };
            let correct = scorable
                .iter()
                .zip(&probs)
                .filter(|(p, pr)| {
                    let class = TrainTask::Relation.relation_class(argmax(pr)).unwrap();
                    p.all_gold_classes.contains(&class)
                })
                .count();
            Ok((correct, gold.len()))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (correct, total) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Gold triples of a corpus, keyed by document title.
#[derive(Clone, Debug)]
pub struct GoldSet {
    entities: HashMap<String, usize>,
    triples: BTreeSet<(String, usize, usize, String)>,
}

impl GoldSet {
    pub fn new(docs: &[Document]) -> Result<Self, EvalError> {
        let mut entities = HashMap::new();
        let mut triples = BTreeSet::new();
        for doc in docs {
            if entities.insert(doc.title.clone(), doc.entities.len()).is_some() {
                return Err(EvalError::DuplicateTitle(doc.title.clone()));
            }
            for l in &doc.labels {
                triples.insert((doc.title.clone(), l.head, l.tail, l.relation.clone()));
            }
        }
        Ok(GoldSet { entities, triples })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, p: &PredictionRecord) -> bool {
        self.triples
            .contains(&(p.title.clone(), p.h_idx, p.t_idx, p.r.clone()))
    }

    /// Checks that every record names a known document, entity and relation,
    /// and that no record is repeated.
    pub fn validate(&self, preds: &[PredictionRecord]) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for p in preds {
            let m = *self
                .entities
                .get(&p.title)
                .ok_or_else(|| EvalError::UnknownTitle(p.title.clone()))?;
            for index in [p.h_idx, p.t_idx] {
                if index >= m {
                    return Err(EvalError::EntityOutOfRange {
                        title: p.title.clone(),
                        index,
                        entities: m,
                    });
                }
            }
            if relations::class_of(&p.r).is_none_or(|c| c == relations::NA_CLASS) {
                return Err(EvalError::UnknownRelation(p.r.clone()));
            }
            if !seen.insert(p.key()) {
                return Err(duplicate(p));
            }
        }
        Ok(())
    }

    fn gold_per_relation(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for (_, _, _, r) in &self.triples {
            *out.entry(r.as_str()).or_default() += 1;
        }
        out
    }
}

fn duplicate(p: &PredictionRecord) -> EvalError {
    EvalError::Duplicate {
        title: p.title.clone(),
        h_idx: p.h_idx,
        t_idx: p.t_idx,
        r: p.r.clone(),
    }
}

/// `2·TP / (|pred| + |gold|)`, which equals `2PR/(P+R)`; 0 when undefined.
pub fn f1_from_counts(tp: usize, predicted: usize, gold: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (predicted + gold) as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RelationScore {
    fn new(tp: usize, predicted: usize, gold: usize) -> Self {
        RelationScore {
            tp,
            fp: predicted - tp,
            fn_: gold - tp,
            precision: ratio(tp, predicted),
            recall: ratio(tp, gold),
            f1: f1_from_counts(tp, predicted, gold),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub predictions: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Average precision over the score-ranked predictions.
    pub auc: f64,
    pub step2_accuracy: Option<f64>,
    pub per_relation: BTreeMap<String, RelationScore>,
}

impl EvalReport {
    /// Pretty JSON with object keys in sorted order.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "predictions {}  gold {}  tp {}  fp {}  fn {}",
            self.predictions, self.gold, self.tp, self.fp, self.fn_
        )?;
        writeln!(
            f,
            "precision {:.4}  recall {:.4}  F1 {:.4}  AUC {:.4}",
            self.precision, self.recall, self.f1, self.auc
        )?;
        if let Some(acc) = self.step2_accuracy {
            writeln!(f, "step-2 accuracy {acc:.4}")?;
        }
        Ok(())
    }
}

/// Micro-averaged precision, recall and F1 against the corpus labels, plus
/// average precision and a per-relation breakdown.
pub fn micro_f1(preds: &[PredictionRecord], gold_docs: &[Document]) -> Result<EvalReport, EvalError> {
    let gold = GoldSet::new(gold_docs)?;
    score(preds, &gold)
}

pub fn score(preds: &[PredictionRecord], gold: &GoldSet) -> Result<EvalReport, EvalError> {
    gold.validate(preds)?;
    let mut predicted_per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut tp = 0;
    for p in preds {
        let hit = gold.contains(p);
        tp += usize::from(hit);
        let e = predicted_per.entry(p.r.as_str()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let gold_per = gold.gold_per_relation();
    let names: BTreeSet<&str> = predicted_per.keys().chain(gold_per.keys()).copied().collect();
    let per_relation = names
        .into_iter()
        .map(|r| {
            let (tp, predicted) = predicted_per.get(r).copied().unwrap_or((0, 0));
            let g = gold_per.get(r).copied().unwrap_or(0);
            (r.to_string(), RelationScore::new(tp, predicted, g))
        })
        .collect();
    let overall = RelationScore::new(tp, preds.len(), gold.len());
    Ok(EvalReport {
        tp,
        fp: overall.fp,
        fn_: overall.fn_,
        predictions: preds.len(),
        gold: gold.len(),
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        auc: average_precision(preds, gold),
        step2_accuracy: None,
        per_relation,
    })
}

/// Predictions sorted by descending score; ties by title, head, tail, relation.
pub fn rank(preds: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut ranked: Vec<&PredictionRecord> = preds.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key().cmp(&b.key())));
    ranked
}

/// Sum of precision@k over the ranks k of correct predictions, divided by the
/// number of gold triples (0 for an empty gold set).
pub fn average_precision(preds: &[PredictionRecord], gold: &GoldSet) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits: Vec<(u64, u64)> = rank(preds)
        .into_iter()
        .enumerate()
        .filter(|(_, p)| gold.contains(p))
        .enumerate()
        .map(|(c, (k, _))| (c as u64 + 1, k as u64 + 1))
        .collect();
    if let Some(ap) = exact_ap(&hits, gold.len() as u64) {
        return ap;
    }
    let sum: f64 = hits.iter().map(|&(c, k)| c as f64 / k as f64).sum();
    sum / gold.len() as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ c/k / gold` as a reduced fraction, correctly rounded; `None` once the
/// fraction no longer fits in the f64 mantissa.
fn exact_ap(hits: &[(u64, u64)], gold: u64) -> Option<f64> {
    const LIMIT: u128 = 1 << 53;
    let (mut num, mut den) = (0u128, 1u128);
    for &(c, k) in hits {
        let (c, k) = (u128::from(c), u128::from(k));
        num = num.checked_mul(k)?.checked_add(c.checked_mul(den)?)?;
        den = den.checked_mul(k)?;
        let g = gcd(num, den);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(u128::from(gold))?;
    let g = gcd(num, den);
    (num, den) = (num / g, den / g);
    (num < LIMIT && den < LIMIT).then(|| num as f64 / den as f64)
}

/// JSON array, one record per line.
pub fn predictions_to_json(records: &[PredictionRecord]) -> String {
    if records.is_empty() {
        return "[]\n".to_string();
    }
    let lines: Vec<String> = records
        .iter()
        .map(|r| format!("  {}", serde_json::to_string(r).expect("record serializes")))
        .collect();
    format!("[\n{}\n]\n", lines.join(",\n"))
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, predictions_to_json(records)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a prediction file. An empty file is an empty list; duplicates and
/// scores outside (0, 1] are rejected.
pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<PredictionRecord> = serde_json::from_str(text).map_err(|e| EvalError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    for r in &records {
        if !(r.score > 0.0 && r.score <= 1.0) {
            return Err(EvalError::Score {
                title: r.title.clone(),
                h_idx: r.h_idx,
                t_idx: r.t_idx,
                r: r.r.clone(),
                score: r.score,
            });
        }
        if !seen.insert(r.key()) {
            return Err(duplicate(r));
        }
    }
    Ok(records)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&text, path)
}

#[cfg(test)]
mod tests;
