//! Criterion checks shared by the integration tests and the acceptance
//! runner. Each panics on violation and returns a short summary otherwise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use docrel::corpus::relations::{class_of, relation_of};
use docrel::corpus::{
    corpus_stats, enumerate_pairs, linearize, load_corpus, training_view, Document, Entity, EntityType, Mention,
    RelationLabel, Vocabulary,
};
use docrel::encoder::{encode, BaseEncoder, EncoderConfig};
use docrel::eval::{average_precision, micro_f1, pipeline_predict, step2_accuracy, GoldSet, PredictionRecord};
use docrel::gradsuite;
use docrel::model::{argmax, RelModel};
use docrel::numerics::{GradCheckConfig, ParamStore, Tape, Tensor};
use docrel::relhead::{surviving_pairs, HeadConfig};
use docrel::synthetic::{marked_relation_corpus, overfit_corpus, random_corpus, RandomDocConfig};
use docrel::training::{na_quota, subsample_na, train, ModelBundle, ModelSpec, TrainConfig, TrainTask};

use super::{tiny_spec, untrained, vocab_for};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn gradient_suite() -> String {
    let results = gradsuite::run_all(GradCheckConfig::default());
    let mut worst: f64 = 0.0;
    for r in &results {
        match &r.report {
            Ok(report) => {
                assert!(report.passed(), "{} failed:\n{report}", r.name);
                worst = worst.max(report.max_rel_err());
            }
            Err(e) => panic!("{}: {e}", r.name),
        }
    }
    format!("{} fixtures, max rel err {worst:.2e}", results.len())
}

pub fn matmul_oracle(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::<f64>::new();
    for _ in 0..cases {
        let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = rand_tensor(&mut rng, vec![n, k], 2.0);
        let b = rand_tensor(&mut rng, vec![k, m], 2.0);
        let mut tape = Tape::new(&empty);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let got = tape.value(c);
        assert_eq!(got.shape(), &[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * m + j];
                }
                assert!((got.get2(i, j) - s).abs() < 1e-12, "matmul ({i},{j})");
            }
        }
    }
}

pub fn softmax_oracle(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::<f64>::new();
    for _ in 0..cases {
        let (n, c) = (rng.gen_range(1..5), rng.gen_range(1..8));
        let x = rand_tensor(&mut rng, vec![n, c], 6.0);
        let mut tape = Tape::new(&empty);
        let v = tape.constant(x.clone());
        let s = tape.softmax(v);
        let got = tape.value(s);
        for i in 0..n {
            let row = x.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let mut total = 0.0;
            for j in 0..c {
                let p = got.get2(i, j);
                assert!((0.0..=1.0).contains(&p));
                assert!((p - row[j].exp() / z).abs() < 1e-10, "softmax ({i},{j})");
                total += p;
            }
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

pub fn cross_entropy_oracle(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::<f64>::new();
    for _ in 0..cases {
        let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..7));
        let x = rand_tensor(&mut rng, vec![n, c], 4.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut tape = Tape::new(&empty);
        let v = tape.constant(x.clone());
        let loss = tape.cross_entropy(v, &labels).unwrap();
        let got = tape.value(loss).data()[0];
        let expected: f64 = (0..n)
            .map(|i| {
                let row = x.row(i);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[labels[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / n as f64;
        assert!((got - expected).abs() < 1e-10, "cross entropy {got} vs {expected}");
    }
}

pub fn bilinear_oracle(cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::<f64>::new();
    for _ in 0..cases {
        let (m, d, c) = (rng.gen_range(2..5), rng.gen_range(1..5), rng.gen_range(1..6));
        let e = rand_tensor(&mut rng, vec![m, d], 1.5);
        let w = rand_tensor(&mut rng, vec![c, d, d], 1.5);
        let b = rand_tensor(&mut rng, vec![c], 1.0);
        let pairs: Vec<(usize, usize)> = (0..rng.gen_range(1..6))
            .map(|_| (rng.gen_range(0..m), rng.gen_range(0..m)))
            .collect();
        let mut tape = Tape::new(&empty);
        let (ve, vw, vb) = (tape.constant(e.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let out = tape.bilinear(ve, vw, Some(vb), &pairs).unwrap();
        let got = tape.value(out);
        assert_eq!(got.shape(), &[pairs.len(), c]);
        for (p, &(h, t)) in pairs.iter().enumerate() {
            for k in 0..c {
                let mut s = b.data()[k];
                for i in 0..d {
                    for j in 0..d {
                        s += e.get2(h, i) * w.data()[k * d * d + i * d + j] * e.get2(t, j);
                    }
                }
                assert!((got.get2(p, k) - s).abs() < 1e-10, "bilinear pair {p} class {k}");
            }
        }
    }
}

pub struct ScoringInstance {
    pub docs: Vec<Document>,
    pub preds: Vec<PredictionRecord>,
}

fn plain_doc(title: String, n_entities: usize, labels: Vec<RelationLabel>) -> Document {
    let entities = (0..n_entities)
        .map(|i| Entity {
            mentions: vec![Mention {
                name: format!("e{i}"),
                sent_id: 0,
                start: i,
                end: i + 1,
                kind: EntityType::Misc,
            }],
        })
        .collect();
    Document {
        title,
        sentences: vec![(0..n_entities).map(|i| format!("e{i}")).collect()],
        entities,
        labels,
        labeled: true,
    }
}

/// Up to 10 gold triples and up to 20 predictions with tied scores.
pub fn scoring_instance(rng: &mut ChaCha8Rng) -> ScoringInstance {
    let n_docs = rng.gen_range(1..=3);
    let relations = ["P17", "P131", "P27", "P150"];
    let mut candidates = Vec::new();
    for d in 0..n_docs {
        for h in 0..4 {
            for t in 0..4 {
                if h != t {
                    for r in relations {
                        candidates.push((format!("doc{d}"), h, t, r.to_string()));
                    }
                }
            }
        }
    }
    candidates.shuffle(rng);
    let n_gold = rng.gen_range(0..=10);
    let gold = &candidates[..n_gold];
    let docs = (0..n_docs)
        .map(|d| {
            let title = format!("doc{d}");
            let labels = gold
                .iter()
                .filter(|g| g.0 == title)
                .map(|g| RelationLabel {
                    head: g.1,
                    tail: g.2,
                    relation: g.3.clone(),
                    class: class_of(&g.3).unwrap(),
                    evidence: Vec::new(),
                })
                .collect();
            plain_doc(title, 4, labels)
        })
        .collect();
    let mut pool: Vec<_> = gold.to_vec();
    pool.extend(candidates[n_gold..n_gold + 15].iter().cloned());
    pool.shuffle(rng);
    let n_pred = rng.gen_range(0..=20.min(pool.len()));
    let preds = pool[..n_pred]
        .iter()
        .map(|(title, h, t, r)| PredictionRecord {
            title: title.clone(),
            h_idx: *h,
            t_idx: *t,
            r: r.clone(),
            score: rng.gen_range(1..=5) as f64 / 5.0,
        })
        .collect();
    ScoringInstance { docs, preds }
}

fn to_f64(r: Ratio<i64>) -> f64 {
    // numerator and denominator are far below 2^53, so this is correctly rounded
    *r.numer() as f64 / *r.denom() as f64
}

fn is_gold(docs: &[Document], p: &PredictionRecord) -> bool {
    docs.iter().any(|d| {
        d.title == p.title
            && d.labels
                .iter()
                .any(|l| l.head == p.h_idx && l.tail == p.t_idx && l.relation == p.r)
    })
}

fn key(p: &PredictionRecord) -> (&str, usize, usize, &str) {
    (&p.title, p.h_idx, p.t_idx, &p.r)
}

/// micro_f1 and average_precision against rational-arithmetic counting.
pub fn scorer_oracle(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let inst = scoring_instance(&mut rng);
        let report = micro_f1(&inst.preds, &inst.docs).unwrap();
        let n_gold: i64 = inst.docs.iter().map(|d| d.labels.len() as i64).sum();
        let n_pred = inst.preds.len() as i64;
        let tp = inst.preds.iter().filter(|p| is_gold(&inst.docs, p)).count() as i64;
        assert_eq!(report.tp as i64, tp);
        let zero = Ratio::from_integer(0);
        let precision = if n_pred == 0 { zero } else { Ratio::new(tp, n_pred) };
        let recall = if n_gold == 0 { zero } else { Ratio::new(tp, n_gold) };
        let f1 = if tp == 0 {
            zero
        } else {
            precision * recall * 2 / (precision + recall)
        };
        assert_eq!(report.f1, to_f64(f1));
        assert_eq!(report.precision, to_f64(precision));
        assert_eq!(report.recall, to_f64(recall));

        let mut ap = zero;
        for p in inst.preds.iter().filter(|p| is_gold(&inst.docs, p)) {
            let ahead = |q: &PredictionRecord| q.score > p.score || (q.score == p.score && key(q) < key(p));
            let rank = 1 + inst.preds.iter().filter(|q| ahead(q)).count() as i64;
            let correct = 1 + inst
                .preds
                .iter()
                .filter(|q| ahead(q) && is_gold(&inst.docs, q))
                .count() as i64;
            ap += Ratio::new(correct, rank);
        }
        if n_gold > 0 {
            ap /= n_gold;
        }
        let gold = GoldSet::new(&inst.docs).unwrap();
        assert_eq!(average_precision(&inst.preds, &gold), to_f64(ap));
        assert_eq!(report.auc, to_f64(ap));
    }
}

/// Pipeline inference one pair at a time.
pub fn per_pair_pipeline(
    gate: &ModelBundle,
    relation: &ModelBundle,
    docs: &[Document],
    vocab: &Vocabulary,
    threshold: f64,
) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for doc in docs {
        let lin = linearize(doc, vocab, gate.model.encoder.max_len);
        for (h, t) in surviving_pairs(&lin.entity_positions) {
            let p1 = gate.model.probabilities(&gate.params, &lin, &[(h, t)]).unwrap()[0][1];
            if f64::from(p1) <= threshold {
                continue;
            }
            let p2 = &relation.model.probabilities(&relation.params, &lin, &[(h, t)]).unwrap()[0];
            let c = argmax(p2);
            out.push(PredictionRecord {
                title: doc.title.clone(),
                h_idx: h,
                t_idx: t,
                r: relation_of(c + 1).unwrap().to_string(),
                score: f64::from(p1) * f64::from(p2[c]),
            });
        }
    }
    out
}

pub fn pipeline_fixture(seed: u64) -> (Vec<Document>, Vocabulary, ModelBundle, ModelBundle) {
    let docs = random_corpus(50, seed, &RandomDocConfig::default());
    let vocab = vocab_for(&docs);
    let spec = tiny_spec();
    let gate = untrained(TrainTask::Gate, &vocab, &spec, seed + 1);
    let relation = untrained(TrainTask::Relation, &vocab, &spec, seed + 2);
    (docs, vocab, gate, relation)
}

pub fn pipeline_composition(seed: u64) -> String {
    let (docs, vocab, gate, relation) = pipeline_fixture(seed);
    let mut compared = 0;
    for threshold in [0.0, 0.5] {
        let batch = pipeline_predict(&gate, &relation, &docs, &vocab, threshold).unwrap();
        let oracle = per_pair_pipeline(&gate, &relation, &docs, &vocab, threshold);
        assert!(!oracle.is_empty(), "fixture admits no pairs at {threshold}");
        assert_eq!(batch.len(), oracle.len());
        for (a, b) in batch.iter().zip(&oracle) {
            assert_eq!(a, b);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert!(a.score > 0.0 && a.score <= 1.0);
        }
        compared += batch.len();
    }
    let mut previous: Option<BTreeSet<(String, usize, usize, String)>> = None;
    let mut sizes = Vec::new();
    for step in 1..=9 {
        let threshold = f64::from(step) / 10.0;
        let set: BTreeSet<_> = pipeline_predict(&gate, &relation, &docs, &vocab, threshold)
            .unwrap()
            .into_iter()
            .map(|p| (p.title, p.h_idx, p.t_idx, p.r))
            .collect();
        if let Some(prev) = &previous {
            assert!(set.is_subset(prev), "threshold {threshold} added predictions");
        }
        sizes.push(set.len());
        previous = Some(set);
    }
    format!("{} docs, {compared} records bit-exact, sizes over 0.1..0.9: {sizes:?}", docs.len())
}

pub fn subsampling_law(batches: usize, seed: u64) -> String {
    let docs = random_corpus(200, seed, &RandomDocConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut zero_positive = 0;
    for _ in 0..batches {
        let n = rng.gen_range(1..=4);
        let mut pairs = Vec::new();
        for d in index::sample(&mut rng, docs.len(), n) {
            pairs.extend(training_view(&enumerate_pairs(d, &docs[d])));
        }
        let positives = pairs.iter().filter(|p| !p.is_na()).count();
        let available = pairs.len() - positives;
        let kept = subsample_na(&pairs, 3.0, &mut rng);
        let kept_na: Vec<_> = kept.iter().filter(|p| p.is_na()).collect();
        let expected = if positives == 0 {
            zero_positive += 1;
            available.min(3)
        } else {
            available.min(3 * positives)
        };
        assert_eq!(kept_na.len(), expected);
        assert_eq!(na_quota(positives, available, 3.0), expected);
        assert_eq!(kept.len() - kept_na.len(), positives);
        let distinct: BTreeSet<_> = kept_na.iter().map(|p| (p.doc, p.head, p.tail)).collect();
        assert_eq!(distinct.len(), kept_na.len(), "N/A sampled with replacement");
    }
    assert!(zero_positive > 0, "no zero-positive batch drawn");
    format!("{batches} batches, {zero_positive} without positives")
}

pub fn sentence_locality(fixtures: usize, seed: u64) {
    let cfg = EncoderConfig {
        vocab_size: 60,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_len: 64,
        dropout: 0.1,
        mode: BaseEncoder::Transformer,
        sentence_scoped: true,
    };
    let (model, store) = RelModel::init(cfg.clone(), HeadConfig::new(16, 2), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |ids: &[usize], sents: &[usize]| {
        let mut tape = Tape::new(&store);
        let out = encode(&mut tape, &cfg, &model.enc_weights, ids, sents, None).unwrap();
        tape.value(out.contextual).clone()
    };
    for _ in 0..fixtures {
        let lens: Vec<usize> = (0..3).map(|_| rng.gen_range(1..8)).collect();
        let sents: Vec<usize> = lens.iter().enumerate().flat_map(|(s, &l)| vec![s; l]).collect();
        let ids: Vec<usize> = sents.iter().map(|_| rng.gen_range(2..60)).collect();
        let j = rng.gen_range(0..3);
        let positions: Vec<usize> = (0..ids.len()).filter(|&i| sents[i] == j).collect();
        let mut perturbed = ids.clone();
        let at = positions[rng.gen_range(0..positions.len())];
        perturbed[at] = 2 + (perturbed[at] - 2 + rng.gen_range(1..58)) % 58;
        let (a, b) = (run(&ids, &sents), run(&perturbed, &sents));
        let mut changed = false;
        for i in 0..ids.len() {
            let same = a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits());
            if sents[i] == j {
                changed |= !same;
            } else {
                assert!(same, "row {i} of sentence {} moved after editing sentence {j}", sents[i]);
            }
        }
        assert!(changed, "perturbation had no effect on its own sentence");
    }
}

/// Joint training on the overfit fixture at desk scale; returns the first
/// evaluated epoch with training micro-F1 ≥ 0.95.
pub fn overfit_joint(max_epochs: usize) -> String {
    let docs = overfit_corpus(0);
    let vocab = vocab_for(&docs);
    let cfg = TrainConfig {
        epochs: max_epochs,
        eval_every: 10,
        patience: Some(3),
        ..TrainConfig::new(TrainTask::Joint)
    };
    let mut reached = None;
    let bundle = docrel::training::train_with(&docs, &docs, &vocab, &ModelSpec::desk(), &cfg, |r| {
        if reached.is_none() && r.dev_metric.is_some_and(|f| f >= 0.95) {
            reached = Some(r.epoch);
        }
    })
    .unwrap();
    let preds = docrel::eval::joint_predict(&bundle, &docs, &vocab).unwrap();
    let f1 = micro_f1(&preds, &docs).unwrap().f1;
    let epoch = reached.unwrap_or_else(|| panic!("training F1 stayed below 0.95 for {max_epochs} epochs"));
    assert!(f1 >= 0.95, "retained bundle has F1 {f1}");
    format!("F1 {f1:.3} first reached at epoch {epoch}")
}

/// Step-2 accuracy on held-out documents of the 8-relation marked corpus.
/// The best epoch is picked on a separate dev split.
pub fn marked_step2() -> f64 {
    let docs = marked_relation_corpus(280, 8, 21);
    let (train_docs, rest) = docs.split_at(200);
    let (dev, test) = rest.split_at(30);
    let vocab = vocab_for(&docs);
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::new(TrainTask::Relation)
    };
    let bundle = train(train_docs, dev, &vocab, &ModelSpec::desk(), &cfg).unwrap();
    step2_accuracy(&bundle, test, &vocab).unwrap().unwrap()
}

/// Corpus file under `$DOCREL_DATA_DIR`, if configured and present.
pub fn data_file(name: &str) -> Option<PathBuf> {
    let root = std::env::var_os("DOCREL_DATA_DIR")?;
    let path = Path::new(&root).join(name);
    path.exists().then_some(path)
}

pub fn require_data(names: &[&str]) -> Vec<PathBuf> {
    names
        .iter()
        .map(|n| data_file(n).unwrap_or_else(|| panic!("dataset file {n} not found (set DOCREL_DATA_DIR)")))
        .collect()
}

pub fn expect_stats(path: &Path, docs: usize, relation_types: Option<usize>, instances: usize) -> String {
    let corpus = load_corpus(path).unwrap();
    let stats = corpus_stats(&corpus);
    assert_eq!(stats.documents, docs, "{}: documents", path.display());
    if let Some(r) = relation_types {
        assert_eq!(stats.relation_types, r, "{}: relation types", path.display());
    }
    assert_eq!(stats.instances, instances, "{}: instances", path.display());
    format!("{} docs / {} types / {} instances", stats.documents, stats.relation_types, stats.instances)
}
