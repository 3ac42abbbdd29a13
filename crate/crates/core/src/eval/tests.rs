use std::path::Path;

use super::*;
use crate::corpus::{build_vocab, parse_corpus};
use crate::synthetic::overfit_corpus;
use crate::training::{ModelSpec, TrainConfig};

fn rec(title: &str, h: usize, t: usize, r: &str, score: f64) -> PredictionRecord {
    PredictionRecord {
        title: title.into(),
        h_idx: h,
        t_idx: t,
        r: r.into(),
        score,
    }
}

/// One document with five entities and gold triples B, C, D, E.
fn gold_docs() -> Vec<Document> {
    let mention = |i: usize| {
        format!(r#"[{{"name": "e{i}", "sent_id": 0, "pos": [{i}, {}], "type": "MISC"}}]"#, i + 1)
    };
    let vertex: Vec<String> = (0..5).map(mention).collect();
    let json = format!(
        r#"[{{"title": "doc", "sents": [["a", "b", "c", "d", "e"]], "vertexSet": [{}],
            "labels": [{{"h": 0, "t": 1, "r": "P17"}}, {{"h": 1, "t": 2, "r": "P17"}},
                       {{"h": 2, "t": 3, "r": "P131"}}, {{"h": 3, "t": 4, "r": "P27"}}]}}]"#,
        vertex.join(", ")
    );
    parse_corpus(&json).unwrap()
}

#[test]
fn perfect_predictions() {
    let docs = gold_docs();
    let preds: Vec<_> = docs[0]
        .labels
        .iter()
        .map(|l| rec("doc", l.head, l.tail, &l.relation, 0.9))
        .collect();
    let r = micro_f1(&preds, &docs).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0));
    assert_eq!((r.tp, r.fp, r.fn_), (4, 0, 0));
}

#[test]
fn empty_predictions() {
    let r = micro_f1(&[], &gold_docs()).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.auc), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.fn_, 4);
}

#[test]
fn hand_counted_report() {
    // A is wrong; B and C are gold; D and E are missed
    let preds = vec![
        rec("doc", 4, 0, "P17", 0.9),
        rec("doc", 0, 1, "P17", 0.8),
        rec("doc", 1, 2, "P17", 0.7),
    ];
    let r = micro_f1(&preds, &gold_docs()).unwrap();
    assert_eq!(r.precision, 2.0 / 3.0);
    assert_eq!(r.recall, 0.5);
    assert_eq!(r.f1, 4.0 / 7.0);
    let p17 = &r.per_relation["P17"];
    assert_eq!((p17.tp, p17.fp, p17.fn_), (2, 1, 0));
    assert_eq!(r.per_relation["P27"].fn_, 1);
    // ranks 2 and 3 correct: (1/2 + 2/3) / 4
    assert!((r.auc - (0.5 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
}

#[test]
fn average_precision_examples() {
    let docs = gold_docs();
    let two = GoldSet::new(&[Document { labels: docs[0].labels[..2].to_vec(), ..docs[0].clone() }]).unwrap();
    let one = GoldSet::new(&[Document { labels: docs[0].labels[..1].to_vec(), ..docs[0].clone() }]).unwrap();
    let (good1, good2) = (rec("doc", 0, 1, "P17", 0.9), rec("doc", 1, 2, "P17", 0.5));
    let wrong = rec("doc", 2, 1, "P17", 0.7);
    assert_eq!(average_precision(&[good1.clone(), good2.clone()], &two), 1.0);
    let low = PredictionRecord { score: 0.6, ..good1.clone() };
    assert_eq!(average_precision(&[low.clone(), wrong.clone()], &one), 0.5);
    assert!((average_precision(&[good1, wrong, good2], &two) - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn ties_ranked_by_key() {
    let preds = vec![
        rec("b", 0, 1, "P17", 0.5),
        rec("a", 1, 0, "P17", 0.5),
        rec("a", 0, 1, "P27", 0.5),
        rec("a", 0, 1, "P131", 0.5),
        rec("z", 0, 1, "P17", 0.9),
    ];
    let order: Vec<(&str, usize, &str)> = rank(&preds)
        .iter()
        .map(|p| (p.title.as_str(), p.h_idx, p.r.as_str()))
        .collect();
    assert_eq!(
        order,
        vec![("z", 0, "P17"), ("a", 0, "P131"), ("a", 0, "P27"), ("a", 1, "P17"), ("b", 0, "P17")]
    );
}

#[test]
fn invalid_predictions_rejected() {
    let docs = gold_docs();
    assert!(matches!(
        micro_f1(&[rec("nope", 0, 1, "P17", 0.5)], &docs),
        Err(EvalError::UnknownTitle(_))
    ));
    assert!(matches!(
        micro_f1(&[rec("doc", 0, 5, "P17", 0.5)], &docs),
        Err(EvalError::EntityOutOfRange { index: 5, .. })
    ));
    for r in ["P0", "NA"] {
        assert!(matches!(
            micro_f1(&[rec("doc", 0, 1, r, 0.5)], &docs),
            Err(EvalError::UnknownRelation(_))
        ));
    }
    let dup = vec![rec("doc", 0, 1, "P17", 0.5), rec("doc", 0, 1, "P17", 0.4)];
    assert!(matches!(micro_f1(&dup, &docs), Err(EvalError::Duplicate { .. })));
    let twice = vec![docs[0].clone(), docs[0].clone()];
    assert!(matches!(micro_f1(&[], &twice), Err(EvalError::DuplicateTitle(_))));
}

#[test]
fn report_json_keys_sorted() {
    let r = micro_f1(&[rec("doc", 0, 1, "P17", 0.5)], &gold_docs()).unwrap();
    let json = r.to_json();
    let keys: Vec<usize> = ["\"auc\"", "\"f1\"", "\"fn\"", "\"fp\"", "\"gold\"", "\"per_relation\"", "\"precision\""]
        .iter()
        .map(|k| json.find(k).unwrap())
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]), "{json}");
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn prediction_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.json");
    let records = vec![
        rec("z doc", 3, 1, "P17", 0.1 + 0.2),
        rec("a \"quoted\" doc", 0, 2, "P6", 1.0),
        rec("z doc", 1, 3, "P17", f64::MIN_POSITIVE),
    ];
    write_predictions(&records, &path).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), records);
    write_predictions(&[], &path).unwrap();
    assert!(read_predictions(&path).unwrap().is_empty());
    fs::write(&path, "").unwrap();
    assert!(read_predictions(&path).unwrap().is_empty());
}

#[test]
fn malformed_prediction_files() {
    let p = Path::new("x.json");
    let dup = r#"[{"title":"a","h_idx":0,"t_idx":1,"r":"P17","score":0.5},
                  {"title":"a","h_idx":0,"t_idx":1,"r":"P17","score":0.2}]"#;
    assert!(matches!(parse_predictions(dup, p), Err(EvalError::Duplicate { .. })));
    let bad = "[\n  {\"title\": \"a\", \"h_idx\": -1}\n]";
    match parse_predictions(bad, p) {
        Err(EvalError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let zero = r#"[{"title":"a","h_idx":0,"t_idx":1,"r":"P17","score":0.0}]"#;
    assert!(matches!(parse_predictions(zero, p), Err(EvalError::Score { .. })));
    let extra = r#"[{"title":"a","h_idx":0,"t_idx":1,"r":"P17","score":0.5,"evidence":[]}]"#;
    assert_eq!(parse_predictions(extra, p).unwrap().len(), 1);
}

fn bundles(docs: &[Document]) -> (Vocabulary, ModelBundle, ModelBundle, ModelBundle) {
    let vocab = build_vocab(docs, 1).unwrap();
    let spec = ModelSpec {
        d_low: 8,
        ..crate::training::tests::tiny_spec()
    };
    let make = |task| ModelBundle::untrained(&vocab, &spec, &TrainConfig::new(task)).unwrap();
    let (g, r, j) = (make(TrainTask::Gate), make(TrainTask::Relation), make(TrainTask::Joint));
    (vocab, g, r, j)
}

/// Zero bilinear weights so every pair gets exactly the class biases.
fn set_head_bias(bundle: &mut ModelBundle, bias: &[f32]) {
    let w = bundle.params.id("head.bilinear.w").unwrap();
    bundle.params.get_mut(w).value.data_mut().fill(0.0);
    let b = bundle.params.id("head.bilinear.b").unwrap();
    bundle.params.get_mut(b).value.data_mut().copy_from_slice(bias);
}

#[test]
fn pipeline_composes_probabilities() {
    let docs = overfit_corpus(1);
    let (vocab, mut gate, mut rel, _) = bundles(&docs);
    set_head_bias(&mut gate, &[0.0, 4f32.ln()]);
    let mut rb = vec![0.0f32; 96];
    rb[16] = (0.9f32 * 95.0 / 0.1).ln();
    set_head_bias(&mut rel, &rb);
    let preds = pipeline_predict(&gate, &rel, &docs[..1], &vocab, 0.5).unwrap();
    let m = docs[0].entities.len();
    assert_eq!(preds.len(), m * (m - 1));
    for p in &preds {
        assert_eq!(p.r, relations::relation_of(17).unwrap());
        assert!((p.score - 0.72).abs() < 1e-5, "{}", p.score);
    }
    assert!(pipeline_predict(&gate, &rel, &docs, &vocab, 0.81).unwrap().is_empty());
}

#[test]
fn pipeline_checks_bundles() {
    let docs = overfit_corpus(1);
    let (vocab, gate, rel, joint) = bundles(&docs);
    assert!(matches!(
        pipeline_predict(&rel, &gate, &docs, &vocab, 0.5),
        Err(EvalError::Config(_))
    ));
    assert!(joint_predict(&gate, &docs, &vocab).is_err());
    let other = build_vocab(&overfit_corpus(2), 1).unwrap();
    assert!(matches!(
        joint_predict(&joint, &docs, &other),
        Err(EvalError::Bundle(BundleError::VocabMismatch { .. }))
    ));
    assert!(pipeline_predict(&gate, &rel, &docs, &vocab, 1.5).is_err());
}

#[test]
fn joint_ties_fall_to_na() {
    let docs = overfit_corpus(1);
    let (vocab, _, _, mut joint) = bundles(&docs);
    set_head_bias(&mut joint, &[0.0; 97]);
    assert!(joint_predict(&joint, &docs, &vocab).unwrap().is_empty());
    let mut bias = vec![0.0f32; 97];
    bias[5] = 3.0;
    set_head_bias(&mut joint, &bias);
    let preds = joint_predict(&joint, &docs[..1], &vocab).unwrap();
    let m = docs[0].entities.len();
    assert_eq!(preds.len(), m * (m - 1));
    assert!(preds.iter().all(|p| p.r == relations::relation_of(5).unwrap()));
}

#[test]
fn step2_accuracy_rules() {
    let mut docs = overfit_corpus(1);
    let (vocab, _, mut rel, _) = bundles(&docs);
    let mut bias = vec![0.0f32; 96];
    bias[2] = 5.0; // always predicts class 3
    set_head_bias(&mut rel, &bias);
    for d in docs.iter_mut() {
        d.labels.iter_mut().for_each(|l| {
            l.class = 4;
            l.relation = relations::relation_of(4).unwrap().into();
        });
    }
    assert_eq!(step2_accuracy(&rel, &docs, &vocab).unwrap(), Some(0.0));
    // add class 3 as a second gold relation of the first pair
    let first = docs[0].labels[0].clone();
    docs[0].labels.push(crate::corpus::RelationLabel {
        class: 3,
        relation: relations::relation_of(3).unwrap().into(),
        ..first
    });
    let acc = step2_accuracy(&rel, &docs, &vocab).unwrap().unwrap();
    assert!(acc > 0.0);
    for d in docs.iter_mut() {
        d.labels.clear();
    }
    assert_eq!(step2_accuracy(&rel, &docs, &vocab).unwrap(), None);
}
