//! Generated DocRED-format corpora for tests and desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{relations, Document, Entity, EntityType, Mention, RelationLabel};

const FILLER: usize = 40;
const NAMES: usize = 120;

fn filler(rng: &mut impl Rng) -> String {
    format!("w{}", rng.gen_range(0..FILLER))
}

fn label(head: usize, tail: usize, class: usize) -> RelationLabel {
    RelationLabel {
        head,
        tail,
        relation: relations::relation_of(class).expect("class in range").to_string(),
        class,
        evidence: Vec::new(),
    }
}

#[derive(Clone, Debug)]
pub struct RandomDocConfig {
    pub sentences: std::ops::RangeInclusive<usize>,
    pub sentence_len: std::ops::RangeInclusive<usize>,
    pub entities: std::ops::RangeInclusive<usize>,
    pub labels: std::ops::RangeInclusive<usize>,
    /// Relation classes drawn from `1..=max_class`.
    pub max_class: usize,
    /// Allow several classes on one ordered pair.
    pub multi_label: bool,
}

impl Default for RandomDocConfig {
    fn default() -> Self {
        RandomDocConfig {
            sentences: 1..=4,
            sentence_len: 3..=10,
            entities: 2..=5,
            labels: 0..=4,
            max_class: relations::NUM_RELATIONS,
            multi_label: true,
        }
    }
}

/// A document with random filler text, non-overlapping entity mentions and
/// random gold labels.
pub fn random_document(rng: &mut ChaCha8Rng, title: String, cfg: &RandomDocConfig) -> Document {
    let n_sents = rng.gen_range(cfg.sentences.clone());
    let sentences: Vec<Vec<String>> = (0..n_sents)
        .map(|_| {
            let len = rng.gen_range(cfg.sentence_len.clone());
            (0..len).map(|_| filler(rng)).collect()
        })
        .collect();
    let mut doc = Document {
        title,
        sentences,
        entities: Vec::new(),
        labels: Vec::new(),
        labeled: true,
    };
    let mut used: Vec<Vec<bool>> = doc.sentences.iter().map(|s| vec![false; s.len()]).collect();
    for _ in 0..rng.gen_range(cfg.entities.clone()) {
        let mut mentions = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            let free: Vec<(usize, usize)> = used
                .iter()
                .enumerate()
                .flat_map(|(s, u)| (0..u.len()).filter(|&i| !u[i]).map(move |i| (s, i)))
                .collect();
            if free.is_empty() {
                break;
            }
            let (sent_id, start) = free[rng.gen_range(0..free.len())];
            let mut end = start + 1;
            if rng.gen_bool(0.5) && end < used[sent_id].len() && !used[sent_id][end] {
                end += 1;
            }
            used[sent_id][start..end].iter_mut().for_each(|u| *u = true);
            doc.sentences[sent_id][start] = format!("n{}", rng.gen_range(0..NAMES));
            mentions.push(Mention {
                name: doc.sentences[sent_id][start..end].join(" "),
                sent_id,
                start,
                end,
                kind: EntityType::Misc,
            });
        }
        if mentions.is_empty() {
            break;
        }
        doc.entities.push(Entity { mentions });
    }
    let m = doc.entities.len();
    if m >= 2 {
        for _ in 0..rng.gen_range(cfg.labels.clone()) {
            let head = rng.gen_range(0..m);
            let tail = (head + rng.gen_range(1..m)) % m;
            let class = rng.gen_range(1..=cfg.max_class);
            let taken = doc
                .labels
                .iter()
                .any(|l| l.head == head && l.tail == tail && (l.class == class || !cfg.multi_label));
            if !taken {
                doc.labels.push(label(head, tail, class));
            }
        }
    }
    doc
}

pub fn random_corpus(n: usize, seed: u64, cfg: &RandomDocConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_document(&mut rng, format!("synthetic-{seed}-{i}"), cfg))
        .collect()
}

/// Five small documents with a handful of labeled pairs each; small enough
/// to be memorized.
pub fn overfit_corpus(seed: u64) -> Vec<Document> {
    let cfg = RandomDocConfig {
        sentences: 2..=3,
        sentence_len: 5..=8,
        entities: 3..=4,
        labels: 2..=3,
        max_class: 6,
        multi_label: false,
    };
    let mut docs = random_corpus(5, seed, &cfg);
    for (i, d) in docs.iter_mut().enumerate() {
        d.title = format!("overfit-{i}");
    }
    docs
}

/// Relation corpus where the class of each gold pair is marked by a token
/// inside the head mention (`<name> r<k>`), drawn from `n_relations` classes.
///
/// Every entity takes part in exactly one relation, so the marker alone
/// determines the label.
pub fn marked_relation_corpus(n_docs: usize, n_relations: usize, seed: u64) -> Vec<Document> {
    assert!((1..=relations::NUM_RELATIONS).contains(&n_relations));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let mut doc = Document {
                title: format!("marked-{seed}-{i}"),
                sentences: Vec::new(),
                entities: Vec::new(),
                labels: Vec::new(),
                labeled: true,
            };
            for _ in 0..rng.gen_range(2..=3) {
                let class = rng.gen_range(1..=n_relations);
                let mut sent: Vec<String> = (0..rng.gen_range(0..3)).map(|_| filler(&mut rng)).collect();
                let head_start = sent.len();
                sent.push(format!("n{}", rng.gen_range(0..NAMES)));
                sent.push(format!("r{class}"));
                sent.extend((0..rng.gen_range(1..3)).map(|_| filler(&mut rng)));
                let tail_start = sent.len();
                sent.push(format!("n{}", rng.gen_range(0..NAMES)));
                sent.push("obj".to_string());
                sent.push(".".to_string());
                let sent_id = doc.sentences.len();
                let head = doc.entities.len();
                for start in [head_start, tail_start] {
                    doc.entities.push(Entity {
                        mentions: vec![Mention {
                            name: sent[start..start + 2].join(" "),
                            sent_id,
                            start,
                            end: start + 2,
                            kind: EntityType::Misc,
                        }],
                    });
                }
                doc.labels.push(label(head, head + 1, class));
                doc.sentences.push(sent);
            }
            doc
        })
        .collect()
}

/// Documents whose gold classes are exactly balanced over all 96 relations
/// and independent of the text: `n_pairs` gold pairs in total.
pub fn balanced_relation_corpus(n_pairs: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n_pairs)
        .map(|i| 1 + i % relations::NUM_RELATIONS)
        .collect();
    classes.shuffle(&mut rng);
    let cfg = RandomDocConfig {
        sentences: 3..=3,
        sentence_len: 8..=10,
        entities: 6..=6,
        labels: 0..=0,
        max_class: relations::NUM_RELATIONS,
        multi_label: false,
    };
    let mut docs = Vec::new();
    let mut next = classes.into_iter().peekable();
    let mut i = 0;
    while next.peek().is_some() {
        let mut doc = random_document(&mut rng, format!("balanced-{seed}-{i}"), &cfg);
        for h in 0..3 {
            if let Some(class) = next.next() {
                doc.labels.push(label(h, h + 3, class));
            }
        }
        docs.push(doc);
        i += 1;
    }
    docs
}
