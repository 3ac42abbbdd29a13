//! DocRED ingestion, vocabulary, document linearization and pair enumeration.

mod document;
pub mod relations;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use document::{
    load_corpus, parse_corpus, to_json, Document, Entity, EntityType, Mention, RawDocument,
    RawLabel, RawMention, RelationLabel,
};
pub use relations::{NA_CLASS, NUM_RELATIONS};
pub use vocab::{build_vocab, Vocabulary, PAD, UNK};

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus JSON: {0}")]
    Json(#[source] serde_json::Error),
    #[error("document {index} (`{title}`): {reason}")]
    Record {
        index: usize,
        title: String,
        reason: String,
    },
    #[error("vocabulary line {line}: {reason}")]
    Vocab { line: usize, reason: String },
    #[error("corpus has no tokens")]
    EmptyCorpus,
}

/// A document flattened into one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearDoc {
    pub token_ids: Vec<usize>,
    /// Sentence index of every position.
    pub sentence_ids: Vec<usize>,
    /// Sorted, de-duplicated in-window positions of each entity's mentions.
    /// Empty for entities that lie entirely past the window.
    pub entity_positions: Vec<Vec<usize>>,
    /// Length before truncation.
    pub full_len: usize,
}

impl LinearDoc {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn in_window(&self, entity: usize) -> bool {
        !self.entity_positions[entity].is_empty()
    }

    /// Entities with no surviving position.
    pub fn out_of_window(&self) -> Vec<usize> {
        (0..self.entity_positions.len())
            .filter(|&e| !self.in_window(e))
            .collect()
    }

    pub fn surviving_entities(&self) -> Vec<usize> {
        (0..self.entity_positions.len())
            .filter(|&e| self.in_window(e))
            .collect()
    }
}

/// Concatenates sentences and truncates to `max_len` tokens.
pub fn linearize(doc: &Document, vocab: &Vocabulary, max_len: usize) -> LinearDoc {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut offsets = Vec::with_capacity(doc.sentences.len());
    let mut token_ids = Vec::new();
    let mut sentence_ids = Vec::new();
    for (s, sent) in doc.sentences.iter().enumerate() {
        offsets.push(token_ids.len());
        for tok in sent {
            token_ids.push(vocab.id(tok));
            sentence_ids.push(s);
        }
    }
    let full_len = token_ids.len();
    token_ids.truncate(max_len);
    sentence_ids.truncate(max_len);
    let entity_positions = doc
        .entities
        .iter()
        .map(|e| {
            let set: BTreeSet<usize> = e
                .mentions
                .iter()
                .flat_map(|m| (offsets[m.sent_id] + m.start)..(offsets[m.sent_id] + m.end))
                .filter(|&p| p < max_len)
                .collect();
            set.into_iter().collect()
        })
        .collect();
    LinearDoc {
        token_ids,
        sentence_ids,
        entity_positions,
        full_len,
    }
}

/// An ordered entity pair and its gold classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairInstance {
    /// Index of the document in its corpus.
    pub doc: usize,
    pub head: usize,
    pub tail: usize,
    /// Training label: 0 for N/A, otherwise one of `all_gold_classes`.
    pub label_class: usize,
    pub all_gold_classes: BTreeSet<usize>,
}

impl PairInstance {
    pub fn is_na(&self) -> bool {
        self.label_class == NA_CLASS
    }
}

/// All `m(m-1)` ordered pairs in `(head, tail)` order.
///
/// `label_class` is the smallest gold class of the pair (or 0);
/// [`training_view`] expands multi-label pairs.
pub fn enumerate_pairs(doc_index: usize, doc: &Document) -> Vec<PairInstance> {
    let m = doc.entities.len();
    if m < 2 {
        return Vec::new();
    }
    let mut gold: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for l in &doc.labels {
        gold.entry((l.head, l.tail)).or_default().insert(l.class);
    }
    let mut out = Vec::with_capacity(m * (m - 1));
    for head in 0..m {
        for tail in 0..m {
            if head == tail {
                continue;
            }
            let classes = gold.remove(&(head, tail)).unwrap_or_default();
            out.push(PairInstance {
                doc: doc_index,
                head,
                tail,
                label_class: classes.first().copied().unwrap_or(NA_CLASS),
                all_gold_classes: classes,
            });
        }
    }
    out
}

/// One instance per gold relation of each pair; N/A pairs pass through.
pub fn training_view(pairs: &[PairInstance]) -> Vec<PairInstance> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.all_gold_classes.len() <= 1 {
            out.push(p.clone());
        } else {
            out.extend(p.all_gold_classes.iter().map(|&c| PairInstance {
                label_class: c,
                ..p.clone()
            }));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    /// Distinct relation ids among the labels.
    pub relation_types: usize,
    /// Label entries.
    pub instances: usize,
    /// Ordered entity pairs.
    pub pairs: usize,
    /// Ordered pairs with at least one gold relation.
    pub positive_pairs: usize,
    pub positive_rate: f64,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let mut relations = BTreeSet::new();
    let mut stats = CorpusStats {
        documents: docs.len(),
        ..CorpusStats::default()
    };
    for doc in docs {
        let m = doc.entities.len();
        stats.pairs += m * m.saturating_sub(1);
        stats.instances += doc.labels.len();
        let positive: BTreeSet<(usize, usize)> =
            doc.labels.iter().map(|l| (l.head, l.tail)).collect();
        stats.positive_pairs += positive.len();
        relations.extend(doc.labels.iter().map(|l| l.relation.as_str()));
    }
    stats.relation_types = relations.len();
    if stats.pairs > 0 {
        stats.positive_rate = stats.positive_pairs as f64 / stats.pairs as f64;
    }
    stats
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "documents       {}", self.documents)?;
        writeln!(f, "relation types  {}", self.relation_types)?;
        writeln!(f, "instances       {}", self.instances)?;
        writeln!(f, "entity pairs    {}", self.pairs)?;
        writeln!(f, "positive pairs  {}", self.positive_pairs)?;
        write!(f, "positive rate   {:.4}", self.positive_rate)
    }
}
