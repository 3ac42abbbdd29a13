use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::relations;
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Person,
    #[serde(rename = "LOC")]
    Location,
    #[serde(rename = "ORG")]
    Organization,
    #[serde(rename = "TIME")]
    Time,
    #[serde(rename = "NUM")]
    Number,
    #[serde(rename = "MISC")]
    Misc,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PER",
            EntityType::Location => "LOC",
            EntityType::Organization => "ORG",
            EntityType::Time => "TIME",
            EntityType::Number => "NUM",
            EntityType::Misc => "MISC",
        }
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "PER" => EntityType::Person,
            "LOC" => EntityType::Location,
            "ORG" => EntityType::Organization,
            "TIME" => EntityType::Time,
            "NUM" => EntityType::Number,
            "MISC" => EntityType::Misc,
            other => return Err(format!("unknown entity type `{other}`")),
        })
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One occurrence of an entity: tokens `start..end` of sentence `sent_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub name: String,
    pub sent_id: usize,
    pub start: usize,
    pub end: usize,
    pub kind: EntityType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub mentions: Vec<Mention>,
}

impl Entity {
    /// Type of the first mention.
    pub fn entity_type(&self) -> EntityType {
        self.mentions[0].kind
    }
}

/// A gold relation instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationLabel {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
    /// Class index in `1..=96`.
    pub class: usize,
    pub evidence: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    pub labels: Vec<RelationLabel>,
    /// Whether the source record carried a `labels` field.
    pub labeled: bool,
}

impl Document {
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn to_record(&self) -> RawDocument {
        RawDocument {
            title: self.title.clone(),
            sents: self.sentences.clone(),
            vertex_set: self
                .entities
                .iter()
                .map(|e| {
                    e.mentions
                        .iter()
                        .map(|m| RawMention {
                            name: m.name.clone(),
                            sent_id: m.sent_id,
                            pos: [m.start, m.end],
                            kind: m.kind.as_str().to_string(),
                        })
                        .collect()
                })
                .collect(),
            labels: self.labeled.then(|| {
                self.labels
                    .iter()
                    .map(|l| RawLabel {
                        h: l.head,
                        t: l.tail,
                        r: l.relation.clone(),
                        evidence: l.evidence.clone(),
                    })
                    .collect()
            }),
        }
    }

    pub fn from_record(raw: RawDocument) -> Result<Self, String> {
        let n_sents = raw.sents.len();
        let mut entities = Vec::with_capacity(raw.vertex_set.len());
        for (e, vertex) in raw.vertex_set.into_iter().enumerate() {
            if vertex.is_empty() {
                return Err(format!("entity {e} has no mentions"));
            }
            let mut mentions = Vec::with_capacity(vertex.len());
            for (k, m) in vertex.into_iter().enumerate() {
                let [start, end] = m.pos;
                if m.sent_id >= n_sents {
                    return Err(format!(
                        "entity {e} mention {k}: sentence {} out of range ({n_sents} sentences)",
                        m.sent_id
                    ));
                }
                let len = raw.sents[m.sent_id].len();
                if start >= end || end > len {
                    return Err(format!(
                        "entity {e} mention {k}: span [{start}, {end}) invalid for sentence {} of length {len}",
                        m.sent_id
                    ));
                }
                let kind = m.kind.parse().map_err(|err| format!("entity {e} mention {k}: {err}"))?;
                mentions.push(Mention {
                    name: m.name,
                    sent_id: m.sent_id,
                    start,
                    end,
                    kind,
                });
            }
            entities.push(Entity { mentions });
        }
        let labeled = raw.labels.is_some();
        let mut labels = Vec::new();
        for (i, l) in raw.labels.unwrap_or_default().into_iter().enumerate() {
            let m = entities.len();
            if l.h >= m || l.t >= m {
                return Err(format!(
                    "label {i}: entity index ({}, {}) out of range for {m} entities",
                    l.h, l.t
                ));
            }
            if l.h == l.t {
                return Err(format!("label {i}: head and tail are both entity {}", l.h));
            }
            let class = relations::class_of(&l.r)
                .ok_or_else(|| format!("label {i}: unknown relation id `{}`", l.r))?;
            labels.push(RelationLabel {
                head: l.h,
                tail: l.t,
                relation: l.r,
                class,
                evidence: l.evidence,
            });
        }
        Ok(Document {
            title: raw.title,
            sentences: raw.sents,
            entities,
            labels,
            labeled,
        })
    }
}

/// DocRED record as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub title: String,
    pub sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    pub vertex_set: Vec<Vec<RawMention>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<RawLabel>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMention {
    pub name: String,
    pub sent_id: usize,
    pub pos: [usize; 2],
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLabel {
    pub h: usize,
    pub t: usize,
    pub r: String,
    #[serde(default)]
    pub evidence: Vec<usize>,
}

/// Parses a JSON array of DocRED records.
pub fn parse_corpus(json: &str) -> Result<Vec<Document>, CorpusError> {
    let records: Vec<Value> = serde_json::from_str(json).map_err(CorpusError::Json)?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let title = value
                .get("title")
                .and_then(Value::as_str)
                .unwrap_or("<untitled>")
                .to_string();
            let raw: RawDocument = serde_json::from_value(value).map_err(|e| CorpusError::Record {
                index,
                title: title.clone(),
                reason: e.to_string(),
            })?;
            Document::from_record(raw).map_err(|reason| CorpusError::Record {
                index,
                title,
                reason,
            })
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn to_json(docs: &[Document]) -> String {
    let records: Vec<RawDocument> = docs.iter().map(Document::to_record).collect();
    serde_json::to_string(&records).expect("records serialize")
}
