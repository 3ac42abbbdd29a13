use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CorpusError, Document};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const SPECIALS: [&str; 2] = ["[PAD]", "[UNK]"];

/// Lowercased word-level vocabulary.
///
/// Ids 0 and 1 are reserved for padding and unknown tokens; the rest are
/// ordered by descending count, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
    hash: String,
}

impl Vocabulary {
    fn from_sorted(entries: Vec<(String, usize)>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0, 0];
        for (tok, count) in entries {
            tokens.push(tok);
            counts.push(count);
        }
        let index = tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut vocab = Vocabulary {
            tokens,
            counts,
            index,
            hash: String::new(),
        };
        vocab.hash = hex::encode(Sha256::digest(vocab.to_text().as_bytes()));
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    /// SHA-256 of the persisted text form.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    /// One `token<TAB>count` line per non-special token, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (tok, count) in self.tokens.iter().zip(&self.counts).skip(SPECIALS.len()) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line.rsplit_once('\t').ok_or_else(|| CorpusError::Vocab {
                line: i + 1,
                reason: "expected `token<TAB>count`".into(),
            })?;
            let count = count.parse().map_err(|_| CorpusError::Vocab {
                line: i + 1,
                reason: format!("bad count `{count}`"),
            })?;
            entries.push((tok.to_string(), count));
        }
        let vocab = Vocabulary::from_sorted(entries);
        if vocab.index.len() + SPECIALS.len() != vocab.tokens.len() {
            return Err(CorpusError::Vocab {
                line: 0,
                reason: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocabulary::from_text(&text)
    }
}

/// Counts lowercased tokens and keeps those seen at least `min_count` times.
pub fn build_vocab(docs: &[Document], min_count: usize) -> Result<Vocabulary, CorpusError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in docs.iter().flat_map(|d| d.sentences.iter().flatten()) {
        *counts.entry(tok.to_lowercase()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !t.contains(['\n', '\r']))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_sorted(entries))
}
