use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelSpec, TrainConfig, TrainMeta, TrainTask};
use crate::corpus::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::model::{ModelError, RelModel};
use crate::numerics::{ParamStore, Tensor};
use crate::relhead::HeadConfig;

pub const BUNDLE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DOCRELBN";
const CHECKSUM_LEN: usize = 32;

/// A trained model: configs, named weights, task tag and provenance.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub task: TrainTask,
    pub model: RelModel,
    pub params: ParamStore<f32>,
    pub vocab_hash: String,
    pub meta: TrainMeta,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot access bundle {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a bundle file (bad magic)")]
    BadMagic,
    #[error("bundle version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bundle is truncated: {0}")]
    Truncated(String),
    #[error("bundle checksum mismatch")]
    Checksum,
    #[error("malformed bundle header: {0}")]
    Header(String),
    #[error("bundle was trained with vocabulary {bundle}, supplied vocabulary is {supplied}")]
    VocabMismatch { bundle: String, supplied: String },
    #[error("bundle task `{task}` needs {expected} classes, head has {found}")]
    TaskMismatch {
        task: TrainTask,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: TrainTask,
    encoder: EncoderConfig,
    head: HeadConfig,
    vocab_hash: String,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl ModelBundle {
    /// Freshly initialized bundle, identical to what training with zero
    /// epochs returns.
    pub fn untrained(vocab: &Vocabulary, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self, ModelError> {
        let (encoder, head) = spec.resolve(vocab, cfg.task);
        let (model, params) = RelModel::init(encoder, head, cfg.seed)?;
        Ok(ModelBundle {
            task: cfg.task,
            model,
            params,
            vocab_hash: vocab.hash().to_string(),
            meta: TrainMeta {
                config: cfg.clone(),
                epochs_run: 0,
                steps: 0,
                best_epoch: None,
                best_dev: None,
                history: Vec::new(),
            },
        })
    }

    pub fn n_classes(&self) -> usize {
        self.model.n_classes()
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), BundleError> {
        if self.vocab_hash != vocab.hash() {
            return Err(BundleError::VocabMismatch {
                bundle: self.vocab_hash.clone(),
                supplied: vocab.hash().to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            task: self.task,
            encoder: self.model.encoder.clone(),
            head: self.model.head.clone(),
            vocab_hash: self.vocab_hash.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 4 * self.params.num_scalars() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        if bytes.len() < 8 {
            return Err(BundleError::Truncated("missing magic".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(BundleError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(BundleError::Truncated("missing header length".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != BUNDLE_VERSION {
            return Err(BundleError::Version {
                found: version,
                expected: BUNDLE_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| BundleError::Truncated("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| BundleError::Header(e.to_string()))?;
        let scalars: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let data_end = header_end + 4 * scalars;
        if bytes.len() < data_end + CHECKSUM_LEN {
            return Err(BundleError::Truncated(format!(
                "expected {} bytes, found {}",
                data_end + CHECKSUM_LEN,
                bytes.len()
            )));
        }
        if bytes.len() > data_end + CHECKSUM_LEN {
            return Err(BundleError::Header("trailing bytes after checksum".into()));
        }
        if Sha256::digest(&bytes[..data_end])[..] != bytes[data_end..] {
            return Err(BundleError::Checksum);
        }
        let mut store = ParamStore::new();
        let mut floats = bytes[header_end..data_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for t in header.tensors {
            let n = t.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            let value = Tensor::new(t.shape, data).map_err(|e| BundleError::Header(e.to_string()))?;
            store
                .insert(t.name, value)
                .map_err(|e| BundleError::Header(e.to_string()))?;
        }
        if header.head.n_classes != header.task.n_classes() {
            return Err(BundleError::TaskMismatch {
                task: header.task,
                expected: header.task.n_classes(),
                found: header.head.n_classes,
            });
        }
        let model = RelModel::bind(header.encoder, header.head, &store)?;
        Ok(ModelBundle {
            task: header.task,
            model,
            params: store,
            vocab_hash: header.vocab_hash,
            meta: header.meta,
        })
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a bundle; with `vocab` given, also checks the vocabulary hash.
pub fn load_bundle(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<ModelBundle, BundleError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bundle = ModelBundle::from_bytes(&bytes)?;
    if let Some(v) = vocab {
        bundle.check_vocab(v)?;
    }
    Ok(bundle)
}
