#![allow(dead_code)]

pub mod checks;

use docrel::corpus::{build_vocab, Document, Vocabulary};
use docrel::encoder::{BaseEncoder, EncoderConfig};
use docrel::training::{ModelBundle, ModelSpec, TrainConfig, TrainTask};

/// Small transformer used where the desk-scale model would be slow.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        encoder: EncoderConfig {
            vocab_size: 0,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            dropout: 0.1,
            mode: BaseEncoder::Transformer,
            sentence_scoped: false,
        },
        d_low: 8,
        use_bias: true,
    }
}

pub fn vocab_for(docs: &[Document]) -> Vocabulary {
    build_vocab(docs, 1).expect("vocabulary")
}

pub fn untrained(task: TrainTask, vocab: &Vocabulary, spec: &ModelSpec, seed: u64) -> ModelBundle {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::new(task)
    };
    ModelBundle::untrained(vocab, spec, &cfg).expect("bundle")
}

/// Binomial standard deviation of a proportion.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
