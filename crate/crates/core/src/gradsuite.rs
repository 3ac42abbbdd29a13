//! Finite-difference checks of every differentiable block, run in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, enumerate_pairs, linearize};
use crate::encoder::{self_attention, transformer_layer, BaseEncoder, EncoderConfig};
use crate::model::{ModelError, RelModel};
use crate::numerics::{
    grad_check, GradCheckConfig, GradCheckReport, NumericsError, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::relhead::{bilinear_scores, project, HeadConfig};
use crate::synthetic::{random_document, RandomDocConfig};

pub const FIXTURES: [&str; 8] = [
    "affine",
    "layernorm",
    "attention",
    "transformer_layer",
    "projection",
    "bilinear_head",
    "end_to_end",
    "end_to_end_sentence_scoped",
];

#[derive(Debug)]
pub struct FixtureResult {
    pub name: &'static str,
    pub report: Result<GradCheckReport, NumericsError>,
}

impl FixtureResult {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passed())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("nonempty shape")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn readout(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.value(y).shape().to_vec(), 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn insert(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> ParamId {
    store.insert(name, t).expect("fresh name")
}

fn lift(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => panic!("fixture model error: {other}"),
    }
}

fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_len: 64,
        dropout: 0.0,
        mode: BaseEncoder::Transformer,
        sentence_scoped: false,
    }
}

fn tiny_head(n_classes: usize) -> HeadConfig {
    HeadConfig {
        d_low: 5,
        ..HeadConfig::new(8, n_classes)
    }
}

/// Model weights in f64 with every bias and gain perturbed away from its
/// initial constant so that no gradient is trivially zero.
fn tiny_model(enc: EncoderConfig, head: HeadConfig, seed: u64) -> (RelModel, ParamStore<f64>) {
    let (_, store) = RelModel::init(enc.clone(), head.clone(), seed).expect("valid config");
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in store.get_mut(id).value.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let model = RelModel::bind(enc, head, &store).expect("bound");
    (model, store)
}

pub fn run_fixture(name: &str, config: GradCheckConfig) -> Option<Result<GradCheckReport, NumericsError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let report = match name {
        "affine" => {
            let mut s = ParamStore::new();
            let x = insert(&mut s, "x", random(&mut rng, vec![3, 4], 1.0));
            let w = insert(&mut s, "w", random(&mut rng, vec![4, 5], 1.0));
            let b = insert(&mut s, "b", random(&mut rng, vec![5], 1.0));
            grad_check(
                &s,
                |t| {
                    let (x, w, b) = (t.param(x), t.param(w), t.param(b));
                    let y = t.affine(x, w, Some(b))?;
                    let y = t.gelu(y);
                    readout(t, y, 1)
                },
                config,
            )
        }
        "layernorm" => {
            let mut s = ParamStore::new();
            let x = insert(&mut s, "x", random(&mut rng, vec![3, 6], 2.0));
            let g = insert(&mut s, "gain", random(&mut rng, vec![6], 1.5));
            let b = insert(&mut s, "bias", random(&mut rng, vec![6], 1.0));
            grad_check(
                &s,
                |t| {
                    let (x, g, b) = (t.param(x), t.param(g), t.param(b));
                    let y = t.layer_norm(x, g, b, 1e-5)?;
                    readout(t, y, 2)
                },
                config,
            )
        }
        "attention" | "transformer_layer" => {
            let enc = tiny_encoder(10);
            let (model, mut s) = tiny_model(enc.clone(), tiny_head(3), 3);
            let x = insert(&mut s, "input", random(&mut rng, vec![5, 8], 1.0));
            let layer = model.enc_weights.layers[0].clone();
            let full = name == "transformer_layer";
            grad_check(
                &s,
                |t| {
                    let x = t.param(x);
                    let y = if full {
                        transformer_layer(t, x, &layer, &enc, None).map_err(lift)?
                    } else {
                        self_attention(t, x, &layer, enc.n_heads).map_err(lift)?.0
                    };
                    readout(t, y, 3)
                },
                config,
            )
        }
        "projection" => {
            let (model, mut s) = tiny_model(tiny_encoder(10), tiny_head(3), 4);
            let h = insert(&mut s, "pooled", random(&mut rng, vec![4, 8], 1.0));
            let w = model.head_weights.clone();
            grad_check(
                &s,
                |t| {
                    let h = t.param(h);
                    let y = project(t, h, &w).map_err(lift)?;
                    readout(t, y, 4)
                },
                config,
            )
        }
        "bilinear_head" => {
            let (model, mut s) = tiny_model(tiny_encoder(10), tiny_head(4), 5);
            let e = insert(&mut s, "entities", random(&mut rng, vec![4, 8], 1.0));
            let w = model.head_weights.clone();
            let pairs = [(0, 1), (1, 0), (2, 3), (3, 1), (0, 2)];
            let labels = [0, 3, 1, 2, 3];
            grad_check(
                &s,
                |t| {
                    let e = t.param(e);
                    let low = project(t, e, &w).map_err(lift)?;
                    let logits = bilinear_scores(t, low, &w, &pairs).map_err(lift)?;
                    t.cross_entropy(logits, &labels)
                },
                config,
            )
        }
        "end_to_end" | "end_to_end_sentence_scoped" => {
            let doc = random_document(
                &mut rng,
                "gradcheck".into(),
                &RandomDocConfig {
                    sentences: 3..=3,
                    sentence_len: 4..=6,
                    entities: 4..=4,
                    labels: 3..=3,
                    max_class: 5,
                    multi_label: true,
                },
            );
            let vocab = build_vocab(std::slice::from_ref(&doc), 1).expect("nonempty");
            let enc = EncoderConfig {
                sentence_scoped: name == "end_to_end_sentence_scoped",
                ..tiny_encoder(vocab.len())
            };
            let (model, s) = tiny_model(enc, tiny_head(6), 6);
            let lin = linearize(&doc, &vocab, 64);
            let instances = enumerate_pairs(0, &doc);
            let pairs: Vec<(usize, usize)> = instances.iter().map(|p| (p.head, p.tail)).collect();
            let labels: Vec<usize> = instances.iter().map(|p| p.label_class).collect();
            grad_check(
                &s,
                |t| {
                    let logits = model.score(t, &lin, &pairs, None).map_err(lift)?;
                    t.cross_entropy(logits, &labels)
                },
                config,
            )
        }
        _ => return None,
    };
    Some(report)
}

/// Runs every fixture in [`FIXTURES`].
pub fn run_all(config: GradCheckConfig) -> Vec<FixtureResult> {
    FIXTURES
        .iter()
        .map(|&name| FixtureResult {
            name,
            report: run_fixture(name, config).expect("known fixture"),
        })
        .collect()
}
