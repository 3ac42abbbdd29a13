use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::LinearDoc;
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::numerics::{flush_denormals, NumericsError, ParamId, ParamStore, Real, Tape, Var};
use crate::relhead::{score_pairs, HeadConfig, HeadWeights};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("entity {0} has no in-window positions")]
    EmptyEntity(usize),
    #[error("entity index {0} out of range")]
    EntityOutOfRange(usize),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// `U(-b, b)`, `b = sqrt(6 / (fan_in + fan_out))`
    Uniform(usize, usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Encoder plus bilinear head, bound to parameter ids in a store.
#[derive(Clone, Debug)]
pub struct RelModel {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub enc_weights: EncoderWeights,
    pub head_weights: HeadWeights,
}

impl RelModel {
    fn specs(encoder: &EncoderConfig, head: &HeadConfig) -> Result<Vec<ParamSpec>, ModelError> {
        encoder.validate()?;
        head.validate()?;
        if encoder.d_model != head.d_model {
            return Err(ModelError::Config(format!(
                "encoder d_model {} differs from head d_model {}",
                encoder.d_model, head.d_model
            )));
        }
        let mut specs = encoder.param_specs();
        specs.extend(head.param_specs());
        Ok(specs)
    }

    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn init(
        encoder: EncoderConfig,
        head: HeadConfig,
        seed: u64,
    ) -> Result<(RelModel, ParamStore<f32>), ModelError> {
        let specs = Self::specs(&encoder, &head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            match spec.init {
                Init::Uniform(fan_in, fan_out) => {
                    store.insert_uniform(spec.name, spec.shape, fan_in, fan_out, &mut rng)?
                }
                Init::Zeros => store.insert_filled(spec.name, spec.shape, 0.0)?,
                Init::Ones => store.insert_filled(spec.name, spec.shape, 1.0)?,
            };
        }
        let model = Self::bind(encoder, head, &store)?;
        Ok((model, store))
    }

    /// Resolves parameter names in an existing store and checks shapes.
    pub fn bind<T: Real>(
        encoder: EncoderConfig,
        head: HeadConfig,
        store: &ParamStore<T>,
    ) -> Result<RelModel, ModelError> {
        let specs = Self::specs(&encoder, &head)?;
        if specs.len() != store.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, store has {}",
                specs.len(),
                store.len()
            )));
        }
        for spec in &specs {
            let id = store.id(&spec.name)?;
            let actual = store.value(id).shape();
            if actual != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name, actual, spec.shape
                )));
            }
        }
        let lookup = |name: &str| -> Result<ParamId, ModelError> { Ok(store.id(name)?) };
        let enc_weights = EncoderWeights::resolve(&encoder, &lookup)?;
        let head_weights = HeadWeights::resolve(&head, &lookup)?;
        Ok(RelModel {
            encoder,
            head,
            enc_weights,
            head_weights,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    /// Encodes the document and returns logits for `pairs`.
    pub fn score<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        doc: &LinearDoc,
        pairs: &[(usize, usize)],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let encoded = encode(
            tape,
            &self.encoder,
            &self.enc_weights,
            &doc.token_ids,
            &doc.sentence_ids,
            dropout,
        )?;
        score_pairs(
            tape,
            &self.head_weights,
            &encoded,
            &doc.entity_positions,
            pairs,
        )
    }

    /// Eval-mode class probabilities, one row per pair.
    pub fn probabilities<T: Real>(
        &self,
        store: &ParamStore<T>,
        doc: &LinearDoc,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<Vec<T>>, ModelError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        flush_denormals();
        let mut tape = Tape::new(store);
        let logits = self.score(&mut tape, doc, pairs, None)?;
        let probs = tape.value(logits).softmax_rows();
        Ok(probs
            .data()
            .chunks(self.n_classes())
            .map(<[T]>::to_vec)
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }

    #[test]
    fn init_is_seeded() {
        let enc = EncoderConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            max_len: 16,
            ..EncoderConfig::desk(20)
        };
        let head = HeadConfig {
            d_low: 4,
            ..HeadConfig::new(8, 3)
        };
        let (_, a) = RelModel::init(enc.clone(), head.clone(), 5).unwrap();
        let (_, b) = RelModel::init(enc.clone(), head.clone(), 5).unwrap();
        let (_, c) = RelModel::init(enc.clone(), head.clone(), 6).unwrap();
        assert!(a.same_values(&b));
        assert!(!a.same_values(&c));
        // biases start at zero, layer-norm gains at one
        let bias = a.value(a.id("head.proj.b").unwrap());
        assert!(bias.data().iter().all(|&x| x == 0.0));
        let gain = a.value(a.id("encoder.layer0.ln1.gain").unwrap());
        assert!(gain.data().iter().all(|&x| x == 1.0));
        let w = a.value(a.id("head.proj.w").unwrap());
        let bound = crate::numerics::xavier_bound(8, 4) as f32;
        assert!(w.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn mismatched_widths_rejected() {
        let enc = EncoderConfig::desk(10);
        let head = HeadConfig::new(64, 2);
        assert!(matches!(
            RelModel::init(enc, head, 0),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn bind_rejects_wrong_shapes() {
        let enc = EncoderConfig {
            mode: crate::encoder::BaseEncoder::Mean,
            d_model: 4,
            ..EncoderConfig::desk(10)
        };
        let head = HeadConfig {
            d_low: 2,
            ..HeadConfig::new(4, 2)
        };
        let (_, store) = RelModel::init(enc.clone(), head.clone(), 0).unwrap();
        let bigger = HeadConfig {
            n_classes: 3,
            ..head
        };
        assert!(RelModel::bind(enc, bigger, &store).is_err());
    }
}
