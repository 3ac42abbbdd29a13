//! Token-to-contextual-embedding encoders.
//!
//! `transformer` is a post-norm BERT-style stack with learned positions;
//! `mean` returns the raw word embeddings. Either can be wrapped in the
//! sentence-scoped mode, which encodes every sentence on its own.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Init, ModelError, ParamSpec};
use crate::numerics::{ParamId, Real, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseEncoder {
    Transformer,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mode: BaseEncoder,
    pub sentence_scoped: bool,
}

impl EncoderConfig {
    /// Small transformer trainable from scratch on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 512,
            dropout: 0.1,
            mode: BaseEncoder::Transformer,
            sentence_scoped: false,
        }
    }

    /// BERT-base sized stack (12 layers, 768 dims).
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_len: 512,
            dropout: 0.1,
            mode: BaseEncoder::Transformer,
            sentence_scoped: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size < 2 || self.d_model == 0 || self.max_len == 0 {
            return fail(format!(
                "vocab_size, d_model and max_len must be positive (got {}, {}, {})",
                self.vocab_size, self.d_model, self.max_len
            ));
        }
        if self.mode == BaseEncoder::Transformer {
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return fail(format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ));
            }
            if self.d_ff == 0 {
                return fail("d_ff must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut specs = vec![ParamSpec::new(
            "encoder.tok_emb",
            vec![self.vocab_size, d],
            Init::Uniform(self.vocab_size, d),
        )];
        if self.mode == BaseEncoder::Mean {
            return specs;
        }
        specs.push(ParamSpec::new(
            "encoder.pos_emb",
            vec![self.max_len, d],
            Init::Uniform(self.max_len, d),
        ));
        specs.push(ParamSpec::new("encoder.emb_ln.gain", vec![d], Init::Ones));
        specs.push(ParamSpec::new("encoder.emb_ln.bias", vec![d], Init::Zeros));
        for l in 0..self.n_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            for name in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec::new(p(name), vec![d, d], Init::Uniform(d, d)));
                specs.push(ParamSpec::new(
                    p(&format!("b{}", &name[1..])),
                    vec![d],
                    Init::Zeros,
                ));
            }
            specs.push(ParamSpec::new(p("ln1.gain"), vec![d], Init::Ones));
            specs.push(ParamSpec::new(p("ln1.bias"), vec![d], Init::Zeros));
            specs.push(ParamSpec::new(
                p("ff1.w"),
                vec![d, self.d_ff],
                Init::Uniform(d, self.d_ff),
            ));
            specs.push(ParamSpec::new(p("ff1.b"), vec![self.d_ff], Init::Zeros));
            specs.push(ParamSpec::new(
                p("ff2.w"),
                vec![self.d_ff, d],
                Init::Uniform(self.d_ff, d),
            ));
            specs.push(ParamSpec::new(p("ff2.b"), vec![d], Init::Zeros));
            specs.push(ParamSpec::new(p("ln2.gain"), vec![d], Init::Ones));
            specs.push(ParamSpec::new(p("ln2.bias"), vec![d], Init::Zeros));
        }
        specs
    }
}

/// Parameters of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub tok_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub emb_ln: Option<(ParamId, ParamId)>,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub(crate) fn resolve(
        cfg: &EncoderConfig,
        id: &impl Fn(&str) -> Result<ParamId, ModelError>,
    ) -> Result<Self, ModelError> {
        let tok_emb = id("encoder.tok_emb")?;
        if cfg.mode == BaseEncoder::Mean {
            return Ok(EncoderWeights {
                tok_emb,
                pos_emb: None,
                emb_ln: None,
                layers: Vec::new(),
            });
        }
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| id(&format!("encoder.layer{l}.{s}"));
                Ok(LayerWeights {
                    wq: p("wq")?,
                    bq: p("bq")?,
                    wk: p("wk")?,
                    bk: p("bk")?,
                    wv: p("wv")?,
                    bv: p("bv")?,
                    wo: p("wo")?,
                    bo: p("bo")?,
                    ln1: (p("ln1.gain")?, p("ln1.bias")?),
                    ff1: (p("ff1.w")?, p("ff1.b")?),
                    ff2: (p("ff2.w")?, p("ff2.b")?),
                    ln2: (p("ln2.gain")?, p("ln2.bias")?),
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(EncoderWeights {
            tok_emb,
            pos_emb: Some(id("encoder.pos_emb")?),
            emb_ln: Some((id("encoder.emb_ln.gain")?, id("encoder.emb_ln.bias")?)),
            layers,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[n_effective × d_model]`
    pub contextual: Var,
    pub sentence_ids: Vec<usize>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_ids.is_empty()
    }
}

/// Encodes one document. Dropout is applied only when `dropout` carries an RNG.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    w: &EncoderWeights,
    token_ids: &[usize],
    sentence_ids: &[usize],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput, ModelError> {
    if cfg.sentence_scoped {
        return encode_sentence_scoped(tape, cfg, w, token_ids, sentence_ids, dropout);
    }
    let (ids, sents) = window(cfg, token_ids, sentence_ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let contextual = encode_base(tape, cfg, w, ids, &positions, dropout)?;
    Ok(EncoderOutput {
        contextual,
        sentence_ids: sents.to_vec(),
    })
}

/// Encodes each sentence independently, positions restarting at 0, and
/// concatenates the results in document order.
pub fn encode_sentence_scoped<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    w: &EncoderWeights,
    token_ids: &[usize],
    sentence_ids: &[usize],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput, ModelError> {
    let (ids, sents) = window(cfg, token_ids, sentence_ids)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < ids.len() {
        let mut end = start + 1;
        while end < ids.len() && sents[end] == sents[start] {
            end += 1;
        }
        let positions: Vec<usize> = (0..end - start).collect();
        parts.push(encode_base(
            tape,
            cfg,
            w,
            &ids[start..end],
            &positions,
            dropout.as_deref_mut(),
        )?);
        start = end;
    }
    let contextual = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    Ok(EncoderOutput {
        contextual,
        sentence_ids: sents.to_vec(),
    })
}

fn window<'a>(
    cfg: &EncoderConfig,
    token_ids: &'a [usize],
    sentence_ids: &'a [usize],
) -> Result<(&'a [usize], &'a [usize]), ModelError> {
    if token_ids.len() != sentence_ids.len() {
        return Err(ModelError::Config(format!(
            "{} token ids but {} sentence ids",
            token_ids.len(),
            sentence_ids.len()
        )));
    }
    if token_ids.is_empty() {
        return Err(ModelError::EmptyDocument);
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    let n = token_ids.len().min(cfg.max_len);
    Ok((&token_ids[..n], &sentence_ids[..n]))
}

fn encode_base<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    w: &EncoderWeights,
    ids: &[usize],
    positions: &[usize],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let table = tape.param(w.tok_emb);
    let tokens = tape.gather_rows(table, ids)?;
    if cfg.mode == BaseEncoder::Mean {
        return Ok(tokens);
    }
    let (Some(pos_emb), Some((g, b))) = (w.pos_emb, w.emb_ln) else {
        return Err(ModelError::Config("transformer weights missing".into()));
    };
    let pos_table = tape.param(pos_emb);
    let pos = tape.gather_rows(pos_table, positions)?;
    let x = tape.add(tokens, pos)?;
    let (g, b) = (tape.param(g), tape.param(b));
    let mut x = tape.layer_norm(x, g, b, LN_EPS)?;
    x = maybe_dropout(tape, x, cfg.dropout, dropout.as_deref_mut());
    for layer in &w.layers {
        x = transformer_layer(tape, x, layer, cfg, dropout.as_deref_mut())?;
    }
    Ok(x)
}

fn maybe_dropout<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Var {
    match rng {
        Some(rng) => tape.dropout(x, rate, rng),
        None => x,
    }
}

/// Multi-head scaled dot-product self-attention over all positions.
///
/// Returns the output projection and the per-head attention matrices.
pub fn self_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    layer: &LayerWeights,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), ModelError> {
    let d = tape.value(x).cols();
    let dh = d / n_heads;
    let proj = |tape: &mut Tape<'_, T>, w: ParamId, b: ParamId| {
        let (w, b) = (tape.param(w), tape.param(b));
        tape.affine(x, w, Some(b))
    };
    let q = proj(tape, layer.wq, layer.bq)?;
    let k = proj(tape, layer.wk, layer.bk)?;
    let v = proj(tape, layer.wv, layer.bv)?;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.cols(q, h * dh, dh)?;
        let kh = tape.cols(k, h * dh, dh)?;
        let vh = tape.cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores);
        probs.push(p);
        heads.push(tape.matmul(p, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let (wo, bo) = (tape.param(layer.wo), tape.param(layer.bo));
    Ok((tape.affine(merged, wo, Some(bo))?, probs))
}

/// Attention, add & norm, feed-forward, add & norm.
pub fn transformer_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    layer: &LayerWeights,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let (attn, _) = self_attention(tape, x, layer, cfg.n_heads)?;
    let attn = maybe_dropout(tape, attn, cfg.dropout, dropout.as_deref_mut());
    let res = tape.add(x, attn)?;
    let (g, b) = (tape.param(layer.ln1.0), tape.param(layer.ln1.1));
    let x = tape.layer_norm(res, g, b, LN_EPS)?;

    let (w1, b1) = (tape.param(layer.ff1.0), tape.param(layer.ff1.1));
    let hidden = tape.affine(x, w1, Some(b1))?;
    let hidden = tape.gelu(hidden);
    let (w2, b2) = (tape.param(layer.ff2.0), tape.param(layer.ff2.1));
    let ff = tape.affine(hidden, w2, Some(b2))?;
    let ff = maybe_dropout(tape, ff, cfg.dropout, dropout);
    let res = tape.add(x, ff)?;
    let (g, b) = (tape.param(layer.ln2.0), tape.param(layer.ln2.1));
    Ok(tape.layer_norm(res, g, b, LN_EPS)?)
}
