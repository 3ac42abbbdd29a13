//! Entity pooling, low-dimensional projection and per-class bilinear scoring.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::model::{Init, ModelError, ParamSpec};
use crate::numerics::{ParamId, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    pub d_low: usize,
    pub n_classes: usize,
    pub use_bias: bool,
}

impl HeadConfig {
    pub fn new(d_model: usize, n_classes: usize) -> Self {
        HeadConfig {
            d_model,
            d_low: 128,
            n_classes,
            use_bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_low == 0 || self.d_model == 0 {
            return Err(ModelError::Config("d_model and d_low must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(ModelError::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, k, c) = (self.d_model, self.d_low, self.n_classes);
        let mut specs = vec![
            ParamSpec::new("head.proj.w", vec![d, k], Init::Uniform(d, k)),
            ParamSpec::new("head.proj.b", vec![k], Init::Zeros),
            ParamSpec::new("head.bilinear.w", vec![c, k, k], Init::Uniform(k, k)),
        ];
        if self.use_bias {
            specs.push(ParamSpec::new("head.bilinear.b", vec![c], Init::Zeros));
        }
        specs
    }
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub bilinear: ParamId,
    pub class_bias: Option<ParamId>,
}

impl HeadWeights {
    pub(crate) fn resolve(
        cfg: &HeadConfig,
        id: &impl Fn(&str) -> Result<ParamId, ModelError>,
    ) -> Result<Self, ModelError> {
        Ok(HeadWeights {
            proj_w: id("head.proj.w")?,
            proj_b: id("head.proj.b")?,
            bilinear: id("head.bilinear.w")?,
            class_bias: if cfg.use_bias {
                Some(id("head.bilinear.b")?)
            } else {
                None
            },
        })
    }
}

/// Mean of the contextual rows at each entity's positions, one row per entity.
pub fn pool_entities<T: Real>(
    tape: &mut Tape<'_, T>,
    contextual: Var,
    positions: &[Vec<usize>],
) -> Result<Var, ModelError> {
    if let Some(e) = positions.iter().position(Vec::is_empty) {
        return Err(ModelError::EmptyEntity(e));
    }
    Ok(tape.pool_rows(contextual, positions)?)
}

/// `h · W + b`, no activation.
pub fn project<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    w: &HeadWeights,
) -> Result<Var, ModelError> {
    let (pw, pb) = (tape.param(w.proj_w), tape.param(w.proj_b));
    Ok(tape.affine(h, pw, Some(pb))?)
}

/// Logits `[pairs × n_classes]` for pairs of rows of `ents`.
pub fn bilinear_scores<T: Real>(
    tape: &mut Tape<'_, T>,
    ents: Var,
    w: &HeadWeights,
    pairs: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let bw = tape.param(w.bilinear);
    let bb = w.class_bias.map(|b| tape.param(b));
    Ok(tape.bilinear(ents, bw, bb, pairs)?)
}

/// Scores the given `(head, tail)` entity pairs of one encoded document.
///
/// Only entities that occur in `pairs` are pooled; each must have at least
/// one in-window position.
pub fn score_pairs<T: Real>(
    tape: &mut Tape<'_, T>,
    w: &HeadWeights,
    encoded: &EncoderOutput,
    entity_positions: &[Vec<usize>],
    pairs: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let mut row_of = vec![usize::MAX; entity_positions.len()];
    let mut groups = Vec::new();
    for &(h, t) in pairs {
        for e in [h, t] {
            if e >= entity_positions.len() {
                return Err(ModelError::EntityOutOfRange(e));
            }
            if row_of[e] == usize::MAX {
                if entity_positions[e].is_empty() {
                    return Err(ModelError::EmptyEntity(e));
                }
                row_of[e] = groups.len();
                groups.push(entity_positions[e].clone());
            }
        }
    }
    let pooled = pool_entities(tape, encoded.contextual, &groups)?;
    let low = project(tape, pooled, w)?;
    let local: Vec<(usize, usize)> = pairs.iter().map(|&(h, t)| (row_of[h], row_of[t])).collect();
    bilinear_scores(tape, low, w, &local)
}

/// Logits for every ordered pair of in-window entities.
pub struct PairScores {
    /// `(head, tail)` in ascending order.
    pub pairs: Vec<(usize, usize)>,
    /// `[pairs × n_classes]`, absent when fewer than two entities survive.
    pub logits: Option<Var>,
}

pub fn surviving_pairs(entity_positions: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let alive: Vec<usize> = (0..entity_positions.len())
        .filter(|&e| !entity_positions[e].is_empty())
        .collect();
    let mut pairs = Vec::with_capacity(alive.len() * alive.len().saturating_sub(1));
    for &h in &alive {
        for &t in &alive {
            if h != t {
                pairs.push((h, t));
            }
        }
    }
    pairs
}

pub fn score_all_pairs<T: Real>(
    tape: &mut Tape<'_, T>,
    w: &HeadWeights,
    encoded: &EncoderOutput,
    entity_positions: &[Vec<usize>],
) -> Result<PairScores, ModelError> {
    let pairs = surviving_pairs(entity_positions);
    let logits = if pairs.is_empty() {
        None
    } else {
        Some(score_pairs(tape, w, encoded, entity_positions, &pairs)?)
    };
    Ok(PairScores { pairs, logits })
}
