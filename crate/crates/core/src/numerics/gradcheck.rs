use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the per-parameter maximum relative error.
    pub threshold: f64,
    /// Lower bound on the relative-error denominator so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per parameter (sampled with `seed`).
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            threshold: 1e-3,
            floor: 1e-4,
            max_per_param: Some(48),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.threshold)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err >= self.threshold)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let verdict = if p.max_rel_err < self.threshold { "ok" } else { "FAIL" };
            writeln!(
                f,
                "  {:<32} n={:<4} rel={:.3e} abs={:.3e} {}",
                p.name, p.checked, p.max_rel_err, p.max_abs_err, verdict
            )?;
        }
        Ok(())
    }
}

fn run_loss<T, F>(store: &ParamStore<T>, fragment: &F) -> Result<f64, NumericsError>
where
    T: Real,
    F: for<'a> Fn(&mut Tape<'a, T>) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new(store);
    let loss = fragment(&mut tape)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0].to_f64().unwrap())
}

/// Compares tape gradients of `fragment` against central finite differences
/// for every parameter in `store`.
pub fn grad_check<T, F>(
    store: &ParamStore<T>,
    fragment: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    T: Real,
    F: for<'a> Fn(&mut Tape<'a, T>) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new(store);
    let loss = fragment(&mut tape)?;
    let first = tape.value(loss).data()[0].to_f64().unwrap();
    let grads = tape.backward(loss)?;

    let second = run_loss(store, &fragment)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (id, param) in store.iter() {
        let len = param.value.len();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; len],
        };
        let indices: Vec<usize> = match config.max_per_param {
            Some(k) if k < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (id.index() as u64) << 20);
                let mut picked = index::sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &indices {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + T::c(config.eps);
            let plus = run_loss(&work, &fragment)?;
            work.get_mut(id).value.data_mut()[i] = orig - T::c(config.eps);
            let minus = run_loss(&work, &fragment)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.eps);
            let abs = (analytic[i] - numeric).abs();
            let denom = analytic[i].abs().max(numeric.abs()).max(config.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / denom);
        }
        params.push(ParamCheck {
            name: param.name.clone(),
            checked: indices.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        threshold: config.threshold,
        params,
    })
}
