use std::collections::HashMap;

use rand::Rng;

use super::{NumericsError, Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let n = value.len();
        Parameter {
            name,
            value,
            grad: None,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Ordered, name-addressable collection of parameters.
///
/// Insertion order is the canonical order; ids stay valid across
/// [`ParamStore::cast`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    /// Weight matrix drawn from `U(-b, b)` with `b = sqrt(6/(fan_in+fan_out))`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        let bound = super::xavier_bound(fan_in, fan_out);
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::c(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_filled(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: f64,
    ) -> Result<ParamId, NumericsError> {
        self.insert(name, Tensor::filled(shape, T::c(value)))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds gradients into each parameter's buffer.
    pub fn accumulate(&mut self, grads: Gradients<T>) {
        for (id, g) in grads.entries {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => p.grad = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Same values in another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            })
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) entries: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.entries.iter().map(|(i, g)| (*i, g.as_slice()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    ///
    /// All gradients are checked before any parameter is touched.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(NumericsError::MissingGrad(p.name.clone()));
        }
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        let one = T::one();
        for p in &mut store.params {
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let t = i32::try_from(p.step).unwrap_or(i32::MAX);
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                let m = (b1 * p.first_moment[i] + (one - b1) * g).flush();
                let v = (b2 * p.second_moment[i] + (one - b2) * g * g).flush();
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::<f64>::new();
        let id = s
            .insert("w", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        s.get_mut(id).grad = Some(vec![0.0; 3]);
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(s.get(id).step(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
        // update = lr * g / (|g| + eps)
        let (mut s, id) = scalar_store(1.5);
        let g = 0.3;
        s.get_mut(id).grad = Some(vec![g]);
        let adam = Adam::new(0.01);
        adam.step(&mut s).unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.5 - 0.01 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut s, _) = scalar_store(1.0);
        s.insert("bias", Tensor::scalar(0.0)).unwrap();
        s.get_mut(ParamId(0)).grad = Some(vec![1.0]);
        let err = Adam::new(0.1).step(&mut s).unwrap_err();
        assert_eq!(err, NumericsError::MissingGrad("bias".into()));
        // nothing was applied
        assert_eq!(s.get(ParamId(0)).step(), 0);
    }

    #[test]
    fn identical_models_stay_identical() {
        let (mut a, id) = scalar_store(0.7);
        let (mut b, _) = scalar_store(0.7);
        let adam = Adam::new(0.05);
        for k in 0..25 {
            let g = (k as f64 * 0.37).sin();
            a.get_mut(id).grad = Some(vec![g]);
            b.get_mut(id).grad = Some(vec![g]);
            adam.step(&mut a).unwrap();
            adam.step(&mut b).unwrap();
        }
        assert!(a.same_values(&b));
        assert_eq!(a.get(id).step(), 25);
    }

    #[test]
    fn accumulate_adds() {
        let (mut s, id) = scalar_store(0.0);
        let g = Gradients {
            entries: vec![(id, vec![2.0])],
        };
        s.accumulate(g.clone());
        s.accumulate(g);
        assert_eq!(s.get(id).grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = scalar_store(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }
}
