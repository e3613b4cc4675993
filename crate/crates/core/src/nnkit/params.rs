use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameters and their gradients. Iteration order is by name, so
/// serialization and optimizer updates are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
    grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        self.grads.remove(name);
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds `grads` into the stored gradients; shapes must mirror the
    /// parameters.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "accumulate_grads",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            match self.grads.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: self.grads.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Glorot/Xavier uniform samples in `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    first_moment: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first_moment.get(name)?, self.second_moment.get(name)?))
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.005)
    }
}

/// One Adam update with bias correction over every parameter. Gradients are
/// zeroed afterwards. Moments are kept in `f64` whatever the parameter type.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut AdamState) -> Result<()> {
    if let Some(name) = params.params.keys().find(|n| !params.grads.contains_key(*n)) {
        return Err(Error::MissingGradient(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.params.iter_mut() {
        let g = &params.grads[name];
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let update = state.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            let pi = &mut p.data_mut()[i];
            *pi = S::of(pi.as_f64() - update);
        }
    }
    params.zero_grads();
    Ok(())
}

/// Order-independent sum of gradient maps, kept in `f64` with Neumaier
/// compensation so that permuting the inputs changes the total only at the
/// level of the final rounding.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, (Vec<usize>, Vec<f64>, Vec<f64>)>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        GradAccumulator::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add<S: Scalar>(&mut self, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for (name, g) in grads {
            let (shape, sum, comp) = self
                .sums
                .entry(name.clone())
                .or_insert_with(|| (g.shape().to_vec(), vec![0.0; g.len()], vec![0.0; g.len()]));
            if shape.as_slice() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "grad_accumulate",
                    left: shape.clone(),
                    right: g.shape().to_vec(),
                });
            }
            for ((s, c), v) in sum.iter_mut().zip(comp.iter_mut()).zip(g.data()) {
                let x = v.as_f64();
                let t = *s + x;
                if s.abs() >= x.abs() {
                    *c += (*s - t) + x;
                } else {
                    *c += (x - t) + *s;
                }
                *s = t;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// The compensated totals multiplied by `scale`.
    pub fn finish<S: Scalar>(&self, scale: f64) -> BTreeMap<String, Tensor<S>> {
        self.sums
            .iter()
            .map(|(name, (shape, sum, comp))| {
                let data = sum.iter().zip(comp).map(|(s, c)| S::of((s + c) * scale)).collect();
                (name.clone(), Tensor::new(shape.clone(), data).expect("shape recorded"))
            })
            .collect()
    }
}
