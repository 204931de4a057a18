use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Real, Tape, Tensor, Var};

/// Ordered registry of named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("param set", old.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn numel_of(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.values[id.0].numel()).sum()
    }
}

/// A tape bound to a parameter store for one forward pass.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, tape: Tape<T>) -> Self {
        Graph { tape, store }
    }

    pub fn eval(store: &'p ParamStore<T>) -> Self {
        Self::new(store, Tape::new())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id, self.store.get(id))
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

pub(crate) fn xavier_uniform<T: Real>(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_out * fan_in).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(vec![fan_out, fan_in], data)
}

pub(crate) fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

/// Central-difference check over selected parameters (and optional extra
/// leaf inputs) of a scalar function built on a [`Graph`]. Same error metric
/// as [`crate::tensor::finite_difference_check`].
pub fn finite_difference_check_params<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::eval(store);
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / 1f64.max(a.abs()).max(n.abs());

    let mut g = Graph::eval(store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &id in params {
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let base = store.get(id).clone();
        for i in 0..base.numel() {
            let mut v = base.data().to_vec();
            v[i] = base.data()[i] + eps;
            probe.set(id, Tensor::new(base.shape(), v.clone())?)?;
            let fp = eval(&probe, inputs)?;
            v[i] = base.data()[i] - eps;
            probe.set(id, Tensor::new(base.shape(), v)?)?;
            let fm = eval(&probe, inputs)?;
            worst = worst.max(rel(analytic.data()[i], (fp - fm) / (2.0 * eps)));
        }
        probe.set(id, base)?;
    }
    let mut current = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..x.numel() {
            let mut v = x.data().to_vec();
            v[i] = x.data()[i] + eps;
            current[k] = Tensor::new(x.shape(), v.clone())?;
            let fp = eval(store, &current)?;
            v[i] = x.data()[i] - eps;
            current[k] = Tensor::new(x.shape(), v)?;
            let fm = eval(store, &current)?;
            worst = worst.max(rel(analytic.data()[i], (fp - fm) / (2.0 * eps)));
        }
        current[k] = x.clone();
    }
    Ok(worst)
}
