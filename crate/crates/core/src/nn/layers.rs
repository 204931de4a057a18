use rand::Rng;

use super::params::{xavier_uniform, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W^T + b` with `W[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(rng, out_dim, in_dim));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weight and bias; the output is identically zero at init.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul_t(x, w)?;
        g.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Output of one attention call: the projected result and the attention
/// weights `[batch * heads, queries, keys]`.
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `[batch, len, dim] -> [batch * heads, len, dim / heads]`
    fn split_heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, batch: usize, len: usize) -> Result<Var> {
        let d = self.dim / self.heads;
        let x = g.reshape(x, &[batch, len, self.heads, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, len, d])
    }

    /// Scaled dot-product attention over `heads` heads.
    ///
    /// Inputs are `[a, f]`/`[b, f]` or batched `[n, a, f]`/`[n, b, f]`; the
    /// output has the shape of `queries`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<Attended> {
        let qs = g.shape(queries).to_vec();
        let ks = g.shape(keys).to_vec();
        if g.shape(values) != ks.as_slice() || qs.len() != ks.len() || !(2..=3).contains(&qs.len()) {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let (batch, a, b) = if qs.len() == 2 {
            (1, qs[0], ks[0])
        } else {
            (qs[0], qs[1], ks[1])
        };
        if qs[qs.len() - 1] != self.dim || ks[ks.len() - 1] != self.dim || (qs.len() == 3 && ks[0] != batch) {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let d = self.dim / self.heads;

        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, values)?;
        let q = self.split_heads(g, q, batch, a)?;
        let k = self.split_heads(g, k, batch, b)?;
        let v = self.split_heads(g, v, batch, b)?;

        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
        let weights = g.softmax(scores)?;
        let mixed = g.batch_matmul(weights, v, false)?;

        let mixed = g.reshape(mixed, &[batch, self.heads, a, d])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &qs)?;
        let out = self.o.forward(g, mixed)?;
        Ok(Attended { out, weights })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}
