use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Mlp, ParamStore};
use crate::tensor::{ParamId, Real, Var};

/// Hidden width of the coefficient network.
pub const COEFF_HIDDEN: usize = 512;

/// Global average pool of `[batch, f, h, w]` (or `[f, h, w]`) to `[batch, f]`.
fn global_pool<T: Real>(g: &mut Graph<'_, T>, features: Var, dim: usize) -> Result<(Var, usize)> {
    let s = g.shape(features).to_vec();
    let (batch, c, hw) = match s.len() {
        3 => (1, s[0], s[1] * s[2]),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => return Err(Error::shape("global_pool", &s, &[dim])),
    };
    if c != dim {
        return Err(Error::shape("global_pool", &s, &[dim]));
    }
    let flat = g.reshape(features, &[batch, c, hw])?;
    Ok((g.mean_axis(flat, 2)?, batch))
}

/// Pool -> two-layer ReLU MLP -> reshape `[m, r]` -> row softmax.
#[derive(Clone, Debug)]
pub struct CoeffNet {
    pub mlp: Mlp,
    pub in_dim: usize,
    pub groups: usize,
    pub ratio: usize,
}

impl CoeffNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        groups: usize,
        ratio: usize,
        zero_final: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let first = Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng);
        let last = if zero_final {
            Linear::zeroed(store, &format!("{name}.1"), hidden, groups * ratio)
        } else {
            Linear::new(store, &format!("{name}.1"), hidden, groups * ratio, rng)
        };
        CoeffNet {
            mlp: Mlp {
                layers: vec![first, last],
            },
            in_dim,
            groups,
            ratio,
        }
    }

    /// Coefficients `[batch, m, r]` from backbone features `[batch, f, h, w]`.
    /// An unbatched `[f, h, w]` input yields `[m, r]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let unbatched = g.shape(features).len() == 3;
        let (pooled, _) = global_pool(g, features, self.in_dim)?;
        let w = self.forward_pooled(g, pooled)?;
        if unbatched {
            g.reshape(w, &[self.groups, self.ratio])
        } else {
            Ok(w)
        }
    }

    /// Coefficients `[batch, m, r]` from already pooled features `[batch, f]`.
    pub fn forward_pooled<T: Real>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<Var> {
        let batch = g.shape(pooled)[0];
        let logits = self.mlp.forward(g, pooled)?;
        let logits = g.reshape(logits, &[batch, self.groups, self.ratio])?;
        g.softmax(logits)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Ablation baseline: queries regressed straight from pooled features.
#[derive(Clone, Debug)]
pub struct DirectMlpQueries {
    pub mlp: Mlp,
    pub in_dim: usize,
    pub count: usize,
    pub dim: usize,
}

impl DirectMlpQueries {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        count: usize,
        dim: usize,
        zero_final: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let first = Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng);
        let last = if zero_final {
            Linear::zeroed(store, &format!("{name}.1"), hidden, count * dim)
        } else {
            Linear::new(store, &format!("{name}.1"), hidden, count * dim, rng)
        };
        DirectMlpQueries {
            mlp: Mlp {
                layers: vec![first, last],
            },
            in_dim,
            count,
            dim,
        }
    }

    /// Queries `[batch, m, f]` (or `[m, f]` for unbatched features).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let unbatched = g.shape(features).len() == 3;
        let (pooled, _) = global_pool(g, features, self.in_dim)?;
        let q = self.forward_pooled(g, pooled)?;
        if unbatched {
            g.reshape(q, &[self.count, self.dim])
        } else {
            Ok(q)
        }
    }

    /// Queries `[batch, m, f]` from pooled features `[batch, f]`.
    pub fn forward_pooled<T: Real>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<Var> {
        let batch = g.shape(pooled)[0];
        let out = self.mlp.forward(g, pooled)?;
        g.reshape(out, &[batch, self.count, self.dim])
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}
