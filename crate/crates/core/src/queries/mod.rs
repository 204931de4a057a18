//! Object-query machinery: the basic-query bank and its sequential grouping,
//! fixed (random, averaged) group combinations, and the coefficient network
//! that produces per-image convex combinations ("modulated" queries).

mod coeff;
mod fixed;

#[cfg(test)]
mod tests;

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Graph, ParamStore};
use crate::tensor::{ParamId, Real, Tensor, Var};

pub use coeff::{CoeffNet, DirectMlpQueries, COEFF_HIDDEN};
pub use fixed::{combine_fixed, combine_with, draw_coefficients, FixedMode};

/// Learned basic queries `[n, f]` split into `m` groups of `r` consecutive rows.
#[derive(Clone, Debug)]
pub struct QueryBank {
    pub basic: ParamId,
    pub ratio: usize,
    pub groups: usize,
    pub dim: usize,
}

impl QueryBank {
    /// Registers `groups * ratio` queries drawn from `N(0, 1) * 0.02`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        ratio: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || ratio == 0 || dim == 0 {
            return Err(Error::config(format!(
                "query bank needs positive groups/ratio/dim, got {groups}/{ratio}/{dim}"
            )));
        }
        let basic = store.register(name, normal(rng, &[groups * ratio, dim], 0.02));
        Ok(QueryBank {
            basic,
            ratio,
            groups,
            dim,
        })
    }

    /// Wraps an existing `[n, f]` parameter; `n` must be divisible by `ratio`.
    pub fn from_param<T: Real>(store: &ParamStore<T>, basic: ParamId, ratio: usize) -> Result<Self> {
        let shape = store.get(basic).shape();
        if shape.len() != 2 || ratio == 0 || shape[0] % ratio != 0 {
            return Err(Error::config(format!(
                "{} queries cannot be split into groups of {ratio}",
                shape.first().copied().unwrap_or(0)
            )));
        }
        Ok(QueryBank {
            basic,
            ratio,
            groups: shape[0] / ratio,
            dim: shape[1],
        })
    }

    pub fn len(&self) -> usize {
        self.groups * self.ratio
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row range owned by group `g`.
    pub fn group_rows(&self, g: usize) -> std::ops::Range<usize> {
        g * self.ratio..(g + 1) * self.ratio
    }
}

/// The sequential partition of a bank's values: group `g` is rows
/// `g*r .. (g+1)*r`.
pub fn group_queries<T: Real>(bank: &QueryBank, values: &Tensor<T>) -> Vec<Tensor<T>> {
    let f = bank.dim;
    (0..bank.groups)
        .map(|g| {
            let rows = bank.group_rows(g);
            let data = values.data()[rows.start * f..rows.end * f].to_vec();
            Tensor::from_vec(vec![bank.ratio, f], data)
        })
        .collect()
}

/// Differentiable modulation: `q_i = sum_j w_ij * basic[i*r + j]`.
///
/// `coeffs` is `[m, r]` or `[batch, m, r]`; `basic` is the bound `[m*r, f]` bank.
pub fn modulate<T: Real>(g: &mut Graph<'_, T>, basic: Var, coeffs: Var) -> Result<Var> {
    g.convex_combine(coeffs, basic)
}

/// A row-stochastic `m x r` coefficient matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationCoefficients {
    pub groups: usize,
    pub ratio: usize,
    pub values: Vec<f64>,
}

impl CombinationCoefficients {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(groups: usize, ratio: usize, values: Vec<f64>) -> Result<Self> {
        let c = CombinationCoefficients {
            groups,
            ratio,
            values,
        };
        c.validate(Self::TOLERANCE)?;
        Ok(c)
    }

    pub fn uniform(groups: usize, ratio: usize) -> Self {
        CombinationCoefficients {
            groups,
            ratio,
            values: vec![1.0 / ratio as f64; groups * ratio],
        }
    }

    /// Splits a `[batch, m, r]` (or `[m, r]`) tensor into per-image matrices.
    pub fn from_batch<T: Real>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let s = t.shape();
        let (m, r) = match s.len() {
            2 | 3 => (s[s.len() - 2], s[s.len() - 1]),
            _ => return Err(Error::shape("coefficients", s, &[])),
        };
        t.data()
            .chunks(m * r)
            .map(|c| Self::new(m, r, c.iter().map(|x| x.as_f64()).collect()))
            .collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ratio..(i + 1) * self.ratio]
    }

    /// Non-negativity and unit row sums within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.values.len() != self.groups * self.ratio {
            return Err(Error::shape("coefficients", &[self.groups, self.ratio], &[self.values.len()]));
        }
        for i in 0..self.groups {
            let row = self.row(i);
            if row.iter().any(|&w| !(w >= 0.0)) {
                return Err(Error::contract(format!("coefficient row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::contract(format!("coefficient row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.groups, self.ratio],
            self.values.iter().map(|&x| T::from_f64(x)).collect(),
        )
    }
}

impl fmt::Display for CombinationCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.groups {
            let row: Vec<String> = self.row(i).iter().map(|w| format!("{w:.4}")).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}
