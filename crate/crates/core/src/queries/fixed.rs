use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::QueryBank;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tape, Tensor};

/// How fixed combination coefficients are drawn for a trained query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FixedMode {
    /// `U[-1, 1]` draws passed through a row softmax.
    Convex,
    /// `U[-1, 1]` draws divided by their row sum; entries may be negative.
    Nonconvex,
    /// Plain group mean.
    Averaged,
    /// `m` distinct rows of the bank picked uniformly; no combination.
    RandomSample,
}

impl FixedMode {
    pub const ALL: [FixedMode; 4] = [
        FixedMode::Convex,
        FixedMode::Nonconvex,
        FixedMode::Averaged,
        FixedMode::RandomSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixedMode::Convex => "convex",
            FixedMode::Nonconvex => "nonconvex",
            FixedMode::Averaged => "averaged",
            FixedMode::RandomSample => "random_sample",
        }
    }

    pub fn is_random(self) -> bool {
        self != FixedMode::Averaged
    }
}

impl FromStr for FixedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FixedMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown combination mode `{s}`")))
    }
}

/// Row sums closer to zero than this are redrawn in nonconvex mode.
const MIN_ROW_SUM: f64 = 1e-6;

/// Draws an `m x r` coefficient matrix for a combining mode.
pub fn draw_coefficients(mode: FixedMode, groups: usize, ratio: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(groups * ratio);
    for _ in 0..groups {
        match mode {
            FixedMode::Convex => {
                let raw: Vec<f64> = (0..ratio).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / total));
            }
            FixedMode::Nonconvex => loop {
                let raw: Vec<f64> = (0..ratio).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let total: f64 = raw.iter().sum();
                if total.abs() >= MIN_ROW_SUM {
                    out.extend(raw.iter().map(|x| x / total));
                    break;
                }
            },
            FixedMode::Averaged => out.extend(std::iter::repeat_n(1.0 / ratio as f64, ratio)),
            FixedMode::RandomSample => {
                return Err(Error::contract("random_sample mode has no coefficients"));
            }
        }
    }
    Ok(out)
}

/// `q_i = sum_j w_ij * bank[i*r + j]` for an explicit coefficient matrix,
/// evaluated with the same kernel as the differentiable modulation.
pub fn combine_with<T: Real>(bank: &Tensor<T>, ratio: usize, coeffs: &[f64]) -> Result<Tensor<T>> {
    let n = bank.shape()[0];
    if ratio == 0 || n % ratio != 0 || coeffs.len() != n {
        return Err(Error::shape("combine", bank.shape(), &[ratio, coeffs.len()]));
    }
    let groups = n / ratio;
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::from_vec(
        vec![groups, ratio],
        coeffs.iter().map(|&x| T::from_f64(x)).collect(),
    ));
    let b = tape.constant(bank.clone());
    let out = tape.convex_combine(w, b)?;
    Ok(tape.value(out).clone())
}

/// Replaces a trained `[n, f]` query set by `m = n / r` fixed combinations.
pub fn combine_fixed<T: Real>(
    store: &ParamStore<T>,
    bank: &QueryBank,
    mode: FixedMode,
    seed: u64,
) -> Result<Tensor<T>> {
    let values = store.get(bank.basic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        FixedMode::RandomSample => {
            let picks = sample(&mut rng, bank.len(), bank.groups);
            let f = bank.dim;
            let mut data = Vec::with_capacity(bank.groups * f);
            for i in picks.iter() {
                data.extend_from_slice(&values.data()[i * f..(i + 1) * f]);
            }
            Ok(Tensor::from_vec(vec![bank.groups, f], data))
        }
        _ => {
            let w = draw_coefficients(mode, bank.groups, bank.ratio, &mut rng)?;
            combine_with(values, bank.ratio, &w)
        }
    }
}
