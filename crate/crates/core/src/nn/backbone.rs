use rand::Rng;

use super::params::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Real, Tensor, Var};

/// Strided 3x3 conv + ReLU stages; every stage halves the spatial size.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Backbone {
    pub const KERNEL: usize = 3;

    /// `widths` lists the output channels of each stage; the last one is the
    /// feature dimension.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_channels: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::config("backbone needs at least one stage with positive width"));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            let fan_in = c_in * Self::KERNEL * Self::KERNEL;
            // He-uniform for ReLU stacks
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..c_out * fan_in)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            let w = Tensor::from_vec(vec![c_out, c_in, Self::KERNEL, Self::KERNEL], data);
            let w = store.register(format!("{name}.{i}.weight"), w);
            let b = store.register(format!("{name}.{i}.bias"), Tensor::zeros(&[c_out]));
            stages.push((w, b));
            c_in = c_out;
        }
        Ok(Backbone {
            stages,
            in_channels,
            out_channels: c_in,
        })
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    /// `[batch, c, h, w] -> [batch, f, h / stride, w / stride]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let s = self.stride();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::shape("backbone", &shape, &[self.in_channels, s, s]));
        }
        let mut x = image;
        for &(w, b) in &self.stages {
            let wv = g.param(w);
            let bv = g.param(b);
            x = g.conv2d(x, wv, bv, 2, 1)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Fixed 2-D sine/cosine encoding of an `h x w` grid, `[h*w, f]`.
///
/// The first half of the channels encodes the row, the second half the
/// column; within a half, channel `k` uses frequency `10000^(-2*(k/2)/(f/2))`
/// and alternates sine (even `k`) and cosine (odd `k`).
pub fn sinusoidal_positions<T: Real>(h: usize, w: usize, f: usize) -> Result<Tensor<T>> {
    if f == 0 || f % 2 != 0 {
        return Err(Error::contract(format!("positional width {f} must be even and positive")));
    }
    let half = f / 2;
    let two_pi = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(h * w * f);
    for y in 0..h {
        for x in 0..w {
            let coords = [(y as f64 + 1.0) / h as f64 * two_pi, (x as f64 + 1.0) / w as f64 * two_pi];
            for coord in coords {
                for k in 0..half {
                    let freq = 10000f64.powf(2.0 * (k / 2) as f64 / half as f64);
                    let v = coord / freq;
                    data.push(T::from_f64(if k % 2 == 0 { v.sin() } else { v.cos() }));
                }
            }
        }
    }
    Tensor::new(&[h * w, f], data)
}
