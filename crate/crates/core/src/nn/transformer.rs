use rand::Rng;

use super::layers::{FeedForward, LayerNorm, MultiHeadAttention};
use super::params::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Model width; also the length of each query vector.
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 128,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.decoder_layers == 0 || self.ff_dim == 0 {
            return Err(Error::config("decoder layers and feedforward dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

/// Pre-norm self-attention encoder. With zero layers it is the identity.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let p = format!("{name}.{i}");
            layers.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), cfg.dim, cfg.heads, rng)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), cfg.dim, cfg.ff_dim, rng),
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), cfg.dim),
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), cfg.dim),
            });
        }
        let final_norm = (!layers.is_empty()).then(|| LayerNorm::new(store, &format!("{name}.norm"), cfg.dim));
        Ok(Encoder {
            layers,
            final_norm,
            dropout: cfg.dropout,
        })
    }

    /// `x` is `[tokens, dim]` or `[batch, tokens, dim]`, positions already added.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.norm1.forward(g, x)?;
            let a = layer.attn.forward(g, h, h, h)?.out;
            let a = g.dropout(a, self.dropout);
            x = g.add(x, a)?;
            let h = layer.norm2.forward(g, x)?;
            let f = layer.ff.forward(g, h, self.dropout)?;
            let f = g.dropout(f, self.dropout);
            x = g.add(x, f)?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(g, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

/// Per-layer decoder outputs (after the shared output norm) plus the
/// cross-attention weights of each layer.
pub struct DecoderOutput {
    pub layers: Vec<Var>,
    pub cross_weights: Vec<Var>,
}

/// Pre-norm decoder: query self-attention, cross-attention into the memory,
/// feedforward. No positional term is added to the queries.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("{name}.{i}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), cfg.dim, cfg.heads, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), cfg.dim, cfg.heads, rng)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), cfg.dim, cfg.ff_dim, rng),
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), cfg.dim),
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), cfg.dim),
                norm3: LayerNorm::new(store, &format!("{p}.norm3"), cfg.dim),
            });
        }
        Ok(Decoder {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim),
            dropout: cfg.dropout,
        })
    }

    /// `memory` is `[hw, dim]` (or batched); `key_pos`, when given, is added to
    /// the memory on the key side of cross-attention. `queries` is `[k, dim]`
    /// or `[batch, k, dim]` matching the memory's batching.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        key_pos: Option<Var>,
        queries: Var,
    ) -> Result<DecoderOutput> {
        let keys = match key_pos {
            Some(p) => g.add(memory, p)?,
            None => memory,
        };
        let mut x = queries;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.norm1.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, h)?.out;
            let a = g.dropout(a, self.dropout);
            x = g.add(x, a)?;

            let h = layer.norm2.forward(g, x)?;
            let c = layer.cross_attn.forward(g, h, keys, memory)?;
            cross_weights.push(c.weights);
            let a = g.dropout(c.out, self.dropout);
            x = g.add(x, a)?;

            let h = layer.norm3.forward(g, x)?;
            let f = layer.ff.forward(g, h, self.dropout)?;
            let f = g.dropout(f, self.dropout);
            x = g.add(x, f)?;

            outputs.push(self.norm.forward(g, x)?);
        }
        Ok(DecoderOutput {
            layers: outputs,
            cross_weights,
        })
    }
}
