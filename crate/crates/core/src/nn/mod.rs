//! Transformer and convolutional building blocks on top of the tape.

mod backbone;
mod layers;
mod params;
mod transformer;


pub use backbone::{sinusoidal_positions, Backbone};
pub use layers::{Attended, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, LN_EPS};
pub use params::{finite_difference_check_params, Graph, ParamStore};
pub(crate) use params::normal;
pub use transformer::{Decoder, DecoderLayer, DecoderOutput, Encoder, EncoderLayer, TransformerConfig};
