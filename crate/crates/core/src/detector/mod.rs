//! The detection model: backbone → encoder → object queries → decoder →
//! class and box heads, with several ways of producing the queries.

mod checkpoint;


use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::Predictions;
use crate::nn::{normal, sinusoidal_positions, Backbone, Decoder, Encoder, Graph, Linear, Mlp, ParamStore, TransformerConfig};
use crate::queries::{modulate, CoeffNet, DirectMlpQueries, QueryBank, COEFF_HIDDEN};
use crate::scenes::Detection;
use crate::tensor::{ParamId, Real, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

/// How the decoder's object queries are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryMode {
    /// `m` learned queries (the baseline).
    Static,
    /// `m` per-image convex combinations of `n = r·m` learned basic queries;
    /// the basic queries are also decoded during training.
    Dynamic,
    /// Control: `m` learned queries plus an unrelated group of `n` learned
    /// queries decoded only during training.
    Unrelated,
    /// Ablation: `m` queries regressed directly from pooled features.
    DirectMlp,
}

impl QueryMode {
    pub const ALL: [QueryMode; 4] = [QueryMode::Static, QueryMode::Dynamic, QueryMode::Unrelated, QueryMode::DirectMlp];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Static => "static",
            QueryMode::Dynamic => "dynamic",
            QueryMode::Unrelated => "nonmodulated",
            QueryMode::DirectMlp => "direct_mlp",
        }
    }

    /// Whether training decodes a second query set.
    pub fn has_basic_branch(self) -> bool {
        matches!(self, QueryMode::Dynamic | QueryMode::Unrelated)
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: QueryMode,
    /// `n`: basic queries (dynamic) or the unrelated training-only group.
    pub basic_queries: usize,
    /// `m`: queries seen by the decoder at inference.
    pub queries: usize,
    pub ratio: usize,
    /// Object classes, excluding "no object".
    pub classes: usize,
    pub transformer: TransformerConfig,
    /// Output channels of each stride-2 backbone stage.
    pub backbone: Vec<usize>,
    pub image_size: usize,
    pub in_channels: usize,
    pub coeff_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: QueryMode::Dynamic,
            basic_queries: 64,
            queries: 16,
            ratio: 4,
            classes: 6,
            transformer: TransformerConfig::default(),
            backbone: vec![16, 32, 64, 64],
            image_size: 64,
            in_channels: 3,
            coeff_hidden: COEFF_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.queries == 0 || self.classes == 0 || self.in_channels == 0 || self.coeff_hidden == 0 {
            return Err(Error::config("queries, classes, channels and hidden width must be positive"));
        }
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return Err(Error::config("backbone needs at least one stage of positive width"));
        }
        let stride = 1usize << self.backbone.len();
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of the backbone stride {stride}",
                self.image_size
            )));
        }
        match self.mode {
            QueryMode::Dynamic if self.ratio == 0 || self.basic_queries != self.ratio * self.queries => {
                Err(Error::config(format!(
                    "dynamic mode needs basic_queries = ratio * queries, got {} != {} * {}",
                    self.basic_queries, self.ratio, self.queries
                )))
            }
            QueryMode::Unrelated if self.basic_queries == 0 => Err(Error::config("nonmodulated mode needs basic queries")),
            _ => Ok(()),
        }
    }

    /// Feature-map side length after the backbone.
    pub fn grid(&self) -> usize {
        self.image_size >> self.backbone.len()
    }
}

/// Learned parameters that produce the decoder queries.
#[derive(Clone, Debug)]
pub enum QuerySource {
    Static { queries: ParamId },
    Dynamic { bank: QueryBank, coeff: CoeffNet },
    Unrelated { queries: ParamId, extra: ParamId },
    DirectMlp { net: DirectMlpQueries },
}

/// Invocation counts of the expensive stages.
#[derive(Debug, Default)]
pub struct Counters {
    backbone: AtomicUsize,
    decoder: AtomicUsize,
    basic_decoder: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub backbone: usize,
    /// All decoder invocations, including basic-branch ones.
    pub decoder: usize,
    pub basic_decoder: usize,
}

/// Training-time outputs: one [`Predictions`] per decoder layer and branch.
pub struct TrainOutput {
    pub modulated: Vec<Predictions>,
    /// Empty when the basic branch was not evaluated.
    pub basic: Vec<Predictions>,
    /// `[batch, m, r]` coefficients in dynamic mode.
    pub coefficients: Option<Var>,
}

struct Trunk {
    memory: Var,
    pos: Var,
    pooled: Var,
    batch: usize,
}

/// Model architecture; parameters live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub input_proj: Linear,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub class_head: Linear,
    pub box_head: Mlp,
    pub source: QuerySource,
    counters: Counters,
}

impl Detector {
    /// Builds the model and registers freshly initialized parameters. The
    /// shared trunk is registered first, so models of different modes built
    /// from the same seed start from identical trunk weights.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = config.transformer.dim;
        let feat_channels = *config.backbone.last().unwrap();
        let backbone = Backbone::new(&mut store, "backbone", config.in_channels, &config.backbone, &mut rng)?;
        let input_proj = Linear::new(&mut store, "input_proj", *config.backbone.last().unwrap(), f, &mut rng);
        let encoder = Encoder::new(&mut store, "encoder", &config.transformer, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", &config.transformer, &mut rng)?;
        let class_head = Linear::new(&mut store, "class_head", f, config.classes + 1, &mut rng);
        let box_head = Mlp::new(&mut store, "box_head", &[f, f, f, 4], &mut rng);

        let m = config.queries;
        let source = match config.mode {
            QueryMode::Static => QuerySource::Static {
                queries: store.register("query.static", normal(&mut rng, &[m, f], 0.02)),
            },
            QueryMode::Dynamic => {
                let bank = QueryBank::new(&mut store, "query.basic", m, config.ratio, f, &mut rng)?;
                let coeff = CoeffNet::new(&mut store, "coeff", feat_channels, config.coeff_hidden, m, config.ratio, false, &mut rng);
                QuerySource::Dynamic { bank, coeff }
            }
            QueryMode::Unrelated => QuerySource::Unrelated {
                queries: store.register("query.static", normal(&mut rng, &[m, f], 0.02)),
                extra: store.register("query.extra", normal(&mut rng, &[config.basic_queries, f], 0.02)),
            },
            QueryMode::DirectMlp => QuerySource::DirectMlp {
                net: DirectMlpQueries::new(&mut store, "direct", feat_channels, config.coeff_hidden, m, f, false, &mut rng),
            },
        };
        let detector = Detector {
            config,
            backbone,
            input_proj,
            encoder,
            decoder,
            class_head,
            box_head,
            source,
            counters: Counters::default(),
        };
        Ok((detector, store))
    }

    pub fn counters(&self) -> CounterSnapshot {
        CounterSnapshot {
            backbone: self.counters.backbone.load(Ordering::Relaxed),
            decoder: self.counters.decoder.load(Ordering::Relaxed),
            basic_decoder: self.counters.basic_decoder.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        self.counters.backbone.store(0, Ordering::Relaxed);
        self.counters.decoder.store(0, Ordering::Relaxed);
        self.counters.basic_decoder.store(0, Ordering::Relaxed);
    }

    /// Parameters of the query-producing mechanism (excluding the bank itself).
    pub fn generator_params(&self) -> Vec<ParamId> {
        match &self.source {
            QuerySource::Dynamic { coeff, .. } => coeff.params(),
            QuerySource::DirectMlp { net } => net.params(),
            _ => Vec::new(),
        }
    }

    fn trunk<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Trunk> {
        let s = g.shape(images).to_vec();
        let images = match s.len() {
            3 => g.reshape(images, &[1, s[0], s[1], s[2]])?,
            4 => images,
            _ => return Err(Error::shape("detector input", &s, &[self.config.in_channels])),
        };
        let size = self.config.image_size;
        if g.shape(images)[1..] != [self.config.in_channels, size, size] {
            return Err(Error::shape(
                "detector input",
                g.shape(images),
                &[self.config.in_channels, size, size],
            ));
        }
        let batch = g.shape(images)[0];
        self.counters.backbone.fetch_add(1, Ordering::Relaxed);
        let feat = self.backbone.forward(g, images)?;
        let fs = g.shape(feat).to_vec();
        let (c, h, w) = (fs[1], fs[2], fs[3]);
        let flat = g.reshape(feat, &[batch, c, h * w])?;
        let tokens = g.permute(flat, &[0, 2, 1])?;
        // coefficients see the backbone features, not the encoder output
        let pooled = g.mean_axis(tokens, 1)?;
        let tokens = self.input_proj.forward(g, tokens)?;
        let pos = g.constant(sinusoidal_positions(h, w, self.config.transformer.dim)?);
        let x = g.add(tokens, pos)?;
        let memory = self.encoder.forward(g, x)?;
        Ok(Trunk {
            memory,
            pos,
            pooled,
            batch,
        })
    }

    fn decode<T: Real>(&self, g: &mut Graph<'_, T>, trunk: &Trunk, queries: Var, basic: bool) -> Result<Vec<Predictions>> {
        self.counters.decoder.fetch_add(1, Ordering::Relaxed);
        if basic {
            self.counters.basic_decoder.fetch_add(1, Ordering::Relaxed);
        }
        let out = self.decoder.forward(g, trunk.memory, Some(trunk.pos), queries)?;
        out.layers
            .into_iter()
            .map(|h| {
                let logits = self.class_head.forward(g, h)?;
                let raw = self.box_head.forward(g, h)?;
                let boxes = g.sigmoid(raw);
                Ok(Predictions { logits, boxes })
            })
            .collect()
    }

    /// `[batch, m, f]` queries seen at inference, plus the coefficients in dynamic mode.
    fn main_queries<T: Real>(&self, g: &mut Graph<'_, T>, trunk: &Trunk) -> Result<(Var, Option<Var>)> {
        match &self.source {
            QuerySource::Static { queries } | QuerySource::Unrelated { queries, .. } => {
                let q = g.param(*queries);
                Ok((g.broadcast(q, trunk.batch), None))
            }
            QuerySource::Dynamic { bank, coeff } => {
                let w = coeff.forward_pooled(g, trunk.pooled)?;
                let basic = g.param(bank.basic);
                Ok((modulate(g, basic, w)?, Some(w)))
            }
            QuerySource::DirectMlp { net } => Ok((net.forward_pooled(g, trunk.pooled)?, None)),
        }
    }

    fn basic_queries<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> Option<Var> {
        let id = match &self.source {
            QuerySource::Dynamic { bank, .. } => bank.basic,
            QuerySource::Unrelated { extra, .. } => *extra,
            _ => return None,
        };
        let q = g.param(id);
        Some(g.broadcast(q, batch))
    }

    /// Every decoder layer's predictions for the inference queries and, when
    /// `with_basic` is set and the mode has one, for the basic/extra queries.
    /// The trunk runs once and is shared by both branches.
    pub fn forward_branches<T: Real>(&self, g: &mut Graph<'_, T>, images: Var, with_basic: bool) -> Result<TrainOutput> {
        let trunk = self.trunk(g, images)?;
        let (queries, coefficients) = self.main_queries(g, &trunk)?;
        let modulated = self.decode(g, &trunk, queries, false)?;
        let basic = match with_basic.then(|| self.basic_queries(g, trunk.batch)).flatten() {
            Some(q) => self.decode(g, &trunk, q, true)?,
            None => Vec::new(),
        };
        Ok(TrainOutput {
            modulated,
            basic,
            coefficients,
        })
    }

    /// Dual-branch forward of a dynamic (or nonmodulated-control) model.
    pub fn forward_train<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<TrainOutput> {
        if !self.config.mode.has_basic_branch() {
            return Err(Error::contract(format!(
                "forward_train needs a two-branch model, this one is {}",
                self.config.mode
            )));
        }
        self.forward_branches(g, images, true)
    }

    /// Final-layer predictions from the inference queries only.
    pub fn forward_infer<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Predictions> {
        let trunk = self.trunk(g, images)?;
        let (queries, _) = self.main_queries(g, &trunk)?;
        let layers = self.decode(g, &trunk, queries, false)?;
        Ok(*layers.last().expect("at least one decoder layer"))
    }

    /// Combination coefficients `[batch, m, r]` for a batch of images.
    pub fn coefficients<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let QuerySource::Dynamic { coeff, .. } = &self.source else {
            return Err(Error::contract(format!("{} model has no combination coefficients", self.config.mode)));
        };
        let mut g = Graph::eval(store);
        let x = g.constant(images.clone());
        let trunk = self.trunk(&mut g, x)?;
        let w = coeff.forward_pooled(&mut g, trunk.pooled)?;
        Ok(g.value(w).clone())
    }

    /// Scored detections per image: each query's best real class, kept when
    /// its softmax probability exceeds `threshold` (a threshold of 0 keeps
    /// every query). No suppression step.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>, threshold: f64) -> Result<Vec<Vec<Detection>>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::contract(format!("score threshold {threshold} outside [0, 1]")));
        }
        let mut g = Graph::eval(store);
        let x = g.constant(images.clone());
        let p = self.forward_infer(&mut g, x)?;
        let logits = g.value(p.logits).to_f64_vec();
        let boxes = g.value(p.boxes).to_f64_vec();
        let k = self.config.queries;
        let batch = boxes.len() / (4 * k);
        Ok((0..batch)
            .map(|b| {
                let c1 = self.config.classes + 1;
                detections_from(
                    &logits[b * k * c1..(b + 1) * k * c1],
                    &boxes[b * k * 4..(b + 1) * k * 4],
                    self.config.classes,
                    threshold,
                )
            })
            .collect())
    }
}

/// Post-processing of one image's `[k, C+1]` logits and `[k, 4]` boxes.
pub fn detections_from(logits: &[f64], boxes: &[f64], classes: usize, threshold: f64) -> Vec<Detection> {
    let probs = crate::matching::softmax_rows(logits, classes + 1);
    probs
        .chunks(classes + 1)
        .zip(boxes.chunks(4))
        .filter_map(|(p, b)| {
            let (class, &score) = p[..classes]
                .iter()
                .enumerate()
                .fold((0, &p[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            (threshold <= 0.0 || score > threshold).then(|| Detection {
                bbox: [b[0], b[1], b[2], b[3]],
                class,
                score,
            })
        })
        .collect()
}
