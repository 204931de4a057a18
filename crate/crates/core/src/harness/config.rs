//! Run configuration in a flat `key = value` format:
//!
//! ```text
//! # comment
//! seed = 7
//! model.mode = dynamic
//! model.ratio = 4
//! model.backbone = 16,32,64,64
//! ```
//!
//! Keys that are absent take their defaults. [`RunConfig::to_text`] writes
//! every key in a fixed order, so `parse(to_text(c)) == c` and the text form
//! is stable under a second round trip.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::detector::{ModelConfig, QueryMode};
use crate::error::{Error, Result};
use crate::matching::CostWeights;
use crate::scenes::{RenderOptions, SceneParams};

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision `{s}` (f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by
    /// `lr_drop_factor`; `None` means 80% of the epochs.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 30,
            batch_size: 16,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset files; when absent the split is generated from its seed.
    pub train_path: Option<String>,
    pub val_path: Option<String>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub noise: f64,
    pub tint: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            val_path: None,
            train_scenes: 2000,
            val_scenes: 500,
            train_seed: 1,
            val_seed: 2,
            noise: 0.05,
            tint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Score threshold of kept detections; 0 keeps every query.
    pub threshold: f64,
    /// Worker threads for evaluation; 1 is sequential.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Weight of the basic-branch loss.
    pub beta: f64,
    pub loss: CostWeights,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F64,
            beta: 1.0,
            loss: CostWeights::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("bad value `{value}` for `{key}` (true or false)")),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`], in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "precision",
        "beta",
        "loss.class",
        "loss.l1",
        "loss.giou",
        "model.mode",
        "model.basic_queries",
        "model.queries",
        "model.ratio",
        "model.classes",
        "model.dim",
        "model.heads",
        "model.encoder_layers",
        "model.decoder_layers",
        "model.ff_dim",
        "model.dropout",
        "model.backbone",
        "model.image_size",
        "model.coeff_hidden",
        "optim.lr",
        "optim.weight_decay",
        "optim.clip_norm",
        "optim.lr_drop_epoch",
        "optim.lr_drop_factor",
        "schedule.epochs",
        "schedule.batch_size",
        "schedule.eval_every",
        "data.train_path",
        "data.val_path",
        "data.train_scenes",
        "data.val_scenes",
        "data.train_seed",
        "data.val_seed",
        "data.noise",
        "data.tint",
        "eval.threshold",
        "eval.workers",
    ];

    /// Assigns one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.model.transformer;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "precision" => self.precision = value.parse().map_err(|e: Error| e.to_string())?,
            "beta" => self.beta = parse_value(key, value)?,
            "loss.class" => self.loss.class = parse_value(key, value)?,
            "loss.l1" => self.loss.l1 = parse_value(key, value)?,
            "loss.giou" => self.loss.giou = parse_value(key, value)?,
            "model.mode" => self.model.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "model.basic_queries" => self.model.basic_queries = parse_value(key, value)?,
            "model.queries" => self.model.queries = parse_value(key, value)?,
            "model.ratio" => self.model.ratio = parse_value(key, value)?,
            "model.classes" => self.model.classes = parse_value(key, value)?,
            "model.dim" => t.dim = parse_value(key, value)?,
            "model.heads" => t.heads = parse_value(key, value)?,
            "model.encoder_layers" => t.encoder_layers = parse_value(key, value)?,
            "model.decoder_layers" => t.decoder_layers = parse_value(key, value)?,
            "model.ff_dim" => t.ff_dim = parse_value(key, value)?,
            "model.dropout" => t.dropout = parse_value(key, value)?,
            "model.backbone" => self.model.backbone = parse_list(key, value)?,
            "model.image_size" => self.model.image_size = parse_value(key, value)?,
            "model.coeff_hidden" => self.model.coeff_hidden = parse_value(key, value)?,
            "optim.lr" => self.optim.lr = parse_value(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_value(key, value)?,
            "optim.clip_norm" => self.optim.clip_norm = parse_value(key, value)?,
            "optim.lr_drop_epoch" => {
                self.optim.lr_drop_epoch = if value == "auto" { None } else { Some(parse_value(key, value)?) }
            }
            "optim.lr_drop_factor" => self.optim.lr_drop_factor = parse_value(key, value)?,
            "schedule.epochs" => self.schedule.epochs = parse_value(key, value)?,
            "schedule.batch_size" => self.schedule.batch_size = parse_value(key, value)?,
            "schedule.eval_every" => self.schedule.eval_every = parse_value(key, value)?,
            "data.train_path" => self.data.train_path = (!value.is_empty()).then(|| value.to_string()),
            "data.val_path" => self.data.val_path = (!value.is_empty()).then(|| value.to_string()),
            "data.train_scenes" => self.data.train_scenes = parse_value(key, value)?,
            "data.val_scenes" => self.data.val_scenes = parse_value(key, value)?,
            "data.train_seed" => self.data.train_seed = parse_value(key, value)?,
            "data.val_seed" => self.data.val_seed = parse_value(key, value)?,
            "data.noise" => self.data.noise = parse_value(key, value)?,
            "data.tint" => self.data.tint = parse_bool(key, value)?,
            "eval.threshold" => self.eval.threshold = parse_value(key, value)?,
            "eval.workers" => self.eval.workers = parse_value(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Value of one key in its serialized form.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.model.transformer;
        let opt = |p: &Option<String>| p.clone().unwrap_or_default();
        Some(match key {
            "seed" => self.seed.to_string(),
            "precision" => self.precision.name().to_string(),
            "beta" => self.beta.to_string(),
            "loss.class" => self.loss.class.to_string(),
            "loss.l1" => self.loss.l1.to_string(),
            "loss.giou" => self.loss.giou.to_string(),
            "model.mode" => self.model.mode.name().to_string(),
            "model.basic_queries" => self.model.basic_queries.to_string(),
            "model.queries" => self.model.queries.to_string(),
            "model.ratio" => self.model.ratio.to_string(),
            "model.classes" => self.model.classes.to_string(),
            "model.dim" => t.dim.to_string(),
            "model.heads" => t.heads.to_string(),
            "model.encoder_layers" => t.encoder_layers.to_string(),
            "model.decoder_layers" => t.decoder_layers.to_string(),
            "model.ff_dim" => t.ff_dim.to_string(),
            "model.dropout" => t.dropout.to_string(),
            "model.backbone" => join(&self.model.backbone),
            "model.image_size" => self.model.image_size.to_string(),
            "model.coeff_hidden" => self.model.coeff_hidden.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.clip_norm" => self.optim.clip_norm.to_string(),
            "optim.lr_drop_epoch" => self.optim.lr_drop_epoch.map_or("auto".into(), |e| e.to_string()),
            "optim.lr_drop_factor" => self.optim.lr_drop_factor.to_string(),
            "schedule.epochs" => self.schedule.epochs.to_string(),
            "schedule.batch_size" => self.schedule.batch_size.to_string(),
            "schedule.eval_every" => self.schedule.eval_every.to_string(),
            "data.train_path" => opt(&self.data.train_path),
            "data.val_path" => opt(&self.data.val_path),
            "data.train_scenes" => self.data.train_scenes.to_string(),
            "data.val_scenes" => self.data.val_scenes.to_string(),
            "data.train_seed" => self.data.train_seed.to_string(),
            "data.val_seed" => self.data.val_seed.to_string(),
            "data.noise" => self.data.noise.to_string(),
            "data.tint" => self.data.tint.to_string(),
            "eval.threshold" => self.eval.threshold.to_string(),
            "eval.workers" => self.eval.workers.to_string(),
            _ => return None,
        })
    }

    /// Parses the config format on top of the defaults. Syntax errors,
    /// unknown keys, repeated keys and bad values report their line; the
    /// result is then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key `{key}` given twice")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(o.lr) && positive(o.clip_norm) && positive(o.lr_drop_factor)) {
            return Err(Error::config("learning rate, clip norm and lr drop factor must be positive"));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 || s.eval_every == 0 {
            return Err(Error::config("epochs, batch size and eval interval must be at least 1"));
        }
        if self.eval.workers == 0 || !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::config("eval needs at least one worker and a threshold in [0, 1]"));
        }
        if !(self.data.noise.is_finite() && self.data.noise >= 0.0) {
            return Err(Error::config("pixel noise must be nonnegative"));
        }
        if self.model.in_channels != 3 {
            return Err(Error::config("rendered scenes have 3 channels"));
        }
        let classes = self.scene_params().num_classes();
        if self.model.classes != classes {
            return Err(Error::config(format!(
                "model predicts {} classes, the scene generator has {classes}",
                self.model.classes
            )));
        }
        Ok(())
    }

    /// Epoch from which the dropped learning rate applies.
    pub fn lr_drop_epoch(&self) -> usize {
        self.optim
            .lr_drop_epoch
            .unwrap_or((self.schedule.epochs as f64 * 0.8).round() as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch() {
            self.optim.lr * self.optim.lr_drop_factor
        } else {
            self.optim.lr
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams::default()
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            size: self.model.image_size,
            noise: self.data.noise,
            tint: self.data.tint,
        }
    }

    /// Changes the decoder query count and ratio together, keeping
    /// `basic_queries = ratio * queries` for dynamic models.
    pub fn set_ratio(&mut self, ratio: usize) {
        self.model.ratio = ratio;
        if self.model.mode == QueryMode::Dynamic {
            self.model.basic_queries = ratio * self.model.queries;
        }
    }
}
