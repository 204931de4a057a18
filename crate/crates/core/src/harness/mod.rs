//! Configuration, training, evaluation and the experiment suite.

mod config;
mod eval;
mod report;
mod study;
mod train;


pub use config::{DataConfig, EvalConfig, OptimConfig, Precision, RunConfig, ScheduleConfig};
pub use eval::evaluate;
pub use report::{git_object_hash, EpochRecord, ExperimentReport};
pub use study::{
    ablate, ablation_csv, apply_axis, cluster_separation, dump_coefficients, pca_2d, perturbation_study, AblationAxis, AblationRow,
    CoefficientDump, PerturbRow, PerturbationStudy,
};
pub use train::{train, train_on, Adam, Trained};

use crate::error::{Error, Result};
use crate::scenes::{generate_dataset, read_dataset, render, RenderOptions, Scene};
use crate::tensor::{Real, Tensor};

/// Scenes together with their rendered images.
#[derive(Clone, Debug)]
pub struct Split<T: Real> {
    pub scenes: Vec<Scene>,
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> Split<T> {
    pub fn render(scenes: Vec<Scene>, num_types: usize, opts: &RenderOptions) -> Self {
        let images = scenes.iter().map(|s| render(s, num_types, opts)).collect();
        Split { scenes, images }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Stacks the images at `indices` into one `[B, 3, S, S]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = self.images.get(*indices.first().ok_or_else(|| Error::contract("empty batch"))?);
        let shape = first.ok_or_else(|| Error::contract("batch index out of range"))?.shape();
        let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| Error::contract("batch index out of range"))?;
            data.extend_from_slice(img.data());
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        Tensor::new(&full, data)
    }
}

/// Training and validation scenes of a run: read from the configured paths,
/// otherwise generated from the split seeds.
pub fn load_scenes(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let params = cfg.scene_params();
    let load = |path: &Option<String>, count, seed| match path {
        Some(p) => read_dataset(std::path::Path::new(p)),
        None => generate_dataset(&params, count, seed),
    };
    Ok((
        load(&cfg.data.train_path, cfg.data.train_scenes, cfg.data.train_seed)?,
        load(&cfg.data.val_path, cfg.data.val_scenes, cfg.data.val_seed)?,
    ))
}

/// Rendered training and validation splits of a run.
pub fn load_splits<T: Real>(cfg: &RunConfig) -> Result<(Split<T>, Split<T>)> {
    let (train, val) = load_scenes(cfg)?;
    let types = cfg.scene_params().num_types();
    let opts = cfg.render_options();
    Ok((Split::render(train, types, &opts), Split::render(val, types, &opts)))
}
