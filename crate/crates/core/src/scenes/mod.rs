//! Synthetic scene benchmark. Each scene type carries its own class mixture
//! and spatial layout, so the "kind" of image is predictive of which objects
//! appear and where, and is recoverable from pooled image features through a
//! background tint.

mod ap;
mod io;
mod render;


use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

use crate::error::{Error, Result};
use crate::matching::{Box4, Target};

pub use ap::{average_precision, coco_thresholds, ApReport, Detection};
pub use io::{format_dataset, parse_dataset, read_dataset, write_dataset};
pub use render::{class_color, render, type_tint, RenderOptions};

/// One labelled object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub class: usize,
    pub bbox: Box4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_type: usize,
    pub seed: u64,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn target(&self) -> Target {
        Target {
            classes: self.objects.iter().map(|o| o.class).collect(),
            boxes: self.objects.iter().map(|o| o.bbox).collect(),
        }
    }
}

/// Six-decimal fixed-point rounding used for every stored coordinate.
pub fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Prior of one scene type.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTypeParams {
    /// Poisson mean of the object count.
    pub mean_count: f64,
    /// Unnormalized class weights, one per class.
    pub class_mix: Vec<f64>,
    pub center_mean: [f64; 2],
    pub center_std: [f64; 2],
}

/// Log-normal size prior of one class: medians of `w` and `h` and a shared log-sigma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSize {
    pub median_w: f64,
    pub median_h: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub types: Vec<SceneTypeParams>,
    pub sizes: Vec<ClassSize>,
    pub max_objects: usize,
}

const MIN_SIZE: f64 = 0.04;
const MAX_SIZE: f64 = 0.6;
/// Gap kept between a box edge and the image border.
const BORDER: f64 = 1e-3;

impl Default for SceneParams {
    fn default() -> Self {
        let mix = |w: [f64; 6]| w.to_vec();
        SceneParams {
            types: vec![
                SceneTypeParams {
                    mean_count: 3.0,
                    class_mix: mix([6.0, 3.0, 0.5, 0.2, 0.2, 0.1]),
                    center_mean: [0.5, 0.5],
                    center_std: [0.12, 0.12],
                },
                SceneTypeParams {
                    mean_count: 3.0,
                    class_mix: mix([0.2, 0.5, 6.0, 3.0, 0.2, 0.1]),
                    center_mean: [0.3, 0.3],
                    center_std: [0.12, 0.1],
                },
                SceneTypeParams {
                    mean_count: 3.0,
                    class_mix: mix([0.1, 0.2, 0.2, 0.5, 6.0, 3.0]),
                    center_mean: [0.5, 0.72],
                    center_std: [0.18, 0.08],
                },
                SceneTypeParams {
                    mean_count: 3.0,
                    class_mix: mix([0.3, 3.0, 0.2, 3.0, 0.2, 3.0]),
                    center_mean: [0.72, 0.4],
                    center_std: [0.08, 0.16],
                },
            ],
            sizes: (0..6)
                .map(|c| ClassSize {
                    median_w: 0.14 + 0.03 * (c % 3) as f64,
                    median_h: 0.14 + 0.03 * ((c + 1) % 3) as f64,
                    sigma: 0.2,
                })
                .collect(),
            max_objects: 8,
        }
    }
}

impl SceneParams {
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_classes(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if self.types.is_empty() || c == 0 || self.max_objects == 0 {
            return Err(Error::config("scene params need types, classes and max_objects > 0"));
        }
        for (t, p) in self.types.iter().enumerate() {
            let ok = p.class_mix.len() == c
                && p.class_mix.iter().all(|w| w.is_finite() && *w >= 0.0)
                && p.class_mix.iter().sum::<f64>() > 0.0
                && p.mean_count.is_finite()
                && p.mean_count > 0.0
                && p.center_std.iter().all(|s| s.is_finite() && *s > 0.0);
            if !ok {
                return Err(Error::config(format!("scene type {t} has an invalid prior")));
            }
        }
        if self.sizes.iter().any(|s| !(s.median_w > 0.0 && s.median_h > 0.0 && s.sigma >= 0.0)) {
            return Err(Error::config("class sizes must be positive"));
        }
        Ok(())
    }
}

/// Draws one scene of the given type; identical `(type, params, seed)` give identical scenes.
pub fn generate_scene(scene_type: usize, params: &SceneParams, seed: u64) -> Result<Scene> {
    if scene_type >= params.num_types() {
        return Err(Error::contract(format!(
            "scene type {scene_type} outside 0..{}",
            params.num_types()
        )));
    }
    params.validate()?;
    let p = &params.types[scene_type];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let count = Poisson::new(p.mean_count).expect("positive mean").sample(&mut rng) as usize;
    let count = count.clamp(1, params.max_objects);
    let classes = WeightedIndex::new(&p.class_mix).expect("validated mixture");
    let cx = Normal::new(p.center_mean[0], p.center_std[0]).expect("validated std");
    let cy = Normal::new(p.center_mean[1], p.center_std[1]).expect("validated std");

    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = classes.sample(&mut rng);
        let s = params.sizes[class];
        let draw = |median: f64, rng: &mut ChaCha8Rng| {
            let v = if s.sigma > 0.0 {
                LogNormal::new(median.ln(), s.sigma).expect("finite").sample(rng)
            } else {
                median
            };
            quantize(v.clamp(MIN_SIZE, MAX_SIZE))
        };
        let w = draw(s.median_w, &mut rng);
        let h = draw(s.median_h, &mut rng);
        // clip centers inward so the whole box stays inside the unit square
        let place = |c: f64, extent: f64| {
            let lo = extent / 2.0 + BORDER;
            quantize(c.clamp(lo, 1.0 - lo))
        };
        let x = place(cx.sample(&mut rng), w);
        let y = place(cy.sample(&mut rng), h);
        objects.push(Object { class, bbox: [x, y, w, h] });
    }
    Ok(Scene {
        scene_type,
        seed,
        objects,
    })
}

/// Per-scene seed derived from a master seed and the scene index (SplitMix64).
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with uniformly drawn types, reproducible from `(params, master)`.
pub fn generate_dataset(params: &SceneParams, count: usize, master: u64) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let seed = scene_seed(master, i);
            let scene_type = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7E).random_range(0..params.num_types());
            generate_scene(scene_type, params, seed)
        })
        .collect()
}
