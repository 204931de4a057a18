use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Scene;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Square image side in pixels.
    pub size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Tint the background by scene type.
    pub tint: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            size: 64,
            noise: 0.05,
            tint: true,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Bright, well-separated colour of an object class.
pub fn class_color(class: usize) -> [f64; 3] {
    hsv(class as f64 * 0.618_033_988_75, 0.85, 0.95)
}

/// Dim background colour of a scene type.
pub fn type_tint(scene_type: usize, num_types: usize) -> [f64; 3] {
    hsv(scene_type as f64 / num_types.max(1) as f64 + 0.08, 0.6, 0.35)
}

const PLAIN_BACKGROUND: [f64; 3] = [0.25, 0.25, 0.25];

/// Draws `scene` as a `[3, size, size]` image in `[0, 1]`. Objects are filled
/// rectangles in their class colour, drawn in order (later ones on top); a
/// pixel belongs to a box when its centre does.
pub fn render<T: Real>(scene: &Scene, num_types: usize, opts: &RenderOptions) -> Tensor<T> {
    let s = opts.size;
    let plane = s * s;
    let bg = if opts.tint {
        type_tint(scene.scene_type, num_types)
    } else {
        PLAIN_BACKGROUND
    };
    let mut img = vec![0.0f64; 3 * plane];
    for c in 0..3 {
        img[c * plane..(c + 1) * plane].fill(bg[c]);
    }
    for o in &scene.objects {
        let [cx, cy, w, h] = o.bbox;
        let color = class_color(o.class);
        let span = |lo: f64, hi: f64| {
            // pixel i covers centre (i + 0.5) / s
            let first = ((lo * s as f64) - 0.5).ceil().max(0.0) as usize;
            let last = ((hi * s as f64) - 0.5).ceil().clamp(0.0, s as f64) as usize;
            first..last
        };
        let xs = span(cx - w / 2.0, cx + w / 2.0);
        let ys = span(cy - h / 2.0, cy + h / 2.0);
        for y in ys {
            for x in xs.clone() {
                for c in 0..3 {
                    img[c * plane + y * s + x] = color[c];
                }
            }
        }
    }
    if opts.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x0015_E5EE);
        let n = Normal::new(0.0, opts.noise).expect("positive noise");
        for v in img.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
    let data = img.into_iter().map(|v| T::from_f64(v.clamp(0.0, 1.0))).collect();
    Tensor::new(&[3, s, s], data).expect("consistent image shape")
}
