//! The experiment suite: fixed-combination perturbation of a trained static
//! model, single-axis ablations and coefficient dumps.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{evaluate, load_splits, train_on, RunConfig, Split};
use crate::detector::{Detector, QueryMode};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::queries::{combine_fixed, FixedMode, QueryBank};
use crate::scenes::scene_seed;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbRow {
    pub mode: FixedMode,
    /// mAP of each trial.
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials; 0 for a single trial.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationStudy {
    pub ratio: usize,
    /// mAP of the unmodified `n`-query model.
    pub original_map: f64,
    pub rows: Vec<PerturbRow>,
}

impl PerturbationStudy {
    pub fn row(&self, mode: FixedMode) -> &PerturbRow {
        self.rows.iter().find(|r| r.mode == mode).expect("every mode is studied")
    }

    /// `mode,trials,mean_map,spread,min_map,max_map`, with the unmodified
    /// model as an `original` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,trials,mean_map,spread,min_map,max_map\n");
        let m = self.original_map;
        writeln!(s, "original,1,{m:.6},{:.6},{m:.6},{m:.6}", 0.0).unwrap();
        for r in &self.rows {
            let min = r.maps.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = r.maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            writeln!(
                s,
                "{},{},{:.6},{:.6},{min:.6},{max:.6}",
                r.mode.name(),
                r.maps.len(),
                r.mean,
                r.spread
            )
            .unwrap();
        }
        s
    }
}

fn mean_spread(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Copy of a static model whose `n` queries are replaced by `queries`
/// (`[m, f]`); every other parameter is shared by name.
fn with_queries<T: Real>(
    det: &Detector,
    store: &ParamStore<T>,
    queries: crate::tensor::Tensor<T>,
) -> Result<(Detector, ParamStore<T>)> {
    let mut config = det.config.clone();
    config.queries = queries.shape()[0];
    let (small, mut small_store) = Detector::new::<T>(config, 0)?;
    let ids: Vec<_> = small_store.ids().collect();
    for id in ids {
        let name = small_store.name(id).to_string();
        let value = if name == "query.static" {
            queries.clone()
        } else {
            let src = store
                .find(&name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{name}`")))?;
            store.get(src).clone()
        };
        small_store.set(id, value)?;
    }
    Ok((small, small_store))
}

/// Replaces the `n` learned queries of a static model by `n / ratio` fixed
/// combinations of consecutive groups, for every [`FixedMode`], and
/// evaluates each on `data`. Random modes run `trials` times with distinct
/// seeds; the averaged mode runs once.
pub fn perturbation_study<T: Real>(
    cfg: &RunConfig,
    det: &Detector,
    store: &ParamStore<T>,
    data: &Split<T>,
    ratio: usize,
    trials: usize,
    seed: u64,
) -> Result<PerturbationStudy> {
    if det.config.mode != QueryMode::Static {
        return Err(Error::contract(format!(
            "perturbation study needs a static model, got {}",
            det.config.mode
        )));
    }
    let n = det.config.queries;
    if ratio == 0 || n % ratio != 0 {
        return Err(Error::contract(format!("{n} queries are not divisible by ratio {ratio}")));
    }
    if trials == 0 {
        return Err(Error::contract("perturbation study needs at least one trial"));
    }
    let id = store
        .find("query.static")
        .ok_or_else(|| Error::contract("checkpoint has no static queries"))?;
    let bank = QueryBank::from_param(store, id, ratio)?;
    let batch = cfg.schedule.batch_size;
    let original_map = evaluate(det, store, data, &cfg.eval, batch)?.map;
    let mut rows = Vec::new();
    for (k, mode) in FixedMode::ALL.into_iter().enumerate() {
        let runs = if mode.is_random() { trials } else { 1 };
        let mut maps = Vec::with_capacity(runs);
        for trial in 0..runs {
            let queries = combine_fixed(store, &bank, mode, scene_seed(seed ^ k as u64, trial as u64))?;
            let (small, small_store) = with_queries(det, store, queries)?;
            maps.push(evaluate(&small, &small_store, data, &cfg.eval, batch)?.map);
        }
        let (mean, spread) = mean_spread(&maps);
        rows.push(PerturbRow {
            mode,
            maps,
            mean,
            spread,
        });
    }
    Ok(PerturbationStudy {
        ratio,
        original_map,
        rows,
    })
}

/// A single config dimension varied by [`ablate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Basic-branch loss weight.
    Beta,
    /// Query ratio `r` (dynamic models; `n = r·m`).
    Ratio,
    /// Query mode among static / nonmodulated / dynamic.
    Nonmodulated,
    /// Query mode among static / direct_mlp / dynamic.
    DirectMlp,
    Epochs,
    /// `true` renders every scene type on the same plain background.
    TintOff,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Beta,
        AblationAxis::Ratio,
        AblationAxis::Nonmodulated,
        AblationAxis::DirectMlp,
        AblationAxis::Epochs,
        AblationAxis::TintOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Beta => "beta",
            AblationAxis::Ratio => "ratio",
            AblationAxis::Nonmodulated => "nonmodulated",
            AblationAxis::DirectMlp => "direct_mlp",
            AblationAxis::Epochs => "epochs",
            AblationAxis::TintOff => "tint_off",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self, cfg: &RunConfig) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Beta => &["0", "0.5", "1"],
            AblationAxis::Ratio => &["2", "4", "8"],
            AblationAxis::Nonmodulated => &["static", "nonmodulated", "dynamic"],
            AblationAxis::DirectMlp => &["static", "direct_mlp", "dynamic"],
            AblationAxis::TintOff => &["false", "true"],
            AblationAxis::Epochs => {
                let e = cfg.schedule.epochs;
                return [e.div_ceil(4), e.div_ceil(2), e].iter().map(ToString::to_string).collect();
            }
        };
        v.iter().map(ToString::to_string).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }
}

/// `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let bad = || Error::config(format!("bad value `{value}` for ablation axis {}", axis.name()));
    let mut out = cfg.clone();
    match axis {
        AblationAxis::Beta => out.beta = value.parse().map_err(|_| bad())?,
        AblationAxis::Ratio => {
            out.model.mode = QueryMode::Dynamic;
            out.set_ratio(value.parse().map_err(|_| bad())?);
        }
        AblationAxis::Nonmodulated | AblationAxis::DirectMlp => {
            let mode: QueryMode = value.parse()?;
            let allowed = match axis {
                AblationAxis::Nonmodulated => QueryMode::Unrelated,
                _ => QueryMode::DirectMlp,
            };
            if ![QueryMode::Static, QueryMode::Dynamic, allowed].contains(&mode) {
                return Err(bad());
            }
            out.model.mode = mode;
            out.model.basic_queries = out.model.ratio * out.model.queries;
        }
        AblationAxis::Epochs => {
            out.schedule.epochs = value.parse().map_err(|_| bad())?;
            if out.optim.lr_drop_epoch.is_some_and(|e| e > out.schedule.epochs) {
                out.optim.lr_drop_epoch = None;
            }
        }
        AblationAxis::TintOff => out.data.tint = !value.parse::<bool>().map_err(|_| bad())?,
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub val_map: f64,
    pub content_hash: String,
}

/// Trains one model per value, all with the config's seed and data, and
/// reports the final validation mAP of each.
pub fn ablate<T: Real>(
    cfg: &RunConfig,
    axis: AblationAxis,
    values: &[String],
    mut on_run: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|v| apply_axis(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, run_cfg) in values.iter().zip(&configs) {
        let (train, val) = load_splits::<T>(run_cfg)?;
        let trained = train_on(run_cfg, &train, &val, |_| {})?;
        let row = AblationRow {
            value: value.clone(),
            val_map: trained.report.final_map(),
            content_hash: trained.report.content_hash(),
        };
        on_run(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,val_map\n");
    for r in rows {
        writeln!(s, "{},{},{:.6}", axis.name(), r.value, r.val_map).unwrap();
    }
    s
}

/// Per-scene combination coefficients of a dynamic model and their 2-D PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientDump {
    pub groups: usize,
    pub ratio: usize,
    /// `(scene id, scene type)` per row.
    pub scenes: Vec<(usize, usize)>,
    /// Row-major `m·r` coefficients per scene.
    pub coefficients: Vec<Vec<f64>>,
    pub pca: Vec<[f64; 2]>,
}

impl CoefficientDump {
    /// `scene,scene_type,w_<group>_<j>...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,scene_type");
        for i in 0..self.groups {
            for j in 0..self.ratio {
                write!(s, ",w_{i}_{j}").unwrap();
            }
        }
        s.push('\n');
        for ((id, ty), w) in self.scenes.iter().zip(&self.coefficients) {
            write!(s, "{id},{ty}").unwrap();
            for x in w {
                write!(s, ",{x:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// `scene,scene_type,pc1,pc2`
    pub fn pca_csv(&self) -> String {
        let mut s = String::from("scene,scene_type,pc1,pc2\n");
        for ((id, ty), [a, b]) in self.scenes.iter().zip(&self.pca) {
            writeln!(s, "{id},{ty},{a:.6},{b:.6}").unwrap();
        }
        s
    }

    /// [`cluster_separation`] of the PCA coordinates by scene type.
    pub fn separation(&self) -> Result<(f64, f64)> {
        let types: Vec<usize> = self.scenes.iter().map(|s| s.1).collect();
        cluster_separation(&self.pca, &types)
    }
}

/// Coefficients `[m, r]` of every scene, flattened, plus their PCA.
pub fn dump_coefficients<T: Real>(det: &Detector, store: &ParamStore<T>, data: &Split<T>, batch: usize) -> Result<CoefficientDump> {
    if det.config.mode != QueryMode::Dynamic {
        return Err(Error::contract(format!(
            "coefficient dump needs a dynamic model, got {}",
            det.config.mode
        )));
    }
    if data.is_empty() || batch == 0 {
        return Err(Error::contract("coefficient dump needs scenes and a positive batch size"));
    }
    let (m, r) = (det.config.queries, det.config.ratio);
    let mut coefficients = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for idx in indices.chunks(batch) {
        let w = det.coefficients(store, &data.batch(idx)?)?.to_f64_vec();
        coefficients.extend(w.chunks(m * r).map(<[f64]>::to_vec));
    }
    let pca = pca_2d(&coefficients)?;
    Ok(CoefficientDump {
        groups: m,
        ratio: r,
        scenes: data.scenes.iter().enumerate().map(|(i, s)| (i, s.scene_type)).collect(),
        coefficients,
        pca,
    })
}

/// Eigen-decomposition of a symmetric `d x d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and column eigenvectors (row-major).
fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        let scale: f64 = (0..d).map(|i| a[i * d + i] * a[i * d + i]).sum::<f64>();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Projection of the centred rows onto the two leading principal axes.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.len() < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("PCA needs at least two rows of equal width ≥ 2"));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let xi = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n - 1.0;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = symmetric_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let mut axis: Vec<f64> = (0..d).map(|k| vecs[k * d + c]).collect();
            let lead = axis.iter().cloned().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
            axis
        })
        .collect();
    Ok(rows
        .iter()
        .map(|r| {
            let proj = |axis: &[f64]| axis.iter().zip(r).zip(&mean).map(|((a, x), m)| a * (x - m)).sum();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// `(inter, intra)`: the mean distance between the per-type centroids and
/// the mean distance of points to their own type's centroid.
pub fn cluster_separation(points: &[[f64; 2]], types: &[usize]) -> Result<(f64, f64)> {
    if points.len() != types.len() {
        return Err(Error::contract("one type per point"));
    }
    let mut sums: std::collections::BTreeMap<usize, ([f64; 2], usize)> = Default::default();
    for (p, &t) in points.iter().zip(types) {
        let e = sums.entry(t).or_insert(([0.0; 2], 0));
        e.0[0] += p[0];
        e.0[1] += p[1];
        e.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::contract("cluster separation needs at least two scene types"));
    }
    let centroids: std::collections::BTreeMap<usize, [f64; 2]> =
        sums.iter().map(|(&t, (s, c))| (t, [s[0] / *c as f64, s[1] / *c as f64])).collect();
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let cs: Vec<&[f64; 2]> = centroids.values().collect();
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            inter += dist(cs[i], cs[j]);
            pairs += 1;
        }
    }
    let intra = points.iter().zip(types).map(|(p, t)| dist(p, &centroids[t])).sum::<f64>() / points.len() as f64;
    Ok((inter / pairs as f64, intra))
}
