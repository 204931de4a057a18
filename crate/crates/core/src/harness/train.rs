use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::git_object_hash;
use super::{evaluate, load_splits, EpochRecord, ExperimentReport, OptimConfig, RunConfig, Split};
use crate::detector::{encode_checkpoint, Detector};
use crate::error::{Error, Result};
use crate::matching::{dual_branch_loss, Target};
use crate::nn::{Graph, ParamStore};
use crate::tensor::{ParamId, Real, Tape, Tensor};

/// Adam with decoupled weight decay and global-norm gradient clipping.
/// Moments are kept in `f64` whatever the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    step: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(optim: &OptimConfig) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: optim.weight_decay,
            clip_norm: optim.clip_norm,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update with learning rate `lr`. Returns the gradient norm before
    /// clipping. Parameters without a gradient are left untouched.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::contract("non-finite gradient"));
        }
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get(*id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    let g = g.as_f64() * clip;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    let w = w.as_f64();
                    T::from_f64(w - lr * (update + self.weight_decay * w))
                })
                .collect();
            store.set(*id, Tensor::new(p.shape(), data)?)?;
        }
        Ok(norm)
    }
}

/// A trained model with its report.
pub struct Trained<T: Real> {
    pub detector: Detector,
    pub store: ParamStore<T>,
    pub report: ExperimentReport,
}

/// Trains on the splits described by `cfg`.
pub fn train<T: Real>(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<Trained<T>> {
    let (train, val) = load_splits::<T>(cfg)?;
    train_on(cfg, &train, &val, on_epoch)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    crate::scenes::scene_seed(seed ^ a.wrapping_mul(0xA24B_AED4_963E_E407), b)
}

/// The training loop: shuffled mini-batches, the dual-branch objective when
/// the model has a basic branch and `beta > 0`, Adam with clipping and a
/// step learning-rate drop. Validation runs every `eval_every` epochs and on
/// the last one. A non-finite batch loss aborts the run.
pub fn train_on<T: Real>(
    cfg: &RunConfig,
    train: &Split<T>,
    val: &Split<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation splits"));
    }
    let started = Instant::now();
    let (detector, mut store) = Detector::new::<T>(cfg.model.clone(), cfg.seed)?;
    let targets: Vec<Target> = train.scenes.iter().map(|s| s.target()).collect();
    let with_basic = cfg.model.mode.has_basic_branch() && cfg.beta > 0.0;
    let beta = if with_basic { cfg.beta } else { 0.0 };
    let mut adam = Adam::new(&cfg.optim);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut epochs = Vec::with_capacity(cfg.schedule.epochs);
    let mut final_ap = None;

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = order.chunks(cfg.schedule.batch_size);
        let count = batches.len();
        for (b, idx) in batches.enumerate() {
            let images = train.batch(idx)?;
            let batch_targets: Vec<Target> = idx.iter().map(|&i| targets[i].clone()).collect();
            let mut g = Graph::new(&store, Tape::training(mix(cfg.seed, 2 + epoch as u64, b as u64)));
            let x = g.constant(images);
            let out = detector.forward_branches(&mut g, x, with_basic)?;
            let abort = |loss| Error::NonFinite { epoch, batch: b, loss };
            // overflowing predictions would otherwise surface as matching errors
            let finite = out
                .modulated
                .iter()
                .chain(&out.basic)
                .all(|p| g.value(p.logits).all_finite() && g.value(p.boxes).all_finite());
            if !finite {
                return Err(abort(f64::NAN));
            }
            let loss = dual_branch_loss(&mut g, &out.modulated, &out.basic, &batch_targets, beta, cfg.loss)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(abort(value));
            }
            let grads: Vec<(ParamId, Tensor<T>)> = g.backward(loss)?.params().collect();
            drop(g);
            adam.step(&mut store, &grads, lr).map_err(|_| abort(value))?;
            total += value;
        }
        let last = epoch + 1 == cfg.schedule.epochs;
        let val_map = if last || (epoch + 1) % cfg.schedule.eval_every == 0 {
            let ap = evaluate(&detector, &store, val, &cfg.eval, cfg.schedule.batch_size)?;
            let map = ap.map;
            if last {
                final_ap = Some(ap);
            }
            Some(map)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / count as f64,
            val_map,
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let report = ExperimentReport {
        config: cfg.to_text(),
        epochs,
        final_ap: final_ap.expect("the last epoch is validated"),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint_hash: git_object_hash(&encode_checkpoint(&store)),
    };
    Ok(Trained {
        detector,
        store,
        report,
    })
}
