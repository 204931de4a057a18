use super::{EvalConfig, Split};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scenes::{average_precision, coco_thresholds, ApReport, Detection};
use crate::tensor::Real;

/// Inference over every scene followed by COCO-style AP.
///
/// Scenes are cut into fixed batches of `batch` regardless of `workers`, so
/// the sequential and sharded paths run identical forward passes and the
/// report does not depend on the worker count.
pub fn evaluate<T: Real>(
    det: &Detector,
    store: &ParamStore<T>,
    data: &Split<T>,
    eval: &EvalConfig,
    batch: usize,
) -> Result<ApReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if batch == 0 || eval.workers == 0 {
        return Err(Error::contract("evaluation needs a positive batch size and worker count"));
    }
    let classes = det.config.classes;
    if let Some(o) = data.scenes.iter().flat_map(|s| &s.objects).find(|o| o.class >= classes) {
        return Err(Error::contract(format!(
            "dataset has class {} but the model predicts {classes} classes",
            o.class
        )));
    }
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect();
    let run = |idx: &[usize]| -> Result<Vec<Vec<Detection>>> { det.predict(store, &data.batch(idx)?, eval.threshold) };

    let mut per_chunk: Vec<Option<Vec<Vec<Detection>>>> = vec![None; chunks.len()];
    if eval.workers == 1 {
        for (slot, idx) in per_chunk.iter_mut().zip(&chunks) {
            *slot = Some(run(idx)?);
        }
    } else {
        let workers = eval.workers.min(chunks.len());
        let results = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|c| run(&chunks[c]).map(|d| (c, d)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        for (c, dets) in results.into_iter().flatten() {
            per_chunk[c] = Some(dets);
        }
    }
    let predictions: Vec<Vec<Detection>> = per_chunk.into_iter().flat_map(|c| c.expect("every chunk ran")).collect();
    Ok(average_precision(&predictions, &data.scenes, classes, &coco_thresholds()))
}
