use std::cmp::Ordering;
use std::fmt::Write as _;

use super::Scene;
use crate::matching::{iou, Box4};

/// A scored detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box4,
    pub class: usize,
    pub score: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// AP per IoU threshold (averaged over classes that have ground truth),
/// the per-class breakdown, and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// `per_threshold[t]`: mean over evaluated classes.
    pub per_threshold: Vec<f64>,
    /// `per_class[c][t]`; `None` for classes without ground truth.
    pub per_class: Vec<Option<Vec<f64>>>,
    pub map: f64,
}

impl ApReport {
    /// Flat `key = value` block.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "map = {:.6}", self.map).unwrap();
        for (t, ap) in self.thresholds.iter().zip(&self.per_threshold) {
            writeln!(s, "ap{:02} = {ap:.6}", (t * 100.0).round() as u32).unwrap();
        }
        for (c, row) in self.per_class.iter().enumerate() {
            if let Some(row) = row {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                writeln!(s, "class{c}.map = {mean:.6}").unwrap();
            }
        }
        s
    }

    /// One row per threshold: `threshold,ap,class_0,...` (empty cell for
    /// classes without ground truth).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,ap");
        for c in 0..self.per_class.len() {
            write!(s, ",class_{c}").unwrap();
        }
        s.push('\n');
        for (i, t) in self.thresholds.iter().enumerate() {
            write!(s, "{t:.6},{:.6}", self.per_threshold[i]).unwrap();
            for row in &self.per_class {
                match row {
                    Some(r) => write!(s, ",{:.6}", r[i]).unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Area under the all-points interpolated precision/recall curve, given
/// TP/FP flags in descending score order.
fn interpolated_ap(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// COCO-style AP: for each class and threshold, detections across all scenes
/// are taken in descending score order and greedily matched to the
/// highest-IoU unmatched ground truth of that class in the same scene.
pub fn average_precision(
    predictions: &[Vec<Detection>],
    scenes: &[Scene],
    num_classes: usize,
    thresholds: &[f64],
) -> ApReport {
    assert_eq!(predictions.len(), scenes.len(), "one prediction list per scene");
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let gts: Vec<Vec<Box4>> = scenes
            .iter()
            .map(|s| s.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect())
            .collect();
        let positives: usize = gts.iter().map(Vec::len).sum();
        if positives == 0 {
            per_class.push(None);
            continue;
        }
        // (scene, detection) in descending score; stable on ties
        let mut dets: Vec<(usize, &Detection)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (i, d)))
            .collect();
        dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));

        let row = thresholds
            .iter()
            .map(|&thr| {
                let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
                let hits: Vec<bool> = dets
                    .iter()
                    .map(|&(scene, d)| {
                        let mut best = None;
                        let mut best_iou = thr;
                        for (j, g) in gts[scene].iter().enumerate() {
                            if taken[scene][j] {
                                continue;
                            }
                            let v = iou(&d.bbox, g);
                            if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                                best_iou = v;
                                best = Some(j);
                            }
                        }
                        if let Some(j) = best {
                            taken[scene][j] = true;
                        }
                        best.is_some()
                    })
                    .collect();
                interpolated_ap(&hits, positives)
            })
            .collect();
        per_class.push(Some(row));
    }

    let evaluated: Vec<&Vec<f64>> = per_class.iter().flatten().collect();
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            if evaluated.is_empty() {
                0.0
            } else {
                evaluated.iter().map(|r| r[t]).sum::<f64>() / evaluated.len() as f64
            }
        })
        .collect();
    let map = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    ApReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        per_class,
        map,
    }
}
