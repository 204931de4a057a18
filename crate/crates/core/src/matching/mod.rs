//! Bipartite matching between predictions and ground truth, the detection
//! cost it runs on, and the set losses built from the resulting assignment.

mod loss;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};

pub use loss::{dual_branch_loss, giou_tape, hungarian_loss, Predictions};

/// `(cx, cy, w, h)`, normalized to the unit square.
pub type Box4 = [f64; 4];

/// Ground truth for one image: parallel class ids and boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Target {
    pub classes: Vec<usize>,
    pub boxes: Vec<Box4>,
}

impl Target {
    pub fn new(classes: Vec<usize>, boxes: Vec<Box4>) -> Result<Self> {
        if classes.len() != boxes.len() {
            return Err(Error::shape("target", &[classes.len()], &[boxes.len()]));
        }
        Ok(Target { classes, boxes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Relative weights of the class, L1 and GIoU terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.class, self.l1, self.giou].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::contract(format!("cost weights must be nonnegative, got {self:?}")))
        }
    }
}

/// Down-weighting of the no-object class in the classification loss.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

/// Dense `rows x cols` cost, row-major. Rows are predictions, columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != rows * cols {
            return Err(Error::shape("cost matrix", &[rows, cols], &[cost.len()]));
        }
        Ok(CostMatrix { rows, cols, cost })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.cols + j]
    }
}

/// Matched `(prediction, ground truth)` pairs, sorted by prediction index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn cost(&self, m: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| m.at(i, j)).sum()
    }

    /// `gt -> prediction` lookup.
    pub fn by_target(&self, targets: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; targets];
        for &(p, t) in &self.pairs {
            out[t] = Some(p);
        }
        out
    }
}

/// Minimum-cost assignment via shortest augmenting paths with potentials,
/// `O(min(k,g)^2 * max(k,g))`.
///
/// Every ground truth is matched when `g <= k`; otherwise every prediction is.
/// Ties go to the lowest prediction index.
pub fn hungarian(m: &CostMatrix) -> Result<Assignment> {
    if let Some(x) = m.cost.iter().find(|x| !x.is_finite()) {
        return Err(Error::contract(format!("cost matrix entry {x} is not finite")));
    }
    if m.rows == 0 || m.cols == 0 {
        return Ok(Assignment::default());
    }
    // Augment along the shorter side. Normally that is the ground truths, so
    // the long side scanned with a strict `<` is the predictions and ties go
    // to the lowest prediction index.
    let preds_short = m.rows < m.cols;
    let (short, long) = if preds_short { (m.rows, m.cols) } else { (m.cols, m.rows) };
    let a = |s: usize, l: usize| if preds_short { m.at(s, l) } else { m.at(l, s) };

    let mut u = vec![0.0; short + 1];
    let mut v = vec![0.0; long + 1];
    let mut owner = vec![0usize; long + 1]; // owner[l] = 1-based short index
    let mut way = vec![0usize; long + 1];
    for s in 1..=short {
        owner[0] = s;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; long + 1];
        let mut used = vec![false; long + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=long {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=long {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=long)
        .filter(|&l| owner[l] != 0)
        .map(|l| {
            let (s, l) = (owner[l] - 1, l - 1);
            if preds_short {
                (s, l)
            } else {
                (l, s)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

fn check_box(b: &Box4) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) {
        return Err(Error::contract(format!("box {b:?} has nonpositive extent")));
    }
    Ok(())
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, in `[-1, 1]`.
pub fn giou(a: &Box4, b: &Box4) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(giou_unchecked(a, b))
}

/// GIoU without the extent checks; well defined as long as one box has a
/// positive area.
fn giou_unchecked(a: &Box4, b: &Box4) -> f64 {
    let corners = |b: &Box4| [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]];
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    inter / union - (hull - union) / hull
}

/// Plain IoU of two `(cx, cy, w, h)` boxes.
pub fn iou(a: &Box4, b: &Box4) -> f64 {
    let corners = |b: &Box4| [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]];
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Row-wise softmax of `[k, c]` logits.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// `cost[i][j] = -λc p_i(c_j) + λ1 |b_i - b_j|_1 + λg (1 - giou(b_i, b_j))`.
///
/// `logits` is `[k, classes]` (including the no-object column), `boxes` `[k, 4]`.
pub fn build_cost_matrix(logits: &[f64], boxes: &[f64], classes: usize, target: &Target, w: CostWeights) -> Result<CostMatrix> {
    w.validate()?;
    if classes == 0 || logits.len() % classes != 0 || boxes.len() * classes != logits.len() * 4 {
        return Err(Error::shape("build_cost_matrix", &[logits.len(), classes], &[boxes.len()]));
    }
    let k = logits.len() / classes;
    let g = target.len();
    if let Some(&c) = target.classes.iter().find(|&&c| c >= classes) {
        return Err(Error::contract(format!("target class {c} outside {classes} logits")));
    }
    for t in &target.boxes {
        check_box(t)?;
    }
    // predicted boxes may collapse to zero extent (saturated sigmoid); the
    // target's positive area keeps GIoU defined
    if let Some(b) = boxes.chunks(4).find(|b| !(b.iter().all(|x| x.is_finite()) && b[2] >= 0.0 && b[3] >= 0.0)) {
        return Err(Error::contract(format!("predicted box {b:?} is not a finite box")));
    }
    let probs = softmax_rows(logits, classes);
    let mut cost = Vec::with_capacity(k * g);
    for i in 0..k {
        let b: Box4 = boxes[i * 4..i * 4 + 4].try_into().expect("four coordinates");
        for (j, t) in target.boxes.iter().enumerate() {
            let l1: f64 = b.iter().zip(t).map(|(x, y)| (x - y).abs()).sum();
            let giou = giou_unchecked(&b, t);
            cost.push(-w.class * probs[i * classes + target.classes[j]] + w.l1 * l1 + w.giou * (1.0 - giou));
        }
    }
    CostMatrix::new(k, g, cost)
}
