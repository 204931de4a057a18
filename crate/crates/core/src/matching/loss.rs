use super::{build_cost_matrix, hungarian, CostWeights, Target, NO_OBJECT_WEIGHT};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One decoder layer's output: class logits `[.., k, C+1]` (last column is
/// "no object") and sigmoid boxes `[.., k, 4]`, with an optional leading batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Predictions {
    pub logits: Var,
    pub boxes: Var,
}

/// Per-row generalized IoU of two `[n, 4]` `(cx, cy, w, h)` box tensors, `[n]`.
pub fn giou_tape<T: Real>(t: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let n = t.shape(a)[0];
    if t.shape(a) != [n, 4] || t.shape(b) != [n, 4] {
        return Err(Error::shape("giou", t.shape(a), t.shape(b)));
    }
    // (low corner, high corner, area) per row
    let corners = |t: &mut Tape<T>, x: Var| -> Result<(Var, Var, Var)> {
        let c = t.slice(x, 1, 0, 2)?;
        let wh = t.slice(x, 1, 2, 4)?;
        let half = t.scale(wh, T::from_f64(0.5));
        let lo = t.sub(c, half)?;
        let hi = t.add(c, half)?;
        let w = t.slice(x, 1, 2, 3)?;
        let h = t.slice(x, 1, 3, 4)?;
        Ok((lo, hi, t.mul(w, h)?))
    };
    let (alo, ahi, aarea) = corners(t, a)?;
    let (blo, bhi, barea) = corners(t, b)?;

    let ilo = t.maximum(alo, blo)?;
    let ihi = t.minimum(ahi, bhi)?;
    let iext = t.sub(ihi, ilo)?;
    let iext = t.relu(iext);
    let iw = t.slice(iext, 1, 0, 1)?;
    let ih = t.slice(iext, 1, 1, 2)?;
    let inter = t.mul(iw, ih)?;

    let areas = t.add(aarea, barea)?;
    let union = t.sub(areas, inter)?;

    let hlo = t.minimum(alo, blo)?;
    let hhi = t.maximum(ahi, bhi)?;
    let hext = t.sub(hhi, hlo)?;
    let hw = t.slice(hext, 1, 0, 1)?;
    let hh = t.slice(hext, 1, 1, 2)?;
    let hull = t.mul(hw, hh)?;

    // inter/union - (hull - union)/hull = inter/union + union/hull - 1
    let iou = t.div(inter, union)?;
    let fill = t.div(union, hull)?;
    let s = t.add(iou, fill)?;
    let g = t.add_scalar(s, T::from_f64(-1.0));
    t.reshape(g, &[n])
}

/// Set loss of one prediction layer against per-image targets, averaged over
/// the batch. The assignment is computed on detached values.
///
/// Per image: a weighted mean cross-entropy over all `k` predictions (matched
/// ones against their object's class with weight 1, the rest against
/// "no object" with weight 0.1), plus `λ_l1·L1 + λ_giou·(1 − GIoU)` summed
/// over matched pairs and divided by the number of objects.
pub fn hungarian_loss<T: Real>(
    t: &mut Tape<T>,
    preds: &Predictions,
    targets: &[Target],
    w: CostWeights,
) -> Result<Var> {
    w.validate()?;
    let ls = t.shape(preds.logits).to_vec();
    let bs = t.shape(preds.boxes).to_vec();
    let (batch, k, classes) = match ls.len() {
        2 => (1, ls[0], ls[1]),
        3 => (ls[0], ls[1], ls[2]),
        _ => return Err(Error::shape("hungarian_loss", &ls, &bs)),
    };
    if bs[..bs.len() - 1] != ls[..ls.len() - 1] || bs[bs.len() - 1] != 4 || classes < 2 {
        return Err(Error::shape("hungarian_loss", &ls, &bs));
    }
    if targets.len() != batch {
        return Err(Error::shape("hungarian_loss targets", &[batch], &[targets.len()]));
    }
    let no_object = classes - 1;
    let logits_v = t.value(preds.logits).to_f64_vec();
    let boxes_v = t.value(preds.boxes).to_f64_vec();

    let mut labels = vec![no_object; batch * k];
    let mut ce_weight = vec![0.0; batch * k];
    let mut matched_rows = Vec::new();
    let mut matched_boxes = Vec::new();
    let mut box_weight = Vec::new();
    for (b, target) in targets.iter().enumerate() {
        let lo = b * k;
        let cost = build_cost_matrix(
            &logits_v[lo * classes..(lo + k) * classes],
            &boxes_v[lo * 4..(lo + k) * 4],
            classes,
            target,
            w,
        )?;
        let assignment = hungarian(&cost)?;
        let mut row_w = vec![NO_OBJECT_WEIGHT; k];
        for &(p, j) in &assignment.pairs {
            labels[lo + p] = target.classes[j];
            row_w[p] = 1.0;
            matched_rows.push(lo + p);
            matched_boxes.extend_from_slice(&target.boxes[j]);
            box_weight.push(1.0 / (target.len() as f64 * batch as f64));
        }
        let total: f64 = row_w.iter().sum();
        for (p, rw) in row_w.iter().enumerate() {
            ce_weight[lo + p] = rw / (total * batch as f64);
        }
    }

    let flat = t.reshape(preds.logits, &[batch * k, classes])?;
    let logp = t.log_softmax(flat)?;
    let picked = t.pick(logp, &labels)?;
    let wv = t.constant(Tensor::from_f64(&[batch * k], &ce_weight.iter().map(|x| -x).collect::<Vec<_>>())?);
    let weighted = t.mul(picked, wv)?;
    let mut loss = t.sum(weighted);

    if !matched_rows.is_empty() {
        let m = matched_rows.len();
        let flat = t.reshape(preds.boxes, &[batch * k, 4])?;
        let pb = t.gather_rows(flat, &matched_rows)?;
        let tb = t.constant(Tensor::from_f64(&[m, 4], &matched_boxes)?);
        let diff = t.sub(pb, tb)?;
        let diff = t.abs(diff);
        let l1 = t.sum_axis(diff, 1)?;
        let l1 = t.scale(l1, T::from_f64(w.l1));
        let giou = giou_tape(t, pb, tb)?;
        // λg (1 - giou)
        let gterm = t.scale(giou, T::from_f64(-w.giou));
        let gterm = t.add_scalar(gterm, T::from_f64(w.giou));
        let per_pair = t.add(l1, gterm)?;
        let bw = t.constant(Tensor::from_f64(&[m], &box_weight)?);
        let weighted = t.mul(per_pair, bw)?;
        let box_loss = t.sum(weighted);
        loss = t.add(loss, box_loss)?;
    }
    Ok(loss)
}

/// `Σ_layers L(Y_M) + β · Σ_layers L(Y_B)`; each layer and branch is matched
/// independently. With `β = 0` the basic branch is not evaluated at all.
pub fn dual_branch_loss<T: Real>(
    t: &mut Tape<T>,
    modulated: &[Predictions],
    basic: &[Predictions],
    targets: &[Target],
    beta: f64,
    w: CostWeights,
) -> Result<Var> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::contract(format!("beta must be nonnegative, got {beta}")));
    }
    let main = branch_loss(t, modulated, targets, w)?;
    if beta == 0.0 {
        return Ok(main);
    }
    let aux = branch_loss(t, basic, targets, w)?;
    let aux = t.scale(aux, T::from_f64(beta));
    t.add(main, aux)
}

fn branch_loss<T: Real>(t: &mut Tape<T>, layers: &[Predictions], targets: &[Target], w: CostWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for p in layers {
        let l = hungarian_loss(t, p, targets, w)?;
        total = Some(match total {
            None => l,
            Some(acc) => t.add(acc, l)?,
        });
    }
    total.ok_or_else(|| Error::contract("branch has no decoder layers"))
}
