use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_difference_check_many, Tape, Tensor};

/// Minimum over all injections of the smaller side into the larger one.
fn brute_force(m: &CostMatrix) -> f64 {
    fn go(m: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, transposed: bool) {
        let (rows, cols) = if transposed { (m.cols, m.rows) } else { (m.rows, m.cols) };
        if row == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let x = if transposed { m.at(c, row) } else { m.at(row, c) };
                go(m, row + 1, used, acc + x, best, transposed);
                used[c] = false;
            }
        }
    }
    let transposed = m.rows > m.cols;
    let mut best = f64::INFINITY;
    let long = m.rows.max(m.cols);
    go(m, 0, &mut vec![false; long], 0.0, &mut best, transposed);
    best
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
}

fn check_assignment(m: &CostMatrix, a: &Assignment) {
    assert_eq!(a.pairs.len(), m.rows.min(m.cols));
    let mut p: Vec<_> = a.pairs.iter().map(|x| x.0).collect();
    let mut g: Vec<_> = a.pairs.iter().map(|x| x.1).collect();
    p.dedup();
    g.sort_unstable();
    g.dedup();
    assert_eq!(p.len(), a.pairs.len());
    assert_eq!(g.len(), a.pairs.len());
}

#[test]
fn hungarian_small_examples() {
    let one = CostMatrix::new(1, 1, vec![3.5]).unwrap();
    let a = hungarian(&one).unwrap();
    assert_eq!(a.pairs, vec![(0, 0)]);
    assert_eq!(a.cost(&one), 3.5);

    let two = CostMatrix::new(2, 2, vec![1., 2., 2., 1.]).unwrap();
    let a = hungarian(&two).unwrap();
    assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(a.cost(&two), 2.0);

    let empty = CostMatrix::new(5, 0, vec![]).unwrap();
    assert!(hungarian(&empty).unwrap().pairs.is_empty());
}

#[test]
fn hungarian_matches_brute_force_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let m = random_matrix(&mut rng, 5, 5);
        let a = hungarian(&m).unwrap();
        check_assignment(&m, &a);
        assert!((a.cost(&m) - brute_force(&m)).abs() < 1e-9);
    }
}

#[test]
fn hungarian_handles_rectangles_both_ways() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (r, c) in [(7, 4), (4, 7), (6, 1), (1, 6), (8, 3)] {
        for _ in 0..50 {
            let m = random_matrix(&mut rng, r, c);
            let a = hungarian(&m).unwrap();
            check_assignment(&m, &a);
            assert!((a.cost(&m) - brute_force(&m)).abs() < 1e-9);
        }
    }
}

#[test]
fn hungarian_ties_prefer_low_prediction_index() {
    let flat = CostMatrix::new(4, 2, vec![0.0; 8]).unwrap();
    assert_eq!(hungarian(&flat).unwrap().pairs, vec![(0, 0), (1, 1)]);
    let one = CostMatrix::new(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
    assert_eq!(hungarian(&one).unwrap().pairs, vec![(0, 0)]);
}

#[test]
fn hungarian_rejects_nan() {
    let m = CostMatrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
    assert!(matches!(hungarian(&m), Err(Error::Contract(_))));
}

#[test]
fn giou_examples() {
    let a = [0.3, 0.4, 0.2, 0.1];
    assert_eq!(giou(&a, &a).unwrap(), 1.0);

    // corner-touching unit quarters: IoU 0, union 0.5, hull 1
    let p = [0.25, 0.25, 0.5, 0.5];
    let q = [0.75, 0.75, 0.5, 0.5];
    assert!((giou(&p, &q).unwrap() + 0.5).abs() < 1e-15);

    // shifted by 0.1: inter 0.3*0.4, union 0.2, hull 0.5*0.4
    let p = [0.5, 0.5, 0.4, 0.4];
    let q = [0.6, 0.5, 0.4, 0.4];
    assert!((giou(&p, &q).unwrap() - 0.6).abs() < 1e-12);

    let far = giou(&[0.01, 0.01, 0.001, 0.001], &[0.99, 0.99, 0.001, 0.001]).unwrap();
    assert!(far < -0.99 && far >= -1.0);

    assert!(matches!(giou(&[0.5, 0.5, 0.0, 0.2], &a), Err(Error::Contract(_))));
    assert!(matches!(giou(&a, &[0.5, 0.5, 0.2, -0.1]), Err(Error::Contract(_))));
}

fn random_box(rng: &mut ChaCha8Rng) -> Box4 {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    ]
}

/// Corner-form GIoU written independently of the library.
fn giou_oracle(a: &Box4, b: &Box4) -> f64 {
    let (ax0, ax1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay0, ay1) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by0, by1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let ix = if ax1 < bx1 { ax1 } else { bx1 } - if ax0 > bx0 { ax0 } else { bx0 };
    let iy = if ay1 < by1 { ay1 } else { by1 } - if ay0 > by0 { ay0 } else { by0 };
    let inter = if ix > 0.0 && iy > 0.0 { ix * iy } else { 0.0 };
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hx = if ax1 > bx1 { ax1 } else { bx1 } - if ax0 < bx0 { ax0 } else { bx0 };
    let hy = if ay1 > by1 { ay1 } else { by1 } - if ay0 < by0 { ay0 } else { by0 };
    inter / union - (hx * hy - union) / (hx * hy)
}

#[test]
fn tape_giou_matches_scalar_giou() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<Box4> = (0..50).map(|_| random_box(&mut rng)).collect();
    let b: Vec<Box4> = (0..50).map(|_| random_box(&mut rng)).collect();
    let mut t = Tape::<f64>::new();
    let av = t.constant(Tensor::from_f64(&[50, 4], &a.concat()).unwrap());
    let bv = t.constant(Tensor::from_f64(&[50, 4], &b.concat()).unwrap());
    let g = giou_tape(&mut t, av, bv).unwrap();
    for (i, v) in t.value(g).data().iter().enumerate() {
        assert!((v - giou_oracle(&a[i], &b[i])).abs() < 1e-12);
        assert!((v - giou(&a[i], &b[i]).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn tape_giou_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        // overlapping pairs so the intersection is away from its kink
        let a = random_box(&mut rng);
        let mut b = a;
        b[0] += rng.random_range(-0.02..0.02);
        b[1] += rng.random_range(-0.02..0.02);
        b[2] *= rng.random_range(0.8..1.2);
        b[3] *= rng.random_range(0.8..1.2);
        let c = random_box(&mut rng);
        let d = [c[0] + 0.7, c[1] + 0.6, c[2], c[3]];
        let x = Tensor::from_f64(&[2, 4], &[a, c].concat()).unwrap();
        let y = Tensor::from_f64(&[2, 4], &[b, d].concat()).unwrap();
        let err = finite_difference_check_many(
            |t, v| {
                let g = giou_tape(t, v[0], v[1])?;
                Ok(t.sum(g))
            },
            &[x, y],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn perfect_prediction_costs_minus_class_weight() {
    let b = [0.4, 0.5, 0.2, 0.3];
    let target = Target::new(vec![1], vec![b]).unwrap();
    let logits = [-100.0, 100.0, -100.0];
    let m = build_cost_matrix(&logits, &b, 3, &target, CostWeights::default()).unwrap();
    assert_eq!(m.cost, vec![-2.0]);

    let zero = CostWeights {
        class: 0.0,
        l1: 0.0,
        giou: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let boxes: Vec<f64> = (0..3).flat_map(|_| random_box(&mut rng)).collect();
    let target = Target::new(vec![0, 2], vec![random_box(&mut rng), random_box(&mut rng)]).unwrap();
    let m = build_cost_matrix(&[0.0; 9], &boxes, 3, &target, zero).unwrap();
    assert!(m.cost.iter().all(|&c| c == 0.0));

    let empty = build_cost_matrix(&[0.0; 9], &boxes, 3, &Target::default(), CostWeights::default()).unwrap();
    assert_eq!((empty.rows, empty.cols), (3, 0));
    assert!(hungarian(&empty).unwrap().pairs.is_empty());
}

#[test]
fn cost_matrix_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let classes = 4;
    let logits: Vec<f64> = (0..3 * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
    let boxes: Vec<Box4> = (0..3).map(|_| random_box(&mut rng)).collect();
    let target = Target::new(vec![2, 0], vec![random_box(&mut rng), random_box(&mut rng)]).unwrap();
    let w = CostWeights {
        class: 1.5,
        l1: 4.0,
        giou: 3.0,
    };
    let m = build_cost_matrix(&logits, &boxes.concat(), classes, &target, w).unwrap();
    for i in 0..3 {
        let row = &logits[i * classes..(i + 1) * classes];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for j in 0..2 {
            let p = row[target.classes[j]].exp() / z;
            let l1: f64 = (0..4).map(|c| (boxes[i][c] - target.boxes[j][c]).abs()).sum();
            let want = -w.class * p + w.l1 * l1 + w.giou * (1.0 - giou_oracle(&boxes[i], &target.boxes[j]));
            assert!((m.at(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn negative_weights_are_rejected() {
    let w = CostWeights {
        class: -1.0,
        ..CostWeights::default()
    };
    assert!(build_cost_matrix(&[0.0; 2], &[0.5, 0.5, 0.1, 0.1], 2, &Target::default(), w).is_err());
}

/// Loss of a single unbatched layer, evaluated on a fresh tape.
fn loss_value(logits: &[f64], boxes: &[f64], classes: usize, target: &Target) -> f64 {
    let k = boxes.len() / 4;
    let mut t = Tape::<f64>::new();
    let p = Predictions {
        logits: t.constant(Tensor::from_f64(&[k, classes], logits).unwrap()),
        boxes: t.constant(Tensor::from_f64(&[k, 4], boxes).unwrap()),
    };
    let l = hungarian_loss(&mut t, &p, std::slice::from_ref(target), CostWeights::default()).unwrap();
    t.value(l).item()
}

fn random_layer(rng: &mut ChaCha8Rng, k: usize, classes: usize) -> (Vec<f64>, Vec<f64>) {
    let logits = (0..k * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let boxes = (0..k).flat_map(|_| random_box(rng)).collect();
    (logits, boxes)
}

fn random_target(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Target {
    Target::new(
        (0..n).map(|_| rng.random_range(0..classes - 1)).collect(),
        (0..n).map(|_| random_box(rng)).collect(),
    )
    .unwrap()
}

#[test]
fn empty_target_loss_is_no_object_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (logits, boxes) = random_layer(&mut rng, 5, 4);
    let got = loss_value(&logits, &boxes, 4, &Target::default());
    let want: f64 = logits
        .chunks(4)
        .map(|r| {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            -(r[3].exp() / z).ln()
        })
        .sum::<f64>()
        / 5.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn perfect_boxes_leave_only_class_terms() {
    let target = Target::new(vec![0, 2], vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.1]]).unwrap();
    // prediction 1 -> object 0, prediction 2 -> object 1, prediction 0 -> nothing
    let logits = [
        -9.0, -9.0, -9.0, 9.0, //
        9.0, -9.0, -9.0, -9.0, //
        -9.0, -9.0, 9.0, -9.0,
    ];
    let boxes = [[0.5, 0.5, 0.5, 0.5], target.boxes[0], target.boxes[1]].concat();
    let got = loss_value(&logits, &boxes, 4, &target);
    let ce = |row: &[f64], c: usize| {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -(row[c].exp() / z).ln()
    };
    let want = (0.1 * ce(&logits[0..4], 3) + ce(&logits[4..8], 0) + ce(&logits[8..12], 2)) / 2.1;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (logits, boxes) = random_layer(&mut rng, 6, 5);
        let target = random_target(&mut rng, 3, 5);
        let base = loss_value(&logits, &boxes, 5, &target);

        let perm = rand::seq::index::sample(&mut rng, 6, 6).into_vec();
        let pl: Vec<f64> = perm.iter().flat_map(|&i| logits[i * 5..(i + 1) * 5].to_vec()).collect();
        let pb: Vec<f64> = perm.iter().flat_map(|&i| boxes[i * 4..(i + 1) * 4].to_vec()).collect();
        assert!((loss_value(&pl, &pb, 5, &target) - base).abs() < 1e-10);

        let gt_perm = [2, 0, 1];
        let shuffled = Target::new(
            gt_perm.iter().map(|&j| target.classes[j]).collect(),
            gt_perm.iter().map(|&j| target.boxes[j]).collect(),
        )
        .unwrap();
        assert!((loss_value(&logits, &boxes, 5, &shuffled) - base).abs() < 1e-10);
    }
}

#[test]
fn batched_loss_is_mean_of_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (l0, b0) = random_layer(&mut rng, 4, 3);
    let (l1, b1) = random_layer(&mut rng, 4, 3);
    let t0 = random_target(&mut rng, 2, 3);
    let t1 = Target::default();
    let mut t = Tape::<f64>::new();
    let p = Predictions {
        logits: t.constant(Tensor::from_f64(&[2, 4, 3], &[l0.clone(), l1.clone()].concat()).unwrap()),
        boxes: t.constant(Tensor::from_f64(&[2, 4, 4], &[b0.clone(), b1.clone()].concat()).unwrap()),
    };
    let l = hungarian_loss(&mut t, &p, &[t0.clone(), t1.clone()], CostWeights::default()).unwrap();
    let want = (loss_value(&l0, &b0, 3, &t0) + loss_value(&l1, &b1, 3, &t1)) / 2.0;
    assert!((t.value(l).item() - want).abs() < 1e-12);
    assert!(hungarian_loss(&mut t, &p, &[t0], CostWeights::default()).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let (logits, _) = random_layer(&mut rng, 5, 4);
        let target = random_target(&mut rng, 3, 4);
        // raw box logits; predictions near their targets keep the GIoU terms smooth
        let mut raw = Vec::new();
        for i in 0..5 {
            let b = if i < 3 { target.boxes[(i + 1) % 3] } else { random_box(&mut rng) };
            for c in b {
                let v: f64 = c + rng.random_range(-0.01..0.01);
                raw.push((v / (1.0 - v)).ln());
            }
        }
        let err = finite_difference_check_many(
            |t, v| {
                let boxes = t.sigmoid(v[1]);
                let p = Predictions { logits: v[0], boxes };
                hungarian_loss(t, &p, std::slice::from_ref(&target), CostWeights::default())
            },
            &[
                Tensor::from_f64(&[5, 4], &logits).unwrap(),
                Tensor::from_f64(&[5, 4], &raw).unwrap(),
            ],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

fn layer(t: &mut Tape<f64>, logits: &[f64], boxes: &[f64], classes: usize) -> Predictions {
    let k = boxes.len() / 4;
    Predictions {
        logits: t.leaf(Tensor::from_f64(&[k, classes], logits).unwrap(), true),
        boxes: t.leaf(Tensor::from_f64(&[k, 4], boxes).unwrap(), true),
    }
}

#[test]
fn dual_branch_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = vec![random_target(&mut rng, 2, 4)];
    let (la, ba) = random_layer(&mut rng, 5, 4);
    let (lb, bb) = random_layer(&mut rng, 5, 4);
    let w = CostWeights::default();

    let mut t = Tape::<f64>::new();
    let m = layer(&mut t, &la, &ba, 4);
    let b = layer(&mut t, &lb, &bb, 4);
    let single = hungarian_loss(&mut t, &m, &target, w).unwrap();
    let single = t.value(single).item();
    let zero = dual_branch_loss(&mut t, &[m], &[b], &target, 0.0, w).unwrap();
    assert_eq!(t.value(zero).item(), single);
    let same = dual_branch_loss(&mut t, &[m], &[m], &target, 1.0, w).unwrap();
    assert_eq!(t.value(same).item(), 2.0 * single);
    let other = hungarian_loss(&mut t, &b, &target, w).unwrap();
    let other = t.value(other).item();
    let half = dual_branch_loss(&mut t, &[m], &[b], &target, 0.5, w).unwrap();
    assert!((t.value(half).item() - (single + 0.5 * other)).abs() < 1e-14);
    // auxiliary layers add up inside a branch
    let two = dual_branch_loss(&mut t, &[m, b], &[m], &target, 1.0, w).unwrap();
    assert!((t.value(two).item() - (2.0 * single + other)).abs() < 1e-14);

    assert!(dual_branch_loss(&mut t, &[m], &[b], &target, -1.0, w).is_err());
    assert!(dual_branch_loss(&mut t, &[], &[b], &target, 1.0, w).is_err());
}

#[test]
fn beta_zero_leaves_basic_branch_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = vec![random_target(&mut rng, 2, 4)];
    let (la, ba) = random_layer(&mut rng, 5, 4);
    let mut t = Tape::<f64>::new();
    let m = layer(&mut t, &la, &ba, 4);
    let b = layer(&mut t, &la, &ba, 4);
    let l = dual_branch_loss(&mut t, &[m], &[b], &target, 0.0, CostWeights::default()).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.wrt(b.logits).data().iter().all(|&x| x == 0.0));
    assert!(g.wrt(m.logits).data().iter().any(|&x| x != 0.0));
}

proptest! {
    #[test]
    fn giou_is_symmetric_and_bounded(
        a in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
        b in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
    ) {
        let a = [a.0, a.1, a.2, a.3];
        let b = [b.0, b.1, b.2, b.3];
        let ab = giou(&a, &b).unwrap();
        let ba = giou(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!(ab <= iou(&a, &b) + 1e-12);
    }

    #[test]
    fn hungarian_is_optimal(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, rows, cols);
        let a = hungarian(&m).unwrap();
        prop_assert_eq!(a.pairs.len(), rows.min(cols));
        prop_assert!((a.cost(&m) - brute_force(&m)).abs() < 1e-9);
    }
}

#[test]
fn cost_matrix_accepts_collapsed_predicted_boxes() {
    let target = Target::new(vec![1], vec![[0.5, 0.5, 0.2, 0.2]]).unwrap();
    let logits = [0.0, 1.0, 0.0, 0.5, 0.5, 0.5];
    let boxes = [0.5, 0.5, 0.0, 0.0, 0.2, 0.2, 0.1, 0.0];
    let m = build_cost_matrix(&logits, &boxes, 3, &target, CostWeights::default()).unwrap();
    // a point inside the target: IoU 0, hull = target, GIoU 0
    let probs = softmax_rows(&logits, 3);
    let want = -2.0 * probs[1] + 5.0 * 0.4 + 2.0 * 1.0;
    assert!((m.at(0, 0) - want).abs() < 1e-12);
    assert!(m.at(1, 0).is_finite());
    let nan = [0.5, 0.5, f64::NAN, 0.1, 0.2, 0.2, 0.1, 0.1];
    assert!(build_cost_matrix(&logits, &nan, 3, &target, CostWeights::default()).is_err());
}
