use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink or pole at 0.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar reduction with fixed random weights so that no gradient is trivially uniform.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

const OP_TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn check_unary(name: &str, shape: &[usize], away: bool, op: impl Fn(&mut Tape<f64>, Var) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..10 {
        let x = if away {
            rand_away_from_zero(&mut rng, shape)
        } else {
            rand_tensor(&mut rng, shape)
        };
        let err = finite_difference_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, trial)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < OP_TOL, "{name}: trial {trial} error {err}");
    }
}

fn check_many(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104729);
    for trial in 0..10 {
        let inputs = make(&mut rng);
        let err = finite_difference_check_many(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, trial)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < OP_TOL, "{name}: trial {trial} error {err}");
    }
}

#[test]
fn matmul_identity_and_hand_expansion() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1., 2., 3., 4.]);

    let a = t.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let b = t.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_grad_of_sum_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let mut t = Tape::new();
    let av = t.leaf(a.clone(), true);
    let bv = t.constant(b.clone());
    let c = t.matmul(av, bv).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap().wrt(av);
    for i in 0..4 {
        for k in 0..5 {
            let expected: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((g.data()[i * 5 + k] - expected).abs() < 1e-12);
        }
    }
    // central differences at eps 1e-6
    let err = finite_difference_check(
        |t, v| {
            let bv = t.constant(b.clone());
            let c = t.matmul(v, bv)?;
            Ok(t.sum(c))
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[0., 0.]).unwrap());
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::from_f64(&[2], &[1000., 0.]).unwrap());
    let y = t.softmax(x).unwrap();
    let v = t.value(y).data();
    assert_eq!(v[0], 1.0);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);

    // exp-normalize evaluated with 40-digit arithmetic
    let expected = [
        0.090_030_573_170_380_457_998,
        0.244_728_471_054_797_652_473,
        0.665_240_955_774_821_889_529,
    ];
    let x = t.constant(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let y = t.softmax(x).unwrap();
    for (a, b) in t.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_distributions_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let scale = if rng.random::<bool>() { 1e3 } else { 1.0 };
        let data: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[k], data).unwrap());
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        assert!(v.iter().all(|&p| p >= 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn backward_simple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 2, 4]);

    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let s = t.sum(xv);
    let g = t.backward(s).unwrap().wrt(xv);
    assert_eq!(g, Tensor::ones(&[3, 2, 4]));

    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let sq = t.mul(xv, xv).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    let g = t.backward(half).unwrap().wrt(xv);
    assert!(g.max_abs_diff(&x) < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones(&[2, 2]), true);
    let y = t.leaf(Tensor::ones(&[3]), true);
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(y), Tensor::zeros(&[3]));
}

#[test]
fn fan_out_accumulates() {
    let x = Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
    let once = {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), true);
        let e = t.exp(v);
        let s = t.sum(e);
        t.backward(s).unwrap().wrt(v)
    };
    let twice = {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), true);
        let e = t.exp(v);
        let a = t.add(e, e).unwrap();
        let s = t.sum(a);
        t.backward(s).unwrap().wrt(v)
    };
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = vec![
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    let err = finite_difference_check_many(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.relu(h);
            let o = t.matmul(h, v[3])?;
            let o = t.add(o, v[4])?;
            let sq = t.mul(o, o)?;
            Ok(t.mean(sq))
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_examples() {
    let x = Tensor::from_f64(&[4, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]).unwrap();
    let err = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");

    let x = Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap();
    let first = |t: &mut Tape<f64>, v: Var| {
        let s = t.softmax(v)?;
        let s = t.reshape(s, &[1, 3])?;
        let p = t.pick(s, &[0])?;
        Ok(t.sum(p))
    };
    let e5 = finite_difference_check(first, &x, 1e-5).unwrap();
    let e6 = finite_difference_check(first, &x, 1e-6).unwrap();
    assert!(e5 < 1e-7 && e6 < 1e-7, "{e5} {e6}");

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let err = finite_difference_check(
        |t, v| {
            let g = t.constant(Tensor::from_f64(&[5], &[1.0, 0.5, -0.3, 2.0, 0.8]).unwrap());
            let b = t.constant(Tensor::from_f64(&[5], &[0.1, 0.0, -0.2, 0.3, 0.0]).unwrap());
            let y = t.layer_norm(v, g, b, 1e-5)?;
            weighted_sum(t, y, 1)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_ops_pass_gradcheck() {
    check_unary("relu", &[3, 4], true, |t, v| Ok(t.relu(v)));
    check_unary("sigmoid", &[3, 4], false, |t, v| Ok(t.sigmoid(v)));
    check_unary("exp", &[3, 4], false, |t, v| Ok(t.exp(v)));
    check_unary("abs", &[3, 4], true, |t, v| Ok(t.abs(v)));
    check_unary("log", &[3, 4], true, |t, v| {
        let a = t.abs(v);
        Ok(t.log(a))
    });
    check_unary("scale", &[5], false, |t, v| Ok(t.scale(v, -2.5)));
    check_unary("add_scalar", &[5], false, |t, v| Ok(t.add_scalar(v, 0.7)));
    check_unary("mean", &[2, 5], false, |t, v| Ok(t.mean(v)));
    check_unary("sum", &[2, 5], false, |t, v| Ok(t.sum(v)));
}

#[test]
fn binary_ops_pass_gradcheck() {
    let pair = |shape_a: Vec<usize>, shape_b: Vec<usize>| {
        move |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &shape_a), rand_tensor(rng, &shape_b)]
    };
    check_many("add", pair(vec![3, 4], vec![3, 4]), |t, v| t.add(v[0], v[1]));
    check_many("add_bcast", pair(vec![2, 3, 4], vec![4]), |t, v| t.add(v[0], v[1]));
    check_many("sub", pair(vec![2, 3], vec![3]), |t, v| t.sub(v[0], v[1]));
    check_many("mul", pair(vec![2, 3, 4], vec![3, 4]), |t, v| t.mul(v[0], v[1]));
    check_many(
        "div",
        |rng| vec![rand_tensor(rng, &[6]), rand_away_from_zero(rng, &[6])],
        |t, v| t.div(v[0], v[1]),
    );
    let separated = |rng: &mut ChaCha8Rng| {
        let a = rand_tensor(rng, &[8]);
        let b = a.map(|x| x + if x > 0.0 { -0.3 } else { 0.3 });
        vec![a, b]
    };
    check_many("minimum", separated, |t, v| t.minimum(v[0], v[1]));
    check_many("maximum", separated, |t, v| t.maximum(v[0], v[1]));
}

#[test]
fn structural_ops_pass_gradcheck() {
    check_unary("sum_axis0", &[3, 4, 2], false, |t, v| t.sum_axis(v, 0));
    check_unary("sum_axis1", &[3, 4, 2], false, |t, v| t.sum_axis(v, 1));
    check_unary("mean_axis", &[3, 4, 2], false, |t, v| t.mean_axis(v, 2));
    check_unary("transpose", &[2, 3, 4], false, |t, v| t.transpose(v));
    check_unary("permute", &[2, 3, 4], false, |t, v| t.permute(v, &[2, 0, 1]));
    check_unary("reshape", &[2, 6], false, |t, v| t.reshape(v, &[3, 4]));
    check_unary("slice", &[4, 5], false, |t, v| t.slice(v, 1, 1, 4));
    check_unary("broadcast", &[3, 2], false, |t, v| Ok(t.broadcast(v, 4)));
    check_unary("softmax", &[3, 5], false, |t, v| t.softmax(v));
    check_unary("log_softmax", &[3, 5], false, |t, v| t.log_softmax(v));
    check_unary("gather", &[5, 3], false, |t, v| t.gather_rows(v, &[4, 0, 4, 2]));
    check_unary("pick", &[4, 3], false, |t, v| t.pick(v, &[2, 0, 1, 2]));
    check_unary("dropout_eval", &[4, 3], false, |t, v| Ok(t.dropout(v, 0.5)));
    check_many(
        "concat",
        |rng| vec![rand_tensor(rng, &[2, 3, 2]), rand_tensor(rng, &[2, 1, 2])],
        |t, v| t.concat(v, 1),
    );
    check_many(
        "layer_norm",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 6]),
                rand_tensor(rng, &[6]),
                rand_tensor(rng, &[6]),
            ]
        },
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check_many(
        "gather_table",
        |rng| vec![rand_tensor(rng, &[4, 3])],
        |t, v| t.gather_rows(v[0], &[1, 1, 3]),
    );
}

#[test]
fn product_ops_pass_gradcheck() {
    check_many(
        "matmul",
        |rng| vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[4, 5])],
        |t, v| t.matmul(v[0], v[1]),
    );
    check_many(
        "matmul_t",
        |rng| vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[5, 4])],
        |t, v| t.matmul_t(v[0], v[1]),
    );
    check_many(
        "bmm",
        |rng| vec![rand_tensor(rng, &[3, 2, 4]), rand_tensor(rng, &[3, 4, 5])],
        |t, v| t.batch_matmul(v[0], v[1], false),
    );
    check_many(
        "bmm_t",
        |rng| vec![rand_tensor(rng, &[3, 2, 4]), rand_tensor(rng, &[3, 5, 4])],
        |t, v| t.batch_matmul(v[0], v[1], true),
    );
    check_many(
        "conv2d",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 6, 5]),
                rand_tensor(rng, &[4, 3, 3, 3]),
                rand_tensor(rng, &[4]),
            ]
        },
        |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
    );
    check_many(
        "convex_combine",
        |rng| vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[12, 5])],
        |t, v| t.convex_combine(v[0], v[1]),
    );
    check_many(
        "convex_combine_unbatched",
        |rng| vec![rand_tensor(rng, &[3, 2]), rand_tensor(rng, &[6, 4])],
        |t, v| t.convex_combine(v[0], v[1]),
    );
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3, 2]);
    let (xd, wd) = (x.data(), w.data());
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..2 {
                let mut acc = b.data()[o];
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                acc += wd[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * xd[(c * 5 + iy as usize) * 4 + ix as usize];
                            }
                        }
                    }
                }
                let got = t.value(y).data()[(o * 3 + oy) * 2 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_training() {
    let x = Tensor::<f64>::ones(&[1000]);
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    assert_eq!(t.dropout(v, 0.3), v);

    let mut t = Tape::training(1);
    let v = t.leaf(x, true);
    let d = t.dropout(v, 0.5);
    let vals = t.value(d).data();
    assert!(vals.iter().all(|&a| a == 0.0 || a == 2.0));
    let kept = vals.iter().filter(|&&a| a > 0.0).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = rand_tensor(&mut rng, &[6, 7]);
        let b = rand_tensor(&mut rng, &[7, 5]);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let c = t.matmul(av, bv).unwrap();
        let s = t.softmax(c).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn params_bind_once_per_tape() {
    let mut t = Tape::<f64>::new();
    let w = Tensor::ones(&[2]);
    let a = t.param(ParamId(3), &w);
    let b = t.param(ParamId(3), &w);
    assert_eq!(a, b);
    let s = t.add(a, b).unwrap();
    let s = t.sum(s);
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(ParamId(3)).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(t.params_reaching(s).into_iter().collect::<Vec<_>>(), vec![ParamId(3)]);
}
