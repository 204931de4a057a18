use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::finite_difference_check_params;
use crate::tensor::Tape;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bank_with(values: Tensor<f64>, ratio: usize) -> (ParamStore<f64>, QueryBank) {
    let mut store = ParamStore::new();
    let id = store.register("basic", values);
    let bank = QueryBank::from_param(&store, id, ratio).unwrap();
    (store, bank)
}

/// `q_i = sum_j w[i][j] * basic[i*r + j]` with scalar loops.
fn triple_loop(basic: &Tensor<f64>, ratio: usize, w: &[f64]) -> Vec<f64> {
    let f = basic.shape()[1];
    let m = basic.shape()[0] / ratio;
    let mut out = vec![0.0; m * f];
    for i in 0..m {
        for j in 0..ratio {
            for c in 0..f {
                out[i * f + c] += w[i * ratio + j] * basic.data()[(i * ratio + j) * f + c];
            }
        }
    }
    out
}

fn modulate_values(basic: &Tensor<f64>, coeffs: &Tensor<f64>) -> Tensor<f64> {
    let mut store = ParamStore::new();
    let id = store.register("basic", basic.clone());
    let mut g = Graph::eval(&store);
    let b = g.param(id);
    let c = g.constant(coeffs.clone());
    let q = modulate(&mut g, b, c).unwrap();
    g.value(q).clone()
}

#[test]
fn sequential_grouping() {
    let values = Tensor::new(&[8, 2], (0..16).map(f64::from).collect()).unwrap();
    let (_, bank) = bank_with(values.clone(), 4);
    let groups = group_queries(&bank, &values);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].data(), &values.data()[0..8]);
    assert_eq!(groups[1].data(), &values.data()[8..16]);

    let (_, singles) = bank_with(values.clone(), 1);
    assert_eq!(group_queries(&singles, &values).len(), 8);
    let (_, one) = bank_with(values.clone(), 8);
    let g = group_queries(&one, &values);
    assert_eq!(g.len(), 1);
    assert_eq!(g[0], values);

    let rebuilt: Vec<f64> = group_queries(&bank, &values)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    assert_eq!(rebuilt, values.data());
}

#[test]
fn indivisible_bank_is_a_configuration_error() {
    let mut store = ParamStore::<f64>::new();
    let id = store.register("basic", Tensor::zeros(&[10, 4]));
    assert!(matches!(QueryBank::from_param(&store, id, 4), Err(Error::Config(_))));
}

#[test]
fn averaged_combination_is_the_group_mean() {
    let (store, bank) = bank_with(Tensor::from_f64(&[2, 2], &[1., 1., 3., 3.]).unwrap(), 2);
    let q = combine_fixed(&store, &bank, FixedMode::Averaged, 0).unwrap();
    assert_eq!(q.data(), &[2.0, 2.0]);
}

#[test]
fn convex_combination_stays_within_group_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (store, bank) = bank_with(rand_tensor(&mut rng, &[12, 5]), 4);
    let values = store.get(bank.basic).clone();
    for seed in 0..20 {
        let q = combine_fixed(&store, &bank, FixedMode::Convex, seed).unwrap();
        for (i, group) in group_queries(&bank, &values).iter().enumerate() {
            for c in 0..5 {
                let col: Vec<f64> = (0..4).map(|j| group.data()[j * 5 + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = q.data()[i * 5 + c];
                assert!(lo - 1e-15 <= v && v <= hi + 1e-15);
            }
        }
    }
}

#[test]
fn nonconvex_forced_coefficients() {
    let bank = Tensor::<f64>::from_f64(&[2, 2], &[0., 0., 2., 2.]).unwrap();
    let q = combine_with(&bank, 2, &[1.5, -0.5]).unwrap();
    assert_eq!(q.data(), &[-1.0, -1.0]);
}

#[test]
fn drawn_coefficients_respect_their_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let convex = draw_coefficients(FixedMode::Convex, 50, 4, &mut rng).unwrap();
    CombinationCoefficients::new(50, 4, convex).unwrap();
    let nonconvex = draw_coefficients(FixedMode::Nonconvex, 200, 4, &mut rng).unwrap();
    let mut saw_negative = false;
    for row in nonconvex.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        saw_negative |= row.iter().any(|&w| w < 0.0);
    }
    assert!(saw_negative);
    assert!(draw_coefficients(FixedMode::RandomSample, 2, 2, &mut rng).is_err());
}

#[test]
fn mode_parsing() {
    for m in FixedMode::ALL {
        assert_eq!(m.name().parse::<FixedMode>().unwrap(), m);
    }
    assert!(matches!("spiral".parse::<FixedMode>(), Err(Error::Contract(_))));
}

#[test]
fn random_sample_returns_distinct_bank_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, bank) = bank_with(rand_tensor(&mut rng, &[64, 6]), 4);
    let values = store.get(bank.basic);
    for seed in 0..10 {
        let q = combine_fixed(&store, &bank, FixedMode::RandomSample, seed).unwrap();
        assert_eq!(q.shape(), &[16, 6]);
        let mut rows = Vec::new();
        for i in 0..16 {
            let row = q.row(i);
            let src = (0..64).find(|&k| values.row(k) == row).expect("row comes from the bank");
            rows.push(src);
        }
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), 16);
    }
}

#[test]
fn fixed_draws_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, bank) = bank_with(rand_tensor(&mut rng, &[16, 3]), 4);
    for mode in FixedMode::ALL {
        let a = combine_fixed(&store, &bank, mode, 42).unwrap();
        let b = combine_fixed(&store, &bank, mode, 42).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn zero_final_layer_gives_uniform_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let net = CoeffNet::new(&mut store, "coeff", 8, 32, 3, 4, true, &mut rng);
    let mut g = Graph::eval(&store);
    let f = g.constant(rand_tensor(&mut rng, &[2, 8, 3, 3]));
    let w = net.forward(&mut g, f).unwrap();
    assert_eq!(g.shape(w), &[2, 3, 4]);
    assert!(g.value(w).data().iter().all(|&x| x == 0.25));
}

#[test]
fn coefficients_are_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let net = CoeffNet::new(&mut store, "coeff", 8, 32, 5, 3, false, &mut rng);
    for _ in 0..20 {
        let mut g = Graph::eval(&store);
        let x = rand_tensor(&mut rng, &[8, 2, 4]).map(|v| v * 10.0);
        let f = g.constant(x);
        let w = net.forward(&mut g, f).unwrap();
        assert_eq!(g.shape(w), &[5, 3]);
        let c = CombinationCoefficients::from_batch(g.value(w)).unwrap();
        assert_eq!(c.len(), 1);
        c[0].validate(1e-12).unwrap();
    }
}

#[test]
fn pooling_makes_coefficients_spatially_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let net = CoeffNet::new(&mut store, "coeff", 4, 16, 2, 2, false, &mut rng);
    let x = rand_tensor(&mut rng, &[4, 2, 3]);
    // reverse the six spatial cells of every channel
    let mut shuffled = Vec::new();
    for c in 0..4 {
        let cells = &x.data()[c * 6..(c + 1) * 6];
        shuffled.extend(cells.iter().rev());
    }
    let y = Tensor::new(&[4, 2, 3], shuffled).unwrap();
    let run = |t: &Tensor<f64>| {
        let mut g = Graph::eval(&store);
        let f = g.constant(t.clone());
        let w = net.forward(&mut g, f).unwrap();
        g.value(w).clone()
    };
    assert!(run(&x).max_abs_diff(&run(&y)) < 1e-15);
}

#[test]
fn coeff_net_rejects_wrong_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let net = CoeffNet::new(&mut store, "coeff", 4, 16, 2, 2, false, &mut rng);
    let mut g = Graph::eval(&store);
    let f = g.constant(Tensor::zeros(&[5, 2, 2]));
    assert!(matches!(net.forward(&mut g, f), Err(Error::Shape { .. })));
}

#[test]
fn one_hot_coefficients_select_basic_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let basic = rand_tensor(&mut rng, &[12, 5]);
    for j in 0..4 {
        let mut w = vec![0.0; 12];
        for i in 0..3 {
            w[i * 4 + j] = 1.0;
        }
        let q = modulate_values(&basic, &Tensor::new(&[3, 4], w).unwrap());
        for i in 0..3 {
            assert_eq!(q.row(i), basic.row(i * 4 + j));
        }
    }
}

#[test]
fn uniform_coefficients_reproduce_group_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let basic = rand_tensor(&mut rng, &[16, 6]);
    let q = modulate_values(&basic, &CombinationCoefficients::uniform(4, 4).to_tensor());
    let (store, bank) = bank_with(basic.clone(), 4);
    assert_eq!(q, combine_fixed(&store, &bank, FixedMode::Averaged, 0).unwrap());
    for (i, group) in group_queries(&bank, &basic).iter().enumerate() {
        for c in 0..6 {
            let mean = (0..4).map(|j| group.data()[j * 6 + c]).sum::<f64>() / 4.0;
            assert_eq!(q.data()[i * 6 + c], mean);
        }
    }
}

#[test]
fn modulation_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let basic = rand_tensor(&mut rng, &[6, 4]);
    let w = draw_coefficients(FixedMode::Convex, 2, 3, &mut rng).unwrap();
    let q = modulate_values(&basic, &Tensor::new(&[2, 3], w.clone()).unwrap());
    let oracle = triple_loop(&basic, 3, &w);
    for (a, b) in q.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn coeff_net_and_modulation_jointly_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let bank = QueryBank::new(&mut store, "basic", 3, 2, 4, &mut rng).unwrap();
    let net = CoeffNet::new(&mut store, "coeff", 5, 6, 3, 2, false, &mut rng);
    // widen the bank so modulation differences are well above eps
    let wide = store.get(bank.basic).map(|x| x * 50.0);
    store.set(bank.basic, wide).unwrap();
    let params: Vec<_> = store.ids().collect();
    let features = rand_tensor(&mut rng, &[2, 5, 2, 2]);
    let mix = rand_tensor(&mut rng, &[2, 3, 4]);
    let err = finite_difference_check_params(
        &store,
        &params,
        &[features],
        |g, v| {
            let w = net.forward(g, v[0])?;
            let basic = g.param(bank.basic);
            let q = modulate(g, basic, w)?;
            let m = g.constant(mix.clone());
            let p = g.mul(q, m)?;
            let t = g.sigmoid(p);
            Ok(g.sum(t))
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn direct_queries_shape_bias_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let net = DirectMlpQueries::new(&mut store, "direct", 4, 8, 3, 5, true, &mut rng);
    let bias = rand_tensor(&mut rng, &[15]);
    store.set(net.mlp.layers[1].bias, bias.clone()).unwrap();
    let mut g = Graph::eval(&store);
    let f = g.constant(rand_tensor(&mut rng, &[2, 4, 2, 2]));
    let q = net.forward(&mut g, f).unwrap();
    assert_eq!(g.shape(q), &[2, 3, 5]);
    for img in g.value(q).data().chunks(15) {
        assert_eq!(img, bias.data());
    }

    let mut store = ParamStore::<f64>::new();
    let net = DirectMlpQueries::new(&mut store, "direct", 4, 8, 3, 5, false, &mut rng);
    let hidden_bias = store.get(net.mlp.layers[0].bias).map(|_| 0.1);
    store.set(net.mlp.layers[0].bias, hidden_bias).unwrap();
    let params = net.params();
    let err = finite_difference_check_params(
        &store,
        &params,
        &[rand_tensor(&mut rng, &[4, 2, 2])],
        |g, v| {
            let q = net.forward(g, v[0])?;
            assert_eq!(g.shape(q), &[3, 5]);
            let s = g.sigmoid(q);
            Ok(g.sum(s))
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modulation_stays_in_group_hull(
        m in 1usize..5, r in 1usize..6, f in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basic = rand_tensor(&mut rng, &[m * r, f]);
        let raw: Vec<f64> = (0..m * r).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::new(&[m, r], raw).unwrap());
        let w = t.softmax(logits).unwrap();
        let w = t.value(w).clone();
        let q = modulate_values(&basic, &w);
        let oracle = triple_loop(&basic, r, w.data());
        for i in 0..m {
            for c in 0..f {
                let col: Vec<f64> = (0..r).map(|j| basic.data()[(i * r + j) * f + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = q.data()[i * f + c];
                prop_assert!(lo - 1e-12 <= v && v <= hi + 1e-12);
                prop_assert!((v - oracle[i * f + c]).abs() < 1e-12);
            }
        }
    }
}
