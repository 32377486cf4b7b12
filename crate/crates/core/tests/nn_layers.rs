use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_core::autodiff::gradcheck::check_params;
use twostream_core::autodiff::{ParamStore, Sgd, Tape, Tensor};
use twostream_core::nn::{upsample_factor, Checkpoint, Conv2d, Graph, Linear, LstmState, LstmUnit};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn lstm_h(
    store: &ParamStore,
    unit: &LstmUnit,
    x: &[f64],
    h0: &[f64],
    c0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(store);
    let xv = g.constant(Tensor::vector(x.to_vec()));
    let h = g.constant(Tensor::vector(h0.to_vec()));
    let c = g.constant(Tensor::vector(c0.to_vec()));
    let s = unit.forward(&mut g, xv, LstmState { h, c }).unwrap();
    (
        g.value(s.h).values().to_vec(),
        g.value(s.c).values().to_vec(),
    )
}

#[test]
fn lstm_zero_parameters_give_zero_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let unit = LstmUnit::new(&mut store, "u", 3, 4, &mut rng).unwrap();
    store.get_mut(unit.weight).values_mut().fill(0.0);
    store.get_mut(unit.bias).values_mut().fill(0.0);
    let (h, c) = lstm_h(&store, &unit, &[0.3, -2.0, 5.0], &[0.0; 4], &[0.0; 4]);
    assert_eq!(h, vec![0.0; 4]);
    assert_eq!(c, vec![0.0; 4]);
}

#[test]
fn lstm_saturated_gates_nest_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let unit = LstmUnit::new(&mut store, "u", 1, 1, &mut rng).unwrap();
    // Rows: input, forget, output, candidate; columns [x, h].
    store
        .get_mut(unit.weight)
        .values_mut()
        .copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    store
        .get_mut(unit.bias)
        .values_mut()
        .copy_from_slice(&[10.0, 10.0, 10.0, 0.0]);
    for x in [-2.0, -0.5, 0.0, 0.7, 1.5] {
        let (h, c) = lstm_h(&store, &unit, &[x], &[0.0], &[0.0]);
        let s = sigmoid(10.0);
        let c_ref = s * f64::tanh(x);
        let h_ref = s * c_ref.tanh();
        assert!((c[0] - c_ref).abs() < 1e-14);
        assert!((h[0] - h_ref).abs() < 1e-14);
        assert!((h[0] - x.tanh().tanh()).abs() < 1e-4);
    }
}

#[test]
fn lstm_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let unit = LstmUnit::new(&mut store, "u", 3, 2, &mut rng).unwrap();
    assert_eq!(store.get(unit.weight).shape(), &[8, 5]);
    assert_eq!(
        store.get(unit.bias).values(),
        &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
    );
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[2]));
    let s = LstmState::zeros(&mut g, 2);
    assert!(unit.forward(&mut g, x, s).is_err());
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let unit = LstmUnit::new(&mut store, "u", 3, 4, &mut rng).unwrap();
        let (x, h0, c0) = (
            random(&mut rng, 3),
            random(&mut rng, 4),
            random(&mut rng, 4),
        );
        let loss = |s: &ParamStore| lstm_h(s, &unit, &x, &h0, &c0).0.iter().sum::<f64>();
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::vector(x.clone()));
        let h = g.constant(Tensor::vector(h0.clone()));
        let c = g.constant(Tensor::vector(c0.clone()));
        let out = unit.forward(&mut g, xv, LstmState { h, c }).unwrap();
        let l = g.sum(out.h);
        let grads = g.backward(l).unwrap();
        let report = check_params(&store, &grads, None, loss);
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn linear_and_conv_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 1, 1, &mut rng).unwrap();
        let fc = Linear::new(&mut store, "fc", 3 * 2 * 2, 5, &mut rng).unwrap();
        for id in [conv.bias, fc.bias] {
            let v = random(&mut rng, store.get(id).numel());
            store.get_mut(id).values_mut().copy_from_slice(&v);
        }
        let x = Tensor::new(vec![2, 4, 4], random(&mut rng, 32)).unwrap();
        let forward = |g: &mut Graph| {
            let xv = g.constant(x.clone());
            let y = conv.forward(g, xv).unwrap();
            let y = g.tanh(y);
            let y = g.maxpool2d(y).unwrap();
            let y = g.reshape(y, &[12]).unwrap();
            let y = fc.forward(g, y).unwrap();
            g.softmax_cross_entropy(y, &[(seed % 5) as usize], 1.0)
                .unwrap()
        };
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = forward(&mut g);
            g.value(l).item().unwrap()
        };
        let mut g = Graph::new(&store);
        let l = forward(&mut g);
        let grads = g.backward(l).unwrap();
        let report = check_params(&store, &grads, None, loss);
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = tape.upsample_nearest(x, 1).unwrap();
    assert_eq!(tape.value(same).values(), tape.value(x).values());
    let up = tape.upsample_nearest(x, 2).unwrap();
    assert_eq!(tape.shape(up), &[1, 4, 4]);
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(up).values(), &expected);
    let s = tape.sum(up);
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap(), &[4.0; 4]);
    assert!(tape.upsample_nearest(x, 0).is_err());
    assert!(upsample_factor(2, 4).is_ok());
    assert!(upsample_factor(2, 5).is_err());
    assert!(upsample_factor(3, 2).is_err());
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = tape.maxpool2d(x).unwrap();
    assert_eq!(tape.shape(p), &[1, 1, 1]);
    assert_eq!(tape.value(p).values(), &[4.0]);
    let s = tape.sum(p);
    assert_eq!(
        tape.backward(s).unwrap().wrt(x).unwrap(),
        &[0.0, 0.0, 0.0, 1.0]
    );
}

#[test]
fn sgd_step_changes_exactly_the_parameters_with_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let used = Linear::new(&mut store, "used", 3, 2, &mut rng).unwrap();
    let unused = Linear::new(&mut store, "unused", 3, 2, &mut rng).unwrap();
    let before = store.clone();
    let mut sgd = Sgd::new(&store, 0.9);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::vector(vec![1.0, 0.0, -1.0]));
    let y = used.forward(&mut g, x).unwrap();
    let l = g.softmax_cross_entropy(y, &[1], 1.0).unwrap();
    let grads = g.backward(l).unwrap();
    store.accumulate(&grads).unwrap();
    sgd.step(&mut store, 0.1).unwrap();
    for (id, name, t) in store.iter() {
        let old = before.get(id).values();
        let grad = grads.param(id);
        for (i, (a, b)) in t.values().iter().zip(old).enumerate() {
            let nonzero = grad.is_some_and(|gr| gr[i] != 0.0);
            assert_eq!(a != b, nonzero, "{name}[{i}]");
        }
    }
    assert_eq!(
        store.get(unused.weight).values(),
        before.get(unused.weight).values()
    );
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng).unwrap();
    LstmUnit::new(&mut store, "l", 4, 5, &mut rng).unwrap();
    let ck = Checkpoint::from_store(&store, "fp");
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut fresh = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    Conv2d::new(&mut fresh, "c", 2, 3, 3, 1, 1, &mut rng).unwrap();
    LstmUnit::new(&mut fresh, "l", 4, 5, &mut rng).unwrap();
    Checkpoint::load(&path)
        .unwrap()
        .restore_into(&mut fresh, "fp")
        .unwrap();
    assert_eq!(fresh.flat_values(), store.flat_values());
    assert!(Checkpoint::load(&path)
        .unwrap()
        .restore_into(&mut fresh, "other")
        .is_err());

    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xFF;
    assert!(Checkpoint::decode(&corrupt).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

proptest! {
    #[test]
    fn lstm_hidden_state_is_bounded(
        seed in 0u64..1000,
        x in prop::collection::vec(-100.0f64..100.0, 3),
        c in prop::collection::vec(-100.0f64..100.0, 2),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let unit = LstmUnit::new(&mut store, "u", 3, 2, &mut rng).unwrap();
        // Open interval where tanh and σ are not rounded to ±1.
        let small: Vec<f64> = x.iter().map(|v| v / 25.0).collect();
        let (h, _) = lstm_h(&store, &unit, &small, &[0.5, -0.5], &[c[0] / 25.0, c[1] / 25.0]);
        prop_assert!(h.iter().all(|v| v.abs() < 1.0));
        let (h, _) = lstm_h(&store, &unit, &x, &[0.5, -0.5], &c);
        prop_assert!(h.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn upsample_then_average_restores(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 2, 2], vals.clone()).unwrap());
        let up = tape.upsample_nearest(x, 2).unwrap();
        let u = tape.value(up).values();
        for c in 0..3 {
            for y in 0..2 {
                for xx in 0..2 {
                    let at = |dy: usize, dx: usize| u[c * 16 + (2 * y + dy) * 4 + 2 * xx + dx];
                    let avg = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                    prop_assert_eq!(avg, vals[c * 4 + y * 2 + xx]);
                }
            }
        }
    }
}
