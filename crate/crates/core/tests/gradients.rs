mod common;

use common::*;
use proptest::prelude::*;
use tmmnn::autodiff::{matmul, Tape, Tensor};

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = check_network_gradients(seed);
        assert!(r.checked > 100);
        assert_eq!(r.failures, 0, "seed {seed}: {r:?}");
    }
}

#[test]
fn trigger_objective_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = check_trigger_objective_gradients(seed);
        assert_eq!(r.failures, 0, "seed {seed}: {r:?}");
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let model = random_net(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 9], random_unit_rows(2, 9, 1)).unwrap());
        let (logits, vars) = model.record_on_tape(&mut tape, x, 0, &[true; 3]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        let g = tape.backward(loss).unwrap();
        vars.iter()
            .flatten()
            .flat_map(|&(w, b)| [g.get(w).unwrap().clone(), g.get(b).unwrap().clone()])
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop((m, k, n, a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), matrix(m, k), matrix(k, n))))
    {
        let c = matmul(&Tensor::new(vec![m, k], a.clone()).unwrap(), &Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        prop_assert_eq!(c.shape(), &[m, n][..]);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| f64::from(a[i * k + p]) * f64::from(b[p * n + j])).sum();
                prop_assert!((f64::from(c.data()[i * n + j]) - want).abs() <= 1e-4 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn cross_entropy_matches_direct_formula(logits in prop::collection::vec(-1e3f32..1e3, 5), target in 0usize..5) {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::new(vec![1, 5], logits.clone()).unwrap());
        let ce = tape.softmax_cross_entropy(l, &[target]).unwrap();
        let value = f64::from(tape.value(ce).item());
        let g = tape.backward(ce).unwrap();
        let l64: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
        let want = ref_ce(&l64, target);
        prop_assert!(value.is_finite() && value >= 0.0);
        prop_assert!((value - want).abs() <= 1e-4 * (1.0 + want.abs()));
        prop_assert!(g.get(l).unwrap().all_finite());
    }

    #[test]
    fn mse_matches_loop(a in prop::collection::vec(-100.0f32..100.0, 12), b in prop::collection::vec(-100.0f32..100.0, 12)) {
        let mut tape = Tape::new();
        let va = tape.param(Tensor::new(vec![3, 4], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(vec![3, 4], b.clone()).unwrap());
        let m = tape.mse(va, vb).unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
        let b64: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
        let want = ref_mse(&a64, &b64);
        prop_assert!((f64::from(tape.value(m).item()) - want).abs() <= 1e-4 * (1.0 + want));
        let g = tape.backward(m).unwrap();
        for (i, &gv) in g.get(va).unwrap().data().iter().enumerate() {
            let w = 2.0 * (a64[i] - b64[i]) / 12.0;
            prop_assert!((f64::from(gv) - w).abs() <= 1e-4 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn network_outputs_stay_finite(x in prop::collection::vec(-1e3f32..1e3, 9), seed in 0u64..20) {
        let model = random_net(seed);
        let logits = model.logits(&Tensor::row(&x)).unwrap();
        prop_assert!(logits.all_finite());
        let p = model.predict_proba(&Tensor::row(&x)).unwrap();
        let total: f64 = p.data().iter().map(|&v| f64::from(v)).sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
    }
}
