mod common;

use common::*;
use proptest::prelude::*;
use tmmnn::autodiff::Tensor;
use tmmnn::pipeline::{Context, PipelineConfig};
use tmmnn::retrieval::Method;
use tmmnn::robustness::{
    estimate_lipschitz, ood_bound, ood_experiment, perturb_brightness, self_retrieval_experiment,
    shift_clipped, unit_direction, LipschitzSpec, LogitMap, NoiseKind, NoiseSpec, OodGenerator,
    SelfRetrievalSpec,
};

/// `x ↦ x A` with `A` stored row-major `d × c`, evaluated in `f64`.
struct Linear {
    a: Vec<f64>,
    d: usize,
    c: usize,
}

impl LogitMap for Linear {
    fn logit_rows(&self, x: &Tensor) -> tmmnn::Result<Tensor> {
        let mut out = Vec::with_capacity(x.rows() * self.c);
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            for j in 0..self.c {
                let v: f64 = (0..self.d).map(|i| f64::from(row[i]) * self.a[i * self.c + j]).sum();
                out.push(v as f32);
            }
        }
        Tensor::new(vec![x.rows(), self.c], out)
    }
}

#[test]
fn lipschitz_estimate_of_linear_map_is_below_spectral_norm() {
    for seed in 0..5u64 {
        let (d, c) = (16, 5);
        let a: Vec<f64> = random_unit_rows(d, c, seed).iter().map(|&v| f64::from(v) - 0.5).collect();
        let sigma = spectral_norm(&a, d, c);
        let probe = Tensor::new(vec![30, d], random_unit_rows(30, d, seed + 50)).unwrap();
        let l = estimate_lipschitz(&Linear { a, d, c }, &probe, &LipschitzSpec::default(), seed).unwrap();
        assert!(l > 0.0 && l <= sigma + 1e-5, "seed {seed}: {l} vs σ_max {sigma}");
    }
}

#[test]
fn ood_with_no_injected_samples_succeeds_trivially() {
    let (split, model) = small_fixture(9);
    let cfg = PipelineConfig::default();
    let ctx = Context::new(model, split.train, &cfg, 9).unwrap();
    let r = ood_experiment(&ctx, &cfg, 4, 0, OodGenerator::Uniform, 1).unwrap();
    assert!(r.success);
    assert_eq!(r.bound, 0.0);
    assert_eq!(r.m, 0);
}

#[test]
fn ood_bound_arithmetic() {
    let b = ood_bound(10, 1.0, 0.5).unwrap();
    assert!((b - 10.0 * (-2.0f64).exp()).abs() < 1e-12);
    assert!((b - 1.3534).abs() < 1e-4);
    assert!(ood_bound(10, 1.0, 0.0).is_err());
}

#[test]
fn self_retrieval_report_shape_and_noiseless_l2() {
    let (split, model) = small_fixture(10);
    let cfg = PipelineConfig::default();
    let ctx = Context::new(model, split.train, &cfg, 10).unwrap();
    let spec = SelfRetrievalSpec {
        noise: NoiseSpec::new(NoiseKind::Gaussian, vec![0.0, 1.0, 3.0]),
        methods: vec![Method::Cosine, Method::L2],
        n_queries: 15,
        k: 1,
        seeds: vec![0, 1],
    };
    let report = self_retrieval_experiment(&ctx, &cfg, &spec).unwrap();
    assert_eq!(report.rows.len(), 2 * 3 * 2);
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.retrieval_rate) && r.n_queries == 15));
    assert_eq!(report.mean_rate(Method::L2, 0.0), Some(1.0));
}

proptest! {
    #[test]
    fn brightness_scales_exactly(x in prop::collection::vec(0.0f32..=1.0, 16), t in 0.11f64..=1.0) {
        let y = perturb_brightness(&x, t).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert_eq!(*b, (f64::from(*a) * t) as f32);
        }
    }

    #[test]
    fn gaussian_direction_has_exact_norm(seed in any::<u64>(), eps in 0.0f64..5.0) {
        let u = unit_direction(64, seed);
        let norm: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let x = vec![0.5f32; 64];
        let y = shift_clipped(&x, &u, eps);
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        let moved: f64 = x.iter().zip(&y).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>().sqrt();
        prop_assert!(moved <= eps + 1e-5);
    }
}
