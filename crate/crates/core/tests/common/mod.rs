//! Reference implementations used as oracles by the integration tests and
//! the acceptance suite. Everything here is written independently of the
//! library's kernels and runs in `f64`.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmmnn::data::{generate_synthetic, Extents, SyntheticSpec, SyntheticSplit};
use tmmnn::model::{init_model, train_classifier, Classifier, ModelConfig, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Affine layer shapes `(in, out)` of a classifier.
pub fn dims(model: &Classifier) -> Vec<(usize, usize)> {
    model
        .layers()
        .iter()
        .map(|l| (l.weight.shape()[0], l.weight.shape()[1]))
        .collect()
}

/// Parameters in the order w0, b0, w1, b1, … as `f64`.
pub fn flat_params(model: &Classifier) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| f64::from(v)))
        .collect()
}

/// Forward pass of a ReLU MLP for one input row, with weights stored
/// `in × out` row-major inside `params`.
pub fn ref_logits(dims: &[(usize, usize)], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let mut out = b.to_vec();
        for i in 0..fan_in {
            for j in 0..fan_out {
                out[j] += h[i] * w[i * fan_out + j];
            }
        }
        if li + 1 < dims.len() {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = out;
    }
    h
}

pub fn ref_softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[target]` via a shifted log-sum-exp.
pub fn ref_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn ref_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

pub fn ref_cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn ref_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Selection-sort top-k: repeatedly take the highest remaining score, the
/// earliest index winning ties.
pub fn naive_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            if best.is_none() || scores[i] > scores[best.unwrap()] {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Largest singular value of a row-major `rows × cols` matrix by power
/// iteration on `AᵀA`.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let mut av = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                av[r] += a[r * cols + c] * v[c];
            }
        }
        let mut atav = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                atav[c] += a[r * cols + c] * av[r];
            }
        }
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = atav.iter().map(|x| x / n).collect();
        sigma = n.sqrt();
    }
    sigma
}

/// Small random network with non-zero biases, for gradient checks.
pub fn random_net(seed: u64) -> Classifier {
    let mut model = init_model(ModelConfig {
        input_extents: Extents::grayscale(3),
        hidden_widths: vec![7, 5],
        num_classes: 3,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut r = rng(seed ^ 0xB1A5);
    for layer in model.layers_mut() {
        for v in layer.bias.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    model
}

pub fn random_unit_rows(rows: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..rows * d).map(|_| r.random::<f32>()).collect()
}

/// The synthetic desk benchmark with a pretrained default classifier.
pub fn desk_fixture(seed: u64) -> (SyntheticSplit, Classifier) {
    let split = generate_synthetic(&SyntheticSpec::default(), seed).unwrap();
    let mut model = init_model(ModelConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    train_classifier(&mut model, &split.train, &TrainConfig::default(), seed).unwrap();
    (split, model)
}

/// A quick-to-train small variant of the desk benchmark.
pub fn small_fixture(seed: u64) -> (SyntheticSplit, Classifier) {
    let spec = SyntheticSpec {
        samples_per_class: 40,
        ..Default::default()
    };
    let split = generate_synthetic(&spec, seed).unwrap();
    let mut model = init_model(ModelConfig {
        hidden_widths: vec![32, 64],
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..Default::default()
    };
    train_classifier(&mut model, &split.train, &cfg, seed).unwrap();
    (split, model)
}

use tmmnn::autodiff::{finite_diff_grad_f64, grad_close, Tape, Tensor};

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a − b| / max(|a|, |b|)` among entries above the absolute floor.
    pub worst_rel: f64,
}

impl GradReport {
    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.checked += 1;
            if !grad_close(a, n, 1e-4, 1e-6) {
                self.failures += 1;
            }
            let gap = (a - n).abs();
            if gap > 1e-6 {
                self.worst_rel = self.worst_rel.max(gap / a.abs().max(n.abs()));
            }
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        self.failures += other.failures;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Tape gradients of a batch cross-entropy, with respect to every parameter
/// and the input, against central differences of the `f64` reference net.
pub fn check_network_gradients(seed: u64) -> GradReport {
    let model = random_net(seed);
    let (batch, d) = (4, model.config().input_dim());
    let x = random_unit_rows(batch, d, seed + 100);
    let mut r = rng(seed + 200);
    let targets: Vec<usize> = (0..batch).map(|_| r.random_range(0..model.config().num_outputs())).collect();

    let mut tape = Tape::new();
    let input = tape.param(Tensor::new(vec![batch, d], x.clone()).unwrap());
    let trainable = vec![true; model.num_layers()];
    let (logits, vars) = model.record_on_tape(&mut tape, input, 0, &trainable).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &targets).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (w, b) in vars.iter().map(|v| v.unwrap()) {
        analytic.extend(to_f64(g.get(w).unwrap()));
        analytic.extend(to_f64(g.get(b).unwrap()));
    }

    let dims = dims(&model);
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let loss_of = |p: &[f64], xs: &[f64]| {
        (0..batch)
            .map(|i| ref_ce(&ref_logits(&dims, p, &xs[i * d..(i + 1) * d]), targets[i]))
            .sum::<f64>()
            / batch as f64
    };
    let p0 = flat_params(&model);
    let numeric = finite_diff_grad_f64(|p| loss_of(p, &x64), &p0, 1e-6);
    let mut report = GradReport::default();
    report.compare(&analytic, &numeric);

    let numeric_x = finite_diff_grad_f64(|xs| loss_of(&p0, xs), &x64, 1e-6);
    report.compare(&to_f64(g.get(input).unwrap()), &numeric_x);
    report
}

/// Gradient with respect to a trigger of an objective touching every
/// differentiable tape operation: null-space MSE, the inverse-norm penalty,
/// a clipped blend fed to cross-entropy, and an elementwise product term.
pub fn check_trigger_objective_gradients(seed: u64) -> GradReport {
    let model = random_net(seed);
    let d = model.config().input_dim();
    let dummy = model.dummy_index();
    let x = random_unit_rows(1, d, seed + 300);
    let mut r = rng(seed + 400);
    let tau: Vec<f32> = (0..d).map(|_| r.random_range(-0.3f32..0.3)).collect();
    let (omega, w) = (0.4f32, 1.0f32);
    let frozen = vec![false; model.num_layers()];

    let mut tape = Tape::new();
    let xc = tape.constant(Tensor::new(vec![1, d], x.clone()).unwrap());
    let t = tape.param(Tensor::new(vec![1, d], tau.clone()).unwrap());
    let shifted = tape.add(xc, t).unwrap();
    let (lx, _) = model.record_on_tape(&mut tape, xc, 0, &frozen).unwrap();
    let (ls, _) = model.record_on_tape(&mut tape, shifted, 0, &frozen).unwrap();
    let m = tape.mse(lx, ls).unwrap();
    let ss = tape.sum_squares(t).unwrap();
    let inv = tape.recip(ss).unwrap();
    let pen = tape.scale(inv, w).unwrap();
    let xs = tape.scale(xc, omega).unwrap();
    let ts = tape.scale(t, 1.0 - omega).unwrap();
    let mixed = tape.add(xs, ts).unwrap();
    let blend = tape.clip01(mixed).unwrap();
    let (lb, _) = model.record_on_tape(&mut tape, blend, 0, &frozen).unwrap();
    let ce = tape.softmax_cross_entropy(lb, &[dummy]).unwrap();
    let diff = tape.sub(t, xc).unwrap();
    let prod = tape.mul(diff, t).unwrap();
    let s = tape.sum(prod).unwrap();
    let extra = tape.scale(s, 0.1).unwrap();
    let a1 = tape.add(m, pen).unwrap();
    let a2 = tape.add(a1, ce).unwrap();
    let a3 = tape.add(a2, extra).unwrap();
    let total = tape.add_scalar(a3, 0.5).unwrap();
    let g = tape.backward(total).unwrap();

    let dims = dims(&model);
    let p = flat_params(&model);
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let (om, w64) = (f64::from(omega), f64::from(w));
    let objective = |tv: &[f64]| {
        let lx = ref_logits(&dims, &p, &x64);
        let sh: Vec<f64> = x64.iter().zip(tv).map(|(a, b)| a + b).collect();
        let ls = ref_logits(&dims, &p, &sh);
        let norm2: f64 = tv.iter().map(|v| v * v).sum();
        let blend: Vec<f64> = x64
            .iter()
            .zip(tv)
            .map(|(a, b)| (a * om + b * (1.0 - om)).clamp(0.0, 1.0))
            .collect();
        let ce = ref_ce(&ref_logits(&dims, &p, &blend), dummy);
        let extra: f64 = tv.iter().zip(&x64).map(|(t, x)| (t - x) * t).sum();
        ref_mse(&lx, &ls) + w64 / norm2 + ce + 0.1 * extra + 0.5
    };
    let tau64: Vec<f64> = tau.iter().map(|&v| f64::from(v)).collect();
    let numeric = finite_diff_grad_f64(objective, &tau64, 1e-6);
    let mut report = GradReport::default();
    report.compare(&to_f64(g.get(t).unwrap()), &numeric);
    report
}
