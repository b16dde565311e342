//! Margins, sampled Lipschitz estimates and the certified radius they imply.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::noise::unit_direction;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::finetune::TmmModel;
use crate::model::{argmax, Classifier};
use crate::util::{self, salt};

/// Anything that maps a batch of inputs to a batch of logit rows.
pub trait LogitMap {
    fn logit_rows(&self, x: &Tensor) -> Result<Tensor>;
}

impl LogitMap for Classifier {
    fn logit_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x)
    }
}

impl LogitMap for TmmModel {
    fn logit_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.logits(x)
    }
}

/// Dummy logit minus the largest other logit. Negative when another class wins.
pub fn margin_of(row: &[f32], dummy: usize) -> Result<f64> {
    if row.len() < 2 || dummy >= row.len() {
        return Err(Error::Contract(format!(
            "margin needs ≥ 2 logits and dummy {dummy} < {}",
            row.len()
        )));
    }
    let best_other = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != dummy)
        .map(|(_, &v)| f64::from(v))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(f64::from(row[dummy]) - best_other)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LipschitzSpec {
    /// Random distinct pairs; the same number of local pairs is added.
    pub n_pairs: usize,
    /// Norm of the offset in each local pair `(x, x + δ)`.
    pub local_scale: f64,
}

impl Default for LipschitzSpec {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            local_scale: 0.05,
        }
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `‖f(x) − f(y)‖ / ‖x − y‖`, or `None` when `x = y`.
pub fn pair_ratio<M: LogitMap + ?Sized>(map: &M, x: &[f32], y: &[f32]) -> Result<Option<f64>> {
    let dx = l2(x, y);
    if dx == 0.0 {
        return Ok(None);
    }
    let fx = map.logit_rows(&Tensor::row(x))?;
    let fy = map.logit_rows(&Tensor::row(y))?;
    Ok(Some(l2(fx.data(), fy.data()) / dx))
}

/// Largest sampled ratio `‖f(x) − f(y)‖ / ‖x − y‖` over `n_pairs` distinct
/// probe pairs and `n_pairs` local pairs `(x, x + δ)`. This can only
/// underestimate the true Lipschitz constant.
pub fn estimate_lipschitz<M: LogitMap + ?Sized>(
    map: &M,
    probe: &Tensor,
    spec: &LipschitzSpec,
    seed: u64,
) -> Result<f64> {
    let n = probe.rows();
    if n < 2 {
        return Err(Error::Contract(format!("Lipschitz probe set has {n} < 2 points")));
    }
    let d = probe.cols();
    let mut rng = util::rng(seed, salt::LIPSCHITZ);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for _ in 0..spec.n_pairs {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        left.extend_from_slice(probe.row_slice(i));
        right.extend_from_slice(probe.row_slice(j));
    }
    for _ in 0..spec.n_pairs {
        let i = rng.random_range(0..n);
        let u = unit_direction(d, rng.random());
        let x = probe.row_slice(i);
        left.extend_from_slice(x);
        right.extend(x.iter().zip(&u).map(|(&v, &ui)| (f64::from(v) + spec.local_scale * ui) as f32));
    }
    let rows = left.len() / d;
    if rows == 0 {
        return Ok(0.0);
    }
    let a = Tensor::new(vec![rows, d], left)?;
    let b = Tensor::new(vec![rows, d], right)?;
    let (fa, fb) = (map.logit_rows(&a)?, map.logit_rows(&b)?);
    let mut best = 0.0f64;
    for r in 0..rows {
        let dx = l2(a.row_slice(r), b.row_slice(r));
        if dx > 0.0 {
            best = best.max(l2(fa.row_slice(r), fb.row_slice(r)) / dx);
        }
    }
    Ok(best)
}

/// `max(γ₂, 0) / (2 L̂)`.
pub fn certified_radius(gamma2: f64, l_hat: f64) -> Result<f64> {
    if !(l_hat > 0.0) {
        return Err(Error::Contract(format!("Lipschitz estimate {l_hat} must be > 0")));
    }
    Ok(gamma2.max(0.0) / (2.0 * l_hat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedCheck {
    pub gamma2: f64,
    pub lipschitz_hat: f64,
    pub certified_radius: f64,
    pub samples: usize,
    /// Samples at which the dummy class stayed the argmax.
    pub preserved: usize,
    pub rate: f64,
}

/// Samples `n_samples` offsets of norm exactly the certified radius around
/// `x_t` and counts how often the dummy class stays on top.
pub fn certified_check<M: LogitMap + ?Sized>(
    map: &M,
    x_t: &[f32],
    dummy: usize,
    l_hat: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CertifiedCheck> {
    if n_samples == 0 {
        return Err(Error::Contract("certified-radius check needs at least one sample".into()));
    }
    let gamma2 = margin_of(map.logit_rows(&Tensor::row(x_t))?.data(), dummy)?;
    let radius = certified_radius(gamma2, l_hat)?;
    let d = x_t.len();
    let mut rng = util::rng(seed, salt::CERTIFIED);
    let mut batch = Vec::with_capacity(n_samples * d);
    for _ in 0..n_samples {
        let u = unit_direction(d, rng.random());
        batch.extend(x_t.iter().zip(&u).map(|(&v, &ui)| (f64::from(v) + radius * ui) as f32));
    }
    let logits = map.logit_rows(&Tensor::new(vec![n_samples, d], batch)?)?;
    let preserved = (0..n_samples)
        .filter(|&i| argmax(logits.row_slice(i)) == dummy)
        .count();
    if preserved < n_samples {
        log::warn!(
            "{} of {n_samples} offsets at the certified radius flipped the argmax; \
             the sampled Lipschitz constant is only a lower bound",
            n_samples - preserved
        );
    }
    Ok(CertifiedCheck {
        gamma2,
        lipschitz_hat: l_hat,
        certified_radius: radius,
        samples: n_samples,
        preserved,
        rate: preserved as f64 / n_samples as f64,
    })
}
