//! Query-side perturbations for the self-retrieval benchmark.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, salt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Brightness,
    Gaussian,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Brightness => "brightness",
            NoiseKind::Gaussian => "gaussian",
        }
    }

    /// The level at which a perturbation leaves the query unchanged.
    pub fn identity_level(self) -> f64 {
        match self {
            NoiseKind::Brightness => 1.0,
            NoiseKind::Gaussian => 0.0,
        }
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            NoiseKind::Brightness => vec![1.0, 0.8, 0.6, 0.5, 0.4, 0.2],
            NoiseKind::Gaussian => vec![0.0, 0.5, 1.0, 2.0, 2.5, 3.5, 5.0],
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(NoiseKind::Brightness),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Brightness factors in `(0.1, 1]` or Gaussian norms `≥ 0`.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::new(NoiseKind::Brightness, NoiseKind::Brightness.default_levels())
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, levels: Vec<f64>) -> Self {
        Self { kind, levels, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("noise levels must not be empty".into()));
        }
        for &l in &self.levels {
            let ok = match self.kind {
                NoiseKind::Brightness => l > 0.1 && l <= 1.0,
                NoiseKind::Gaussian => l.is_finite() && l >= 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("{} level {l} out of range", self.kind)));
            }
        }
        Ok(())
    }
}

/// `t_b · x` for `t_b ∈ (0.1, 1]`.
pub fn perturb_brightness(x: &[f32], t_b: f64) -> Result<Vec<f32>> {
    if !(t_b > 0.1 && t_b <= 1.0) {
        return Err(Error::Contract(format!("brightness factor {t_b} outside (0.1, 1]")));
    }
    Ok(x.iter().map(|&v| (f64::from(v) * t_b) as f32).collect())
}

/// A seeded direction drawn uniformly from the unit sphere in `d` dimensions.
pub fn unit_direction(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::rng(seed, salt::NOISE);
    loop {
        let n: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return n.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// `clip01(x + ε·u)` for a unit vector `u`.
pub fn shift_clipped(x: &[f32], u: &[f64], eps: f64) -> Vec<f32> {
    x.iter()
        .zip(u)
        .map(|(&v, &ui)| (f64::from(v) + eps * ui).clamp(0.0, 1.0) as f32)
        .collect()
}

/// `clip01(x + Δx)` with `Δx = ε·n/‖n‖` for a seeded standard normal `n`, so
/// the perturbation has norm exactly `ε` before clipping.
pub fn perturb_gaussian(x: &[f32], eps: f64, seed: u64) -> Result<Vec<f32>> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::Contract(format!("gaussian norm {eps} must be ≥ 0")));
    }
    if eps == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(shift_clipped(x, &unit_direction(x.len(), seed), eps))
}

pub fn perturb(kind: NoiseKind, x: &[f32], level: f64, seed: u64) -> Result<Vec<f32>> {
    match kind {
        NoiseKind::Brightness => perturb_brightness(x, level),
        NoiseKind::Gaussian => perturb_gaussian(x, level, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brightness_examples() {
        let x = [0.2f32, 0.8, 1.0];
        assert_eq!(perturb_brightness(&x, 1.0).unwrap(), x.to_vec());
        assert_eq!(perturb_brightness(&[0.8], 0.5).unwrap(), vec![0.4]);
        assert!(matches!(perturb_brightness(&x, 0.1), Err(Error::Contract(_))));
        assert!(perturb_brightness(&x, 1.01).is_err());
    }

    #[test]
    fn gaussian_norm_before_clipping() {
        let x = vec![0.5f32; 64];
        let u = unit_direction(64, 9);
        let n: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let y = perturb_gaussian(&x, 0.3, 9).unwrap();
        // small enough that nothing clips
        let realized: f64 = x
            .iter()
            .zip(&y)
            .map(|(&a, &b)| (f64::from(b) - f64::from(a)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((realized - 0.3).abs() < 1e-5);
        assert_eq!(perturb_gaussian(&x, 0.0, 9).unwrap(), x);
        assert_eq!(y, perturb_gaussian(&x, 0.3, 9).unwrap());
        assert!(perturb_gaussian(&x, 5.0, 1).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::default().validate().is_ok());
        assert!(NoiseSpec::new(NoiseKind::Gaussian, NoiseKind::Gaussian.default_levels())
            .validate()
            .is_ok());
        assert!(NoiseSpec::new(NoiseKind::Brightness, vec![0.05]).validate().unwrap_err().is_config());
        assert!(NoiseSpec::new(NoiseKind::Gaussian, vec![-1.0]).validate().is_err());
        assert!(NoiseSpec::new(NoiseKind::Gaussian, vec![]).validate().is_err());
        assert_eq!("gaussian".parse::<NoiseKind>().unwrap(), NoiseKind::Gaussian);
        assert!("salt".parse::<NoiseKind>().is_err());
    }
}
