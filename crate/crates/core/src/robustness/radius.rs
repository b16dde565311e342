//! Empirical robustness radius: the largest perturbation norm at which a
//! retrieval method still returns the clean query's top-k set.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::noise::{shift_clipped, unit_direction};
use crate::error::{Error, Result};
use crate::util::{self, salt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusSpec {
    /// Random directions tested at every probed norm.
    pub directions: usize,
    pub eps_max: f64,
    /// Bisection resolution; radii below it are reported as 0.
    pub tol: f64,
}

impl Default for RadiusSpec {
    fn default() -> Self {
        Self {
            directions: 8,
            eps_max: 5.0,
            tol: 0.01,
        }
    }
}

impl RadiusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.directions == 0 || !(self.eps_max > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "radius search needs directions ≥ 1, eps_max > 0 and tol > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bisection on `ε`. At each probed norm the same seeded unit directions are
/// rescaled to `ε` and added to `x_q` (then clipped to `[0, 1]`); the norm
/// passes when every perturbed query yields the clean top-k set.
///
/// `retrieve_fn` returns the top-k indices for a query image.
pub fn empirical_radius<F>(mut retrieve_fn: F, x_q: &[f32], spec: &RadiusSpec, seed: u64) -> Result<f64>
where
    F: FnMut(&[f32]) -> Result<Vec<usize>>,
{
    spec.validate()?;
    let as_set = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    let reference = as_set(retrieve_fn(x_q)?);
    let mut rng = util::rng(seed, salt::DIRECTIONS);
    let dirs: Vec<Vec<f64>> = (0..spec.directions)
        .map(|_| unit_direction(x_q.len(), rng.random()))
        .collect();
    let mut passes = |eps: f64| -> Result<bool> {
        for u in &dirs {
            if as_set(retrieve_fn(&shift_clipped(x_q, u, eps))?) != reference {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if passes(spec.eps_max)? {
        return Ok(spec.eps_max);
    }
    if !passes(spec.tol)? {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (spec.tol, spec.eps_max);
    while hi - lo > spec.tol {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
