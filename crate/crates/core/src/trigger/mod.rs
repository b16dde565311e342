//! Triggers: input-shaped perturbations that the pretrained model is blind to.
//!
//! The optimized triggers minimise `mse(f(x), f(x + τ)) + w / ‖τ‖²_F` over
//! logits; the second term keeps `τ` away from the trivial zero solution.
//! Blending follows `clip01(x·ω + τ·(1 − ω))`.

mod io;

pub use io::{load_trigger, save_trigger, TRIGGER_MAGIC, TRIGGER_VERSION};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, AdamState, Tape, Tensor};
use crate::data::{Dataset, Extents};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::util::{self, salt};

/// Side of the square corner patch used by the patch triggers.
pub const PATCH_SIDE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerHyper {
    pub max_iters: usize,
    pub lr: f32,
    /// Initial entries are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f32,
    /// Stop once the null-space MSE term drops below this.
    pub early_stop_tol: f64,
    /// Weight `w` on `1 / ‖τ‖²_F`.
    pub penalty_weight: f32,
    /// Lower clamp for the blend intensity ω.
    pub omega_floor: f32,
    /// Minibatch size for the global trigger.
    pub batch_size: usize,
}

impl Default for TriggerHyper {
    fn default() -> Self {
        Self {
            max_iters: 300,
            lr: 0.015,
            init_scale: 0.1,
            early_stop_tol: 1e-4,
            penalty_weight: 1.0,
            omega_floor: 0.05,
            batch_size: 64,
        }
    }
}

impl TriggerHyper {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("trigger max_iters must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(self.init_scale > 0.0) || self.penalty_weight < 0.0 {
            return Err(Error::Config(format!(
                "trigger lr {}, init_scale {} must be > 0 and penalty_weight {} ≥ 0",
                self.lr, self.init_scale, self.penalty_weight
            )));
        }
        if !(self.omega_floor > 0.0 && self.omega_floor <= 1.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "omega_floor {} must be in (0, 1] and batch_size positive",
                self.omega_floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerStats {
    /// Optimizer steps taken.
    pub iterations: usize,
    pub initial_objective: f64,
    /// Best objective over all iterates; the stored `τ` is that iterate.
    pub final_objective: f64,
    pub final_norm: f64,
    /// Null-space MSE term at the stored `τ`.
    pub final_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trigger {
    tau: Tensor,
    omega: f32,
    mask: Option<Vec<bool>>,
    extents: Extents,
    pub stats: TriggerStats,
}

impl Trigger {
    /// Builds a trigger, zeroing `tau` outside `mask`.
    pub fn new(tau: Tensor, omega: f32, mask: Option<Vec<bool>>, extents: Extents) -> Result<Self> {
        let d = extents.numel();
        if tau.len() != d {
            return Err(Error::dim(
                "trigger",
                format!("tau of {} values for extents {extents:?}", tau.len()),
            ));
        }
        if !(omega > 0.0 && omega <= 1.0) {
            return Err(Error::Contract(format!("omega {omega} outside (0, 1]")));
        }
        let mut tau = tau.reshape(vec![d])?;
        if let Some(m) = &mask {
            if m.len() != d {
                return Err(Error::dim("trigger mask", format!("{} entries for {d}", m.len())));
            }
            for (t, &keep) in tau.data_mut().iter_mut().zip(m) {
                if !keep {
                    *t = 0.0;
                }
            }
        }
        let tau = tau.ensure_finite("trigger")?;
        let stats = TriggerStats {
            final_norm: tau.norm(),
            ..Default::default()
        };
        Ok(Self {
            tau,
            omega,
            mask,
            extents,
            stats,
        })
    }

    pub fn tau(&self) -> &Tensor {
        &self.tau
    }

    pub fn omega(&self) -> f32 {
        self.omega
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn norm(&self) -> f64 {
        self.tau.norm()
    }

    pub fn with_omega(mut self, omega: f32) -> Result<Self> {
        if !(omega > 0.0 && omega <= 1.0) {
            return Err(Error::Contract(format!("omega {omega} outside (0, 1]")));
        }
        self.omega = omega;
        Ok(self)
    }

    /// A trigger with i.i.d. Gaussian direction scaled to Frobenius norm
    /// `norm`; the matched control for null-space comparisons.
    pub fn random_with_norm(extents: Extents, norm: f64, seed: u64) -> Result<Self> {
        let mut rng = util::rng(seed, salt::TRIGGER);
        let dir: Vec<f64> = (0..extents.numel())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tau = dir.iter().map(|v| (v / n * norm) as f32).collect();
        Self::new(Tensor::new(vec![extents.numel()], tau)?, 1.0, None, extents)
    }
}

/// `clip01(x·ω + τ·(1 − ω))` applied to each row of `x` (`B × d` or `d`).
pub fn apply_trigger(x: &Tensor, trig: &Trigger) -> Result<Tensor> {
    let d = trig.tau.len();
    if x.cols() != d {
        return Err(Error::dim(
            "apply_trigger",
            format!("input {:?} vs trigger of {d} values", x.shape()),
        ));
    }
    let (w, tau) = (trig.omega, trig.tau.data());
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(tau)
                .map(|(&xi, &ti)| (xi * w + ti * (1.0 - w)).clamp(0.0, 1.0))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Blend intensity for a query: its pixel standard deviation, clamped into
/// `[floor, 1]`. Warns when the floor is hit.
pub fn omega_for(x_q: &[f32], floor: f32) -> f32 {
    let std = util::pixel_std(x_q) as f32;
    if std < floor {
        log::warn!("query pixel std {std:.4} below floor; using omega = {floor}");
        return floor;
    }
    std.min(1.0)
}

/// `mse(logits(x), logits(x + τ))` over every entry of the batch.
pub fn nullspace_mse(model: &Classifier, x: &Tensor, trig: &Trigger) -> Result<f64> {
    let shifted = add_rows(x, trig.tau.data())?;
    let a = model.logits(x)?;
    let b = model.logits(&shifted)?;
    Ok(mse(&a, &b))
}

fn add_rows(x: &Tensor, tau: &[f32]) -> Result<Tensor> {
    if x.cols() != tau.len() {
        return Err(Error::dim(
            "trigger shift",
            format!("input {:?} vs trigger of {} values", x.shape(), tau.len()),
        ));
    }
    let data = x
        .data()
        .chunks(tau.len())
        .flat_map(|r| r.iter().zip(tau).map(|(a, b)| a + b))
        .collect();
    Tensor::new(vec![x.rows(), tau.len()], data)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Top-left `PATCH_SIDE × PATCH_SIDE` block of every channel.
pub fn patch_mask(extents: Extents) -> Result<Vec<bool>> {
    if extents.height < PATCH_SIDE || extents.width < PATCH_SIDE {
        return Err(Error::Config(format!(
            "input {}×{} smaller than the {PATCH_SIDE}×{PATCH_SIDE} patch",
            extents.height, extents.width
        )));
    }
    let mut mask = vec![false; extents.numel()];
    for c in 0..extents.channels {
        for r in 0..PATCH_SIDE {
            for col in 0..PATCH_SIDE {
                mask[c * extents.height * extents.width + r * extents.width + col] = true;
            }
        }
    }
    Ok(mask)
}

/// Fixed maximum-intensity corner patch. ω defaults to 0.5 and is normally
/// replaced per query with [`Trigger::with_omega`].
pub fn make_fixed_patch_trigger(extents: Extents) -> Result<Trigger> {
    let mask = patch_mask(extents)?;
    let tau = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Trigger::new(Tensor::new(vec![extents.numel()], tau)?, 0.5, Some(mask), extents)
}

struct Objective {
    total: f64,
    mse: f64,
}

/// Objective value and its gradient with respect to `τ` on batch `x`.
fn objective_grad(
    model: &Classifier,
    x: &Tensor,
    target: &Tensor,
    tau: &Tensor,
    w: f32,
) -> Result<(Objective, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.param(tau.clone());
    let shifted = tape.add_row(xv, tv)?;
    let trainable = vec![false; model.num_layers()];
    let (logits, _) = model.record_on_tape(&mut tape, shifted, 0, &trainable)?;
    let tgt = tape.constant(target.clone());
    let m = tape.mse(tgt, logits)?;
    let sq = tape.sum_squares(tv)?;
    let inv = tape.recip(sq)?;
    let pen = tape.scale(inv, w)?;
    let loss = tape.add(m, pen)?;
    let grads = tape.backward(loss)?;
    let obj = Objective {
        total: f64::from(tape.value(loss).item()),
        mse: f64::from(tape.value(m).item()),
    };
    Ok((obj, grads.get_or_zeros(tv, tau.shape())))
}

fn objective_value(model: &Classifier, x: &Tensor, target: &Tensor, tau: &Tensor, w: f32) -> Result<Objective> {
    let m = mse(target, &model.logits(&add_rows(x, tau.data())?)?);
    let sq = tau.norm().powi(2);
    Ok(Objective {
        total: m + f64::from(w) / sq,
        mse: m,
    })
}

fn init_tau(d: usize, hyper: &TriggerHyper, mask: Option<&[bool]>, seed: u64) -> Result<Tensor> {
    let mut rng = util::rng(seed, salt::TRIGGER);
    let s = hyper.init_scale;
    let data = (0..d)
        .map(|i| {
            let v = rng.random_range(-s..=s);
            match mask {
                Some(m) if !m[i] => 0.0,
                _ => v,
            }
        })
        .collect();
    Tensor::new(vec![d], data)
}

/// Source of the batch used for each gradient step.
enum Batches<'a> {
    /// One fixed batch, also used for tracking the best iterate.
    Fixed { x: &'a Tensor, target: Tensor },
    /// Rotating minibatches; a fixed probe batch tracks the best iterate.
    Rotating {
        data: &'a Dataset,
        order: Vec<usize>,
        batch: usize,
        probe: Tensor,
        probe_target: Tensor,
    },
}

fn run_optimizer(
    model: &Classifier,
    mut batches: Batches<'_>,
    hyper: &TriggerHyper,
    mask: Option<&[bool]>,
    seed: u64,
) -> Result<(Tensor, TriggerStats)> {
    hyper.validate()?;
    let d = model.config().input_dim();
    let w = hyper.penalty_weight;
    let mut tau = init_tau(d, hyper, mask, seed)?;
    let mut adam = AdamState::for_params(AdamHyper::with_lr(hyper.lr), &[&tau]);
    let mut best: Option<(Tensor, Objective)> = None;
    let mut initial = None;
    let mut steps = 0;

    for it in 0..=hyper.max_iters {
        let (tracked, grad) = match &mut batches {
            Batches::Fixed { x, target } => {
                let (obj, g) = objective_grad(model, x, target, &tau, w)?;
                (obj, Some(g))
            }
            Batches::Rotating {
                data,
                order,
                batch,
                probe,
                probe_target,
            } => {
                let obj = objective_value(model, probe, probe_target, &tau, w)?;
                let g = if it < hyper.max_iters {
                    let n = order.len();
                    let start = (it * *batch) % n;
                    let idx: Vec<usize> = (0..(*batch).min(n)).map(|j| order[(start + j) % n]).collect();
                    let xb = data.samples().select_rows(&idx)?;
                    let tb = model.logits(&xb)?;
                    Some(objective_grad(model, &xb, &tb, &tau, w)?.1)
                } else {
                    None
                };
                (obj, g)
            }
        };
        initial.get_or_insert(tracked.total);
        let done = tracked.mse < hyper.early_stop_tol;
        if best.as_ref().is_none_or(|(_, b)| tracked.total < b.total) {
            best = Some((tau.clone(), tracked));
        }
        if done || it == hyper.max_iters {
            break;
        }
        let mut g = grad.expect("gradient computed before the last iterate");
        if let Some(m) = mask {
            for (gi, &keep) in g.data_mut().iter_mut().zip(m) {
                if !keep {
                    *gi = 0.0;
                }
            }
        }
        adam.step(&mut [&mut tau], &[&g])?;
        steps += 1;
    }

    let (tau, obj) = best.expect("at least one iterate");
    let stats = TriggerStats {
        iterations: steps,
        initial_objective: initial.expect("at least one iterate"),
        final_objective: obj.total,
        final_norm: tau.norm(),
        final_mse: obj.mse,
    };
    Ok((tau, stats))
}

fn check_query(model: &Classifier, x_q: &[f32]) -> Result<Tensor> {
    let d = model.config().input_dim();
    if x_q.len() != d {
        return Err(Error::dim(
            "trigger query",
            format!("query of {} values for model input {d}", x_q.len()),
        ));
    }
    Ok(Tensor::row(x_q))
}

/// Query-local trigger: Adam from a seeded random start, keeping the best
/// iterate. ω is the query's clamped pixel standard deviation.
pub fn optimize_query_trigger(
    model: &Classifier,
    x_q: &[f32],
    hyper: &TriggerHyper,
    seed: u64,
) -> Result<Trigger> {
    let x = check_query(model, x_q)?;
    let target = model.logits(&x)?;
    let (tau, stats) = run_optimizer(model, Batches::Fixed { x: &x, target }, hyper, None, seed)?;
    let mut t = Trigger::new(tau, omega_for(x_q, hyper.omega_floor), None, model.config().input_extents)?;
    t.stats = stats;
    Ok(t)
}

/// Same objective as [`optimize_query_trigger`], with every update confined
/// to the corner patch.
pub fn optimize_patch_trigger(
    model: &Classifier,
    x_q: &[f32],
    hyper: &TriggerHyper,
    seed: u64,
) -> Result<Trigger> {
    let x = check_query(model, x_q)?;
    let extents = model.config().input_extents;
    let mask = patch_mask(extents)?;
    let target = model.logits(&x)?;
    let (tau, stats) = run_optimizer(model, Batches::Fixed { x: &x, target }, hyper, Some(&mask), seed)?;
    let mut t = Trigger::new(tau, omega_for(x_q, hyper.omega_floor), Some(mask), extents)?;
    t.stats = stats;
    Ok(t)
}

/// Dataset-wide trigger: the MSE term is taken over rotating minibatches.
/// ω is the mean per-sample pixel standard deviation, clamped like a query's.
pub fn optimize_global_trigger(
    model: &Classifier,
    data: &Dataset,
    hyper: &TriggerHyper,
    seed: u64,
) -> Result<Trigger> {
    if data.is_empty() {
        return Err(Error::Data("global trigger needs a non-empty dataset".into()));
    }
    let order = util::shuffled(data.len(), &mut util::rng(seed, salt::BATCH));
    let probe_idx = &order[..hyper.batch_size.min(order.len())];
    let probe = data.samples().select_rows(probe_idx)?;
    let probe_target = model.logits(&probe)?;
    let batches = Batches::Rotating {
        data,
        order: order.clone(),
        batch: hyper.batch_size,
        probe,
        probe_target,
    };
    let (tau, stats) = run_optimizer(model, batches, hyper, None, seed)?;
    let mean_std =
        (0..data.len()).map(|i| util::pixel_std(data.sample(i))).sum::<f64>() / data.len() as f64;
    let omega = (mean_std as f32).clamp(hyper.omega_floor, 1.0);
    let mut t = Trigger::new(tau, omega, None, data.extents())?;
    t.stats = stats;
    Ok(t)
}
