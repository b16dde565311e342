//! Robustness benchmarks and the margin/Lipschitz/OOD diagnostics.
//!
//! - [`self_retrieval_experiment`]: perturb the query side only and check
//!   whether the query is still its own nearest neighbour.
//! - [`margin_diagnostics`]: dummy-class margin at the triggered query, a
//!   sampled Lipschitz constant, the certified radius they imply, empirical
//!   radii for every method, and the OOD comparison.

mod margin;
mod noise;
mod ood;
mod radius;
mod selfret;

pub use margin::{
    certified_radius, estimate_lipschitz, certified_check, margin_of, pair_ratio, CertifiedCheck,
    LipschitzSpec, LogitMap,
};
pub use noise::{
    perturb, perturb_brightness, perturb_gaussian, shift_clipped, unit_direction, NoiseKind,
    NoiseSpec,
};
pub use ood::{
    generate_ood, ood_benchmark, ood_bound, ood_experiment, OodBenchmark, OodGenerator, OodReport,
    OodSpec,
};
pub use radius::{empirical_radius, RadiusSpec};
pub use selfret::{
    noise_seed, select_queries, self_retrieval_experiment, SelfRetrievalReport, SelfRetrievalSpec,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::finetune::RetrievalQuery;
use crate::pipeline::{prepare_query, query_seed, Context, PipelineConfig, Prepared};
use crate::retrieval::{top_k, Method};
use crate::trigger::apply_trigger;
use crate::util::{self, salt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSpec {
    pub lipschitz: LipschitzSpec,
    /// Triggered search exemplars added to the Lipschitz probe set.
    pub probe_size: usize,
    pub radius: RadiusSpec,
    pub certified_samples: usize,
    pub k: usize,
}

impl Default for DiagSpec {
    fn default() -> Self {
        Self {
            lipschitz: LipschitzSpec::default(),
            probe_size: 63,
            radius: RadiusSpec::default(),
            certified_samples: 100,
            k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRadii {
    pub tmm: f64,
    pub cosine: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginDiagnostics {
    pub query_id: usize,
    pub gamma2: f64,
    pub lipschitz_hat: f64,
    /// `γ₂ / 2L̂`. Optimistic, since `L̂` underestimates the true constant.
    pub certified_radius: f64,
    pub empirical_radius: EmpiricalRadii,
    pub certified_check: CertifiedCheck,
    /// Pairs used for the Lipschitz estimate.
    pub samples: usize,
    pub ood: OodReport,
}

/// Empirical radius of `method` for the search exemplar `query_id`. The
/// perturbation directions depend only on `(seed, query_id)`, so methods are
/// compared on the same offsets.
pub fn method_radius(
    ctx: &Context,
    cfg: &PipelineConfig,
    method: Method,
    query_id: usize,
    k: usize,
    spec: &RadiusSpec,
    seed: u64,
) -> Result<f64> {
    let x_q = ctx.search.sample(query_id);
    let y_q = ctx.search.label(query_id);
    let retrieve = |x: &[f32]| {
        let scores = selfret::method_scores(ctx, cfg, method, x, y_q, query_id, seed)?;
        Ok(top_k(method, &scores, k)?.indices)
    };
    empirical_radius(retrieve, x_q, spec, query_seed(seed, query_id as u64))
}

/// The triggered query followed by `n` triggered search exemplars.
pub fn lipschitz_probe(ctx: &Context, prep: &Prepared, x_q: &[f32], n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = util::rng(seed, salt::LIPSCHITZ);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..ctx.search.len())).collect();
    let mut data = apply_trigger(&Tensor::row(x_q), &prep.trigger)?.into_data();
    if !idx.is_empty() {
        let rows = ctx.search.samples().select_rows(&idx)?;
        data.extend(apply_trigger(&rows, &prep.trigger)?.into_data());
    }
    Tensor::new(vec![n + 1, x_q.len()], data)
}

/// Every margin-based diagnostic for one search exemplar used as the query.
pub fn margin_diagnostics(
    ctx: &Context,
    cfg: &PipelineConfig,
    query_id: usize,
    spec: &DiagSpec,
    ood: &OodSpec,
    seed: u64,
) -> Result<MarginDiagnostics> {
    let query = RetrievalQuery::from_train(&ctx.search, query_id)?;
    let qseed = query_seed(seed, query_id as u64);
    let prep = prepare_query(ctx, &query, cfg, qseed)?;
    let probe = lipschitz_probe(ctx, &prep, &query.x_q, spec.probe_size, qseed)?;
    let l_hat = estimate_lipschitz(&prep.tmm, &probe, &spec.lipschitz, qseed)?;
    let check = certified_check(
        &prep.tmm,
        probe.row_slice(0),
        prep.tmm.dummy_index(),
        l_hat,
        spec.certified_samples,
        qseed,
    )?;
    let radius = |m| method_radius(ctx, cfg, m, query_id, spec.k, &spec.radius, seed);
    let empirical_radius = EmpiricalRadii {
        tmm: radius(Method::Tmm)?,
        cosine: radius(Method::Cosine)?,
        l2: radius(Method::L2)?,
    };
    Ok(MarginDiagnostics {
        query_id,
        gamma2: check.gamma2,
        lipschitz_hat: l_hat,
        certified_radius: check.certified_radius,
        empirical_radius,
        samples: 2 * spec.lipschitz.n_pairs,
        ood: ood_experiment(ctx, cfg, query_id, ood.m, ood.generator, seed)?,
        certified_check: check,
    })
}
