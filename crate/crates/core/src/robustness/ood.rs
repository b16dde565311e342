//! Out-of-distribution exemplars in the search set: the query should still
//! out-score every one of them on the dummy class.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::finetune::RetrievalQuery;
use crate::pipeline::{prepare_query, prepared_search_scores, query_seed, Context, PipelineConfig};
use crate::robustness::select_queries;
use crate::util::{self, salt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodGenerator {
    /// Independent uniform pixels in `[0, 1]`.
    #[default]
    Uniform,
    /// A random exemplar circularly shifted by half its height and width.
    ShiftedPrototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSpec {
    /// Samples injected into the search set.
    pub m: usize,
    pub generator: OodGenerator,
    /// Seeded runs in the OOD benchmark, one query each.
    pub runs: usize,
}

impl Default for OodSpec {
    fn default() -> Self {
        Self {
            m: 50,
            generator: OodGenerator::Uniform,
            runs: 20,
        }
    }
}

/// `M` out-of-distribution images, or `None` for `M = 0`.
pub fn generate_ood(gen: OodGenerator, m: usize, search: &Dataset, seed: u64) -> Result<Option<Tensor>> {
    if m == 0 {
        return Ok(None);
    }
    let mut rng = util::rng(seed, salt::OOD);
    let d = search.dim();
    let e = search.extents();
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        match gen {
            OodGenerator::Uniform => data.extend((0..d).map(|_| rng.random::<f32>())),
            OodGenerator::ShiftedPrototype => {
                let src = search.sample(rng.random_range(0..search.len()));
                let (h, w) = (e.height, e.width);
                for c in 0..e.channels {
                    for r in 0..h {
                        for col in 0..w {
                            let (sr, sc) = ((r + h / 2) % h, (col + w / 2) % w);
                            data.push(src[c * h * w + sr * w + sc]);
                        }
                    }
                }
            }
        }
    }
    Ok(Some(Tensor::new(vec![m, d], data)?))
}

/// `M · exp(−Δ² / 2σ²)`; values above 1 are vacuous.
pub fn ood_bound(m: usize, delta: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma {sigma} must be > 0")));
    }
    Ok(m as f64 * (-delta * delta / (2.0 * sigma * sigma)).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub query_id: usize,
    pub m: usize,
    /// Dummy-class score of the query.
    pub b_q: f64,
    /// Dummy-class scores of the injected samples.
    pub b_ood: Vec<f64>,
    pub mu_ood: f64,
    /// Sample standard deviation of `b_ood`.
    pub sigma: f64,
    /// `b_q − mu_ood`.
    pub delta: f64,
    pub bound: f64,
    pub vacuous: bool,
    /// The bound only speaks about the query when `delta > 0`.
    pub bound_applicable: bool,
    pub success: bool,
}

/// Appends `M` OOD samples to the search set, runs the TMM pipeline for the
/// search exemplar `query_id`, and compares the query's score to theirs.
pub fn ood_experiment(
    ctx: &Context,
    cfg: &PipelineConfig,
    query_id: usize,
    m: usize,
    gen: OodGenerator,
    seed: u64,
) -> Result<OodReport> {
    let query = RetrievalQuery::from_train(&ctx.search, query_id)?;
    let n = ctx.search.len();
    let ood = generate_ood(gen, m, &ctx.search, seed)?;
    let search_ctx = match &ood {
        None => ctx.clone(),
        Some(o) => {
            let mut data = ctx.search.samples().data().to_vec();
            data.extend_from_slice(o.data());
            let mut labels = ctx.search.labels().to_vec();
            // labels of search exemplars are never read; OOD samples borrow class 0
            labels.resize(n + m, 0);
            ctx.with_search(Dataset::new(
                Tensor::new(vec![n + m, ctx.search.dim()], data)?,
                labels,
                ctx.search.extents(),
                ctx.search.num_classes(),
                format!("{} + {m} ood", ctx.search.provenance()),
            )?)?
        }
    };
    let prep = prepare_query(&search_ctx, &query, cfg, query_seed(seed, query_id as u64))?;
    let scores = prepared_search_scores(&search_ctx, &prep)?;
    let b_q = scores[query_id];
    let b_ood = scores[n..].to_vec();
    if b_ood.is_empty() {
        return Ok(OodReport {
            query_id,
            m,
            b_q,
            b_ood,
            mu_ood: 0.0,
            sigma: 0.0,
            delta: b_q,
            bound: 0.0,
            vacuous: false,
            bound_applicable: false,
            success: true,
        });
    }
    let mu_ood = b_ood.iter().sum::<f64>() / m as f64;
    let sigma = if m > 1 {
        (b_ood.iter().map(|b| (b - mu_ood).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
    } else {
        0.0
    };
    let delta = b_q - mu_ood;
    let bound = if sigma > 0.0 {
        ood_bound(m, delta, sigma)?
    } else if delta > 0.0 {
        0.0
    } else {
        m as f64
    };
    let max_ood = b_ood.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(OodReport {
        query_id,
        m,
        b_q,
        b_ood,
        mu_ood,
        sigma,
        delta,
        bound,
        vacuous: bound > 1.0,
        bound_applicable: delta > 0.0,
        success: b_q > max_ood,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodBenchmark {
    pub spec: OodSpec,
    pub runs: Vec<OodReport>,
    pub success_rate: f64,
}

/// `spec.runs` OOD experiments on distinct seeded queries, each with its own
/// OOD draw.
pub fn ood_benchmark(ctx: &Context, cfg: &PipelineConfig, spec: &OodSpec, seed: u64) -> Result<OodBenchmark> {
    if spec.runs == 0 {
        return Err(Error::Config("ood runs must be ≥ 1".into()));
    }
    let queries = select_queries(ctx.search.len(), spec.runs, seed)?;
    let runs = queries
        .par_iter()
        .enumerate()
        .map(|(r, &q)| ood_experiment(ctx, cfg, q, spec.m, spec.generator, util::mix(seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let success_rate = runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64;
    Ok(OodBenchmark {
        spec: spec.clone(),
        runs,
        success_rate,
    })
}
