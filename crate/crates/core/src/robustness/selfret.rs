//! Self-retrieval: the query lives in the search set and should come back as
//! its own nearest neighbour even after the query side is perturbed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::{perturb, NoiseSpec};
use crate::data::RateRow;
use crate::error::{Error, Result};
use crate::finetune::{QuerySource, RetrievalQuery};
use crate::pipeline::{baseline_search_scores, query_seed, tmm_search_scores, Context, PipelineConfig};
use crate::retrieval::{top_k, Method, Metric};
use crate::util::{self, salt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRetrievalSpec {
    pub noise: NoiseSpec,
    pub methods: Vec<Method>,
    pub n_queries: usize,
    /// A query counts as retrieved when it appears in the top `k`.
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl Default for SelfRetrievalSpec {
    fn default() -> Self {
        Self {
            noise: NoiseSpec::default(),
            methods: Method::ALL.to_vec(),
            n_queries: 50,
            k: 1,
            seeds: vec![0, 1, 2],
        }
    }
}

impl SelfRetrievalSpec {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one method and one seed".into()));
        }
        if self.n_queries == 0 || self.k == 0 {
            return Err(Error::Config("n_queries and k must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfRetrievalReport {
    pub spec: SelfRetrievalSpec,
    pub rows: Vec<RateRow>,
}

impl SelfRetrievalReport {
    /// Rate averaged over seeds for one `(method, level)` cell.
    pub fn mean_rate(&self, method: Method, level: f64) -> Option<f64> {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method.as_str() && r.noise_level == level)
            .map(|r| r.retrieval_rate)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// Rate averaged over seeds and levels for one method.
    pub fn overall_rate(&self, method: Method) -> Option<f64> {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method.as_str())
            .map(|r| r.retrieval_rate)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

/// `n_queries` distinct search-set indices drawn with `seed`.
pub fn select_queries(n_search: usize, n_queries: usize, seed: u64) -> Result<Vec<usize>> {
    if n_queries > n_search {
        return Err(Error::Contract(format!(
            "{n_queries} queries requested from a search set of {n_search}"
        )));
    }
    let mut idx = util::shuffled(n_search, &mut util::rng(seed, salt::QUERIES));
    idx.truncate(n_queries);
    Ok(idx)
}

/// Seed for the query-side noise, shared across levels so that a sweep
/// rescales one perturbation instead of drawing fresh ones.
pub fn noise_seed(spec: &NoiseSpec, seed: u64, query: usize) -> u64 {
    util::mix(query_seed(seed, query as u64) ^ spec.seed, salt::NOISE)
}

/// Scores of the search set for one (possibly perturbed) query image.
pub(crate) fn method_scores(
    ctx: &Context,
    cfg: &PipelineConfig,
    method: Method,
    x: &[f32],
    y_q: usize,
    index: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    match method {
        Method::Tmm => {
            let q = RetrievalQuery::new(x.to_vec(), y_q, false, QuerySource::Train(index))?;
            tmm_search_scores(ctx, &q, cfg, query_seed(seed, index as u64))
        }
        Method::Cosine => baseline_search_scores(ctx, x, Metric::Cosine),
        Method::L2 => baseline_search_scores(ctx, x, Metric::L2),
    }
}

/// Hits for one query, laid out level-major then method.
fn query_hits(
    ctx: &Context,
    cfg: &PipelineConfig,
    spec: &SelfRetrievalSpec,
    seed: u64,
    index: usize,
) -> Result<Vec<bool>> {
    let clean = ctx.search.sample(index);
    let y_q = ctx.search.label(index);
    let duplicates = ctx.search.identical_to(clean);
    let nseed = noise_seed(&spec.noise, seed, index);
    // the clean-query TMM scores serve every level that leaves the query unchanged
    let mut clean_tmm: Option<Vec<f64>> = None;
    let mut hits = Vec::with_capacity(spec.noise.levels.len() * spec.methods.len());
    for &level in &spec.noise.levels {
        let x = perturb(spec.noise.kind, clean, level, nseed)?;
        for &method in &spec.methods {
            let scores = if method == Method::Tmm && x == clean {
                if clean_tmm.is_none() {
                    clean_tmm = Some(method_scores(ctx, cfg, method, &x, y_q, index, seed)?);
                }
                clean_tmm.clone().expect("just filled")
            } else {
                method_scores(ctx, cfg, method, &x, y_q, index, seed)?
            };
            let ranking = top_k(method, &scores, spec.k)?;
            hits.push(ranking.indices.iter().any(|i| duplicates.contains(i)));
        }
    }
    Ok(hits)
}

/// Runs every `(seed, query, level, method)` cell and aggregates hit rates.
///
/// Queries are drawn from the search set. Under TMM every perturbed query
/// gets its own trigger and fine-tuned model; baselines re-embed the
/// perturbed query. A hit on a pixel-identical duplicate counts as success.
pub fn self_retrieval_experiment(
    ctx: &Context,
    cfg: &PipelineConfig,
    spec: &SelfRetrievalSpec,
) -> Result<SelfRetrievalReport> {
    spec.validate()?;
    if spec.k > ctx.search.len() {
        return Err(Error::Contract(format!(
            "k = {} exceeds the search set of {}",
            spec.k,
            ctx.search.len()
        )));
    }
    let (levels, methods) = (&spec.noise.levels, &spec.methods);
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let queries = select_queries(ctx.search.len(), spec.n_queries, seed)?;
        let hits = queries
            .par_iter()
            .map(|&q| query_hits(ctx, cfg, spec, seed, q))
            .collect::<Result<Vec<_>>>()?;
        for (li, &level) in levels.iter().enumerate() {
            for (mi, &method) in methods.iter().enumerate() {
                let cell = li * methods.len() + mi;
                let n_hit = hits.iter().filter(|h| h[cell]).count();
                rows.push(RateRow {
                    method: method.as_str().into(),
                    noise_kind: spec.noise.kind.as_str().into(),
                    noise_level: level,
                    seed,
                    n_queries: queries.len(),
                    k: spec.k,
                    retrieval_rate: n_hit as f64 / queries.len() as f64,
                });
            }
        }
    }
    Ok(SelfRetrievalReport {
        spec: spec.clone(),
        rows,
    })
}
