//! Ranking exemplars for a query.
//!
//! - `tmm`: probability of the dummy class after blending each exemplar with
//!   the query's trigger, under the fine-tuned model.
//! - `cosine` / `l2`: penultimate-layer features of the pretrained model.
//!
//! Scores are sorted descending with ties going to the lower index; `l2`
//! scores are negated distances so that the ordering rule is shared.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::finetune::TmmModel;
use crate::model::Classifier;
use crate::trigger::{apply_trigger, Trigger};

/// Rows scored per parallel task. Scoring is row-independent, so chunking
/// does not affect the result.
const SCORE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tmm,
    Cosine,
    L2,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tmm, Method::Cosine, Method::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tmm => "tmm",
            Method::Cosine => "cosine",
            Method::L2 => "l2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tmm" => Ok(Method::Tmm),
            "cosine" => Ok(Method::Cosine),
            "l2" => Ok(Method::L2),
            other => Err(Error::Config(format!("unknown retrieval method {other:?}"))),
        }
    }
}

/// Feature-space metric for the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    L2,
}

impl From<Metric> for Method {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Cosine => Method::Cosine,
            Metric::L2 => Method::L2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub method: Method,
    pub k: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Ranking {
    pub fn top1(&self) -> usize {
        self.indices[0]
    }
}

/// Top `k` of `scores`: descending, lower index first on ties.
pub fn top_k(method: Method, scores: &[f64], k: usize) -> Result<Ranking> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "k = {k} must be in 1..={}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ranking scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(Ranking {
        method,
        k,
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

fn par_rows<F>(x: &Tensor, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
{
    let d = x.cols();
    let chunks: Vec<Result<Vec<f64>>> = x
        .data()
        .par_chunks(SCORE_CHUNK * d)
        .map(|c| f(&Tensor::new(vec![c.len() / d, d], c.to_vec())?))
        .collect();
    let mut out = Vec::with_capacity(x.rows());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `P(dummy | θ', apply_trigger(x_i))` for every exemplar.
pub fn tmm_scores(tmm: &TmmModel, trig: &Trigger, exemplars: &Tensor) -> Result<Vec<f64>> {
    par_rows(exemplars, |chunk| {
        tmm.dummy_probability(&apply_trigger(chunk, trig)?)
    })
}

pub fn tmm_rank(tmm: &TmmModel, trig: &Trigger, exemplars: &Dataset, k: usize) -> Result<Ranking> {
    top_k(Method::Tmm, &tmm_scores(tmm, trig, exemplars.samples())?, k)
}

/// Penultimate features of every exemplar, computed in parallel.
pub fn features(model: &Classifier, x: &Tensor) -> Result<Tensor> {
    let h = *model.config().hidden_widths.last().expect("validated non-empty");
    let flat = par_rows(x, |chunk| {
        Ok(model
            .penultimate_features(chunk)?
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect())
    })?;
    Tensor::new(vec![x.rows(), h], flat.into_iter().map(|v| v as f32).collect())
}

/// Cosine similarity, with 0 whenever either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Baseline scores of a query feature vector against precomputed exemplar
/// features: similarity for cosine, negated distance for l2.
pub fn feature_scores(exemplar_feats: &Tensor, query_feat: &[f32], metric: Metric) -> Vec<f64> {
    (0..exemplar_feats.rows())
        .map(|i| {
            let e = exemplar_feats.row_slice(i);
            match metric {
                Metric::Cosine => cosine_similarity(e, query_feat),
                Metric::L2 => -euclidean(e, query_feat),
            }
        })
        .collect()
}

pub fn feature_rank(
    model: &Classifier,
    exemplars: &Dataset,
    x_q: &[f32],
    metric: Metric,
    k: usize,
) -> Result<Ranking> {
    let feats = features(model, exemplars.samples())?;
    let q = model.penultimate_features(&Tensor::row(x_q))?;
    top_k(metric.into(), &feature_scores(&feats, q.data(), metric), k)
}
