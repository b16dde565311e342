//! Ablations: trigger type, which layers are fine-tuned, and how many
//! fine-tuning epochs are run.
//!
//! Every cell of a sweep reuses the same queries, noise draws and pipeline
//! seeds, so differences between cells come from the ablated factor alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::data::{AblationRow, Dataset, RateRow};
use crate::error::{Error, Result};
use crate::finetune::{RetrievalQuery, TrainableLayers};
use crate::pipeline::{prepare_query, prepared_search_scores, query_seed, Context, PipelineConfig, TriggerKind};
use crate::retrieval::{top_k, Method};
use crate::robustness::{select_queries, self_retrieval_experiment, NoiseSpec, SelfRetrievalSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub trigger_variants: Vec<TriggerKind>,
    pub layer_sets: Vec<TrainableLayers>,
    pub epoch_list: Vec<usize>,
    /// Query-side noise for the trigger and layer sweeps.
    pub noise: NoiseSpec,
    pub n_queries: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            trigger_variants: TriggerKind::ALL.to_vec(),
            layer_sets: TrainableLayers::ALL.to_vec(),
            epoch_list: vec![1, 2, 5, 10],
            noise: NoiseSpec::default(),
            n_queries: 20,
            k: 1,
            seeds: vec![0],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.bench_spec().validate()?;
        if self.trigger_variants.is_empty() || self.layer_sets.is_empty() || self.epoch_list.is_empty() {
            return Err(Error::Config("ablation sweeps must not be empty".into()));
        }
        if self.epoch_list.contains(&0) {
            return Err(Error::Config("ablation epoch counts must be ≥ 1".into()));
        }
        Ok(())
    }

    fn bench_spec(&self) -> SelfRetrievalSpec {
        SelfRetrievalSpec {
            noise: self.noise.clone(),
            methods: vec![Method::Tmm],
            n_queries: self.n_queries,
            k: self.k,
            seeds: self.seeds.clone(),
        }
    }
}

#[derive(Serialize)]
struct CellProvenance<'a> {
    pipeline: &'a PipelineConfig,
    ablation: &'a AblationConfig,
}

fn keyed(key: String, cell: &PipelineConfig, abl: &AblationConfig, rows: Vec<RateRow>) -> Result<Vec<AblationRow>> {
    let hash = config_hash(&CellProvenance {
        pipeline: cell,
        ablation: abl,
    })?;
    Ok(rows
        .into_iter()
        .map(|row| AblationRow {
            ablation_key: key.clone(),
            row,
            config_hash: hash.clone(),
        })
        .collect())
}

/// Self-retrieval under the configured noise sweep, once per trigger kind.
pub fn run_trigger_ablation(ctx: &Context, base: &PipelineConfig, abl: &AblationConfig) -> Result<Vec<AblationRow>> {
    abl.validate()?;
    let mut out = Vec::new();
    for &kind in &abl.trigger_variants {
        let cell = PipelineConfig {
            trigger_kind: kind,
            ..base.clone()
        };
        let report = self_retrieval_experiment(ctx, &cell, &abl.bench_spec())?;
        out.extend(keyed(format!("trigger={kind}"), &cell, abl, report.rows)?);
    }
    Ok(out)
}

/// Self-retrieval under the configured noise sweep, once per trainable set.
pub fn run_layer_ablation(ctx: &Context, base: &PipelineConfig, abl: &AblationConfig) -> Result<Vec<AblationRow>> {
    abl.validate()?;
    let mut out = Vec::new();
    for &layers in &abl.layer_sets {
        let mut cell = base.clone();
        cell.finetune.trainable = layers;
        let report = self_retrieval_experiment(ctx, &cell, &abl.bench_spec())?;
        out.extend(keyed(format!("layers={}", layers.key()), &cell, abl, report.rows)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epochs: usize,
    pub seed: u64,
    /// Clean test accuracy of the pretrained model minus that of θ',
    /// averaged and maximised over queries.
    pub mean_accuracy_drop: f64,
    pub max_accuracy_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAblation {
    pub rows: Vec<AblationRow>,
    pub accuracy: Vec<EpochAccuracy>,
}

/// Clean-query self-retrieval and clean-accuracy drop per epoch count.
pub fn run_epoch_ablation(
    ctx: &Context,
    base: &PipelineConfig,
    abl: &AblationConfig,
    test: &Dataset,
) -> Result<EpochAblation> {
    abl.validate()?;
    if abl.n_queries > ctx.search.len() || abl.k > ctx.search.len() {
        return Err(Error::Contract(format!(
            "{} queries with k = {} from a search set of {}",
            abl.n_queries,
            abl.k,
            ctx.search.len()
        )));
    }
    let base_acc = ctx.pretrained.accuracy(test.samples(), test.labels())?;
    let clean_level = abl.noise.kind.identity_level();
    let (mut rows, mut accuracy) = (Vec::new(), Vec::new());
    for &epochs in &abl.epoch_list {
        let mut cell = base.clone();
        cell.finetune.epochs = epochs;
        let mut cell_rows = Vec::new();
        for &seed in &abl.seeds {
            let queries = select_queries(ctx.search.len(), abl.n_queries, seed)?;
            let outcomes = queries
                .par_iter()
                .map(|&q| {
                    let query = RetrievalQuery::from_train(&ctx.search, q)?;
                    let prep = prepare_query(ctx, &query, &cell, query_seed(seed, q as u64))?;
                    let ranking = top_k(Method::Tmm, &prepared_search_scores(ctx, &prep)?, abl.k)?;
                    let dups = ctx.search.identical_to(&query.x_q);
                    let hit = ranking.indices.iter().any(|i| dups.contains(i));
                    let acc = prep.tmm.classifier.accuracy(test.samples(), test.labels())?;
                    Ok((hit, base_acc - acc))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = outcomes.len() as f64;
            cell_rows.push(RateRow {
                method: Method::Tmm.as_str().into(),
                noise_kind: abl.noise.kind.as_str().into(),
                noise_level: clean_level,
                seed,
                n_queries: outcomes.len(),
                k: abl.k,
                retrieval_rate: outcomes.iter().filter(|o| o.0).count() as f64 / n,
            });
            accuracy.push(EpochAccuracy {
                epochs,
                seed,
                mean_accuracy_drop: outcomes.iter().map(|o| o.1).sum::<f64>() / n,
                max_accuracy_drop: outcomes.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max),
            });
        }
        rows.extend(keyed(format!("epochs={epochs}"), &cell, abl, cell_rows)?);
    }
    Ok(EpochAblation { rows, accuracy })
}

/// Mean rate of every row carrying `key`.
pub fn mean_rate(rows: &[AblationRow], key: &str) -> Option<f64> {
    let rates: Vec<f64> = rows
        .iter()
        .filter(|r| r.ablation_key == key)
        .map(|r| r.row.retrieval_rate)
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(AblationConfig::default().validate().is_ok());
        let bad = AblationConfig {
            epoch_list: vec![1, 0],
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let empty = AblationConfig {
            trigger_variants: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
    }
}
