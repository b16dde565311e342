//! The per-query procedure shared by the CLI, the benchmarks and the
//! ablations: build a trigger for the query, fine-tune, then rank.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::Result;
use crate::finetune::{
    finetune_from_activations, first_trainable, FinetuneConfig, PrefixActivations, RetrievalQuery,
    TmmModel,
};
use crate::model::{estimate_fisher, Classifier, FisherDiag};
use crate::retrieval::{feature_scores, features, tmm_scores, top_k, Method, Metric, Ranking};
use crate::trigger::{
    apply_trigger, make_fixed_patch_trigger, omega_for, optimize_patch_trigger,
    optimize_query_trigger, Trigger, TriggerHyper,
};
use crate::util::{self, salt};

/// How the per-query trigger is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Full-image query-local trigger.
    #[default]
    Optimized,
    /// Constant maximum-intensity corner patch.
    FixedPatch,
    /// Corner patch with optimized values.
    OptPatch,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 3] = [TriggerKind::Optimized, TriggerKind::FixedPatch, TriggerKind::OptPatch];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerKind::Optimized => "optimized",
            TriggerKind::FixedPatch => "fixed_patch",
            TriggerKind::OptPatch => "opt_patch",
        }
    }
}

impl fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub trigger: TriggerHyper,
    pub trigger_kind: TriggerKind,
    pub finetune: FinetuneConfig,
}

/// Everything that stays fixed across queries: the pretrained model, its
/// Fisher diagonal, the fine-tuning data with its penultimate features, and
/// the search set with its penultimate features.
#[derive(Clone, Debug)]
pub struct Context {
    pub pretrained: Arc<Classifier>,
    pub fisher: Arc<FisherDiag>,
    pub finetune_data: Arc<Dataset>,
    pub finetune_features: Arc<Tensor>,
    pub search: Arc<Dataset>,
    pub search_features: Arc<Tensor>,
}

impl Context {
    /// Estimates the Fisher diagonal on `train` and uses `train` as both the
    /// fine-tuning data and the search set.
    pub fn new(pretrained: Classifier, train: Dataset, cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let train = Arc::new(train);
        let fisher = estimate_fisher(&pretrained, &train, cfg.finetune.fisher_samples, seed)?;
        let feats = Arc::new(features(&pretrained, train.samples())?);
        Ok(Self {
            pretrained: Arc::new(pretrained),
            fisher: Arc::new(fisher),
            finetune_data: train.clone(),
            finetune_features: feats.clone(),
            search: train,
            search_features: feats,
        })
    }

    /// Same model, Fisher and fine-tuning data with a different search set.
    pub fn with_search(&self, search: Dataset) -> Result<Self> {
        let search_features = features(&self.pretrained, search.samples())?;
        Ok(Self {
            search: Arc::new(search),
            search_features: Arc::new(search_features),
            ..self.clone()
        })
    }

    fn search_is_finetune_data(&self) -> bool {
        Arc::ptr_eq(&self.search, &self.finetune_data)
    }
}

/// Seed for one query's trigger and fine-tuning, derived from the run seed
/// and the query's identity so results do not depend on evaluation order.
pub fn query_seed(seed: u64, query_id: u64) -> u64 {
    util::mix(seed ^ query_id.wrapping_mul(0x2545_F491_4F6C_DD1D), salt::QUERIES)
}

pub fn build_trigger(
    model: &Classifier,
    x_q: &[f32],
    kind: TriggerKind,
    hyper: &TriggerHyper,
    seed: u64,
) -> Result<Trigger> {
    match kind {
        TriggerKind::Optimized => optimize_query_trigger(model, x_q, hyper, seed),
        TriggerKind::OptPatch => optimize_patch_trigger(model, x_q, hyper, seed),
        TriggerKind::FixedPatch => {
            make_fixed_patch_trigger(model.config().input_extents)?.with_omega(omega_for(x_q, hyper.omega_floor))
        }
    }
}

/// Result of preparing one query.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub trigger: Trigger,
    pub tmm: TmmModel,
    /// Triggered fine-tuning data entering the first trainable layer. Layers
    /// before it are frozen, so these are also the fine-tuned model's
    /// activations.
    data_trig: Tensor,
    from: usize,
}

/// Trigger plus fine-tuned model for one query.
pub fn prepare_query(
    ctx: &Context,
    query: &RetrievalQuery,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Prepared> {
    let model = &ctx.pretrained;
    let trigger = build_trigger(model, &query.x_q, cfg.trigger_kind, &cfg.trigger, seed)?;
    let from = first_trainable(model, &cfg.finetune);
    let data = ctx.finetune_data.samples();
    let data_trig = model.activations_into(from, &apply_trigger(data, &trigger)?)?;
    let computed;
    let data_clean = if from == model.final_layer_index() {
        &*ctx.finetune_features
    } else {
        computed = model.activations_into(from, data)?;
        &computed
    };
    let xq = Tensor::row(&query.x_q);
    let acts = PrefixActivations {
        from,
        query_trig: model.activations_into(from, &apply_trigger(&xq, &trigger)?)?,
        query_clean: model.activations_into(from, &xq)?,
        data_trig: &data_trig,
        data_clean,
    };
    let tmm = finetune_from_activations(
        model.clone(),
        ctx.fisher.clone(),
        &acts,
        ctx.finetune_data.labels(),
        query,
        &trigger,
        &cfg.finetune,
        seed,
    )?;
    Ok(Prepared {
        trigger,
        tmm,
        data_trig,
        from,
    })
}

/// Trigger-confidence scores of every search exemplar under a prepared query.
pub fn prepared_search_scores(ctx: &Context, prep: &Prepared) -> Result<Vec<f64>> {
    if !ctx.search_is_finetune_data() {
        return tmm_scores(&prep.tmm, &prep.trigger, ctx.search.samples());
    }
    let clf = &prep.tmm.classifier;
    let logits = clf.forward_range(prep.from, clf.num_layers(), &prep.data_trig)?;
    let p = crate::autodiff::softmax(&logits);
    let d = clf.dummy_index();
    Ok((0..p.rows()).map(|i| f64::from(p.row_slice(i)[d])).collect())
}

/// Trigger-confidence scores of every search exemplar for `query`.
pub fn tmm_search_scores(
    ctx: &Context,
    query: &RetrievalQuery,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    prepared_search_scores(ctx, &prepare_query(ctx, query, cfg, seed)?)
}

/// Baseline scores of every search exemplar for a query image.
pub fn baseline_search_scores(ctx: &Context, x_q: &[f32], metric: Metric) -> Result<Vec<f64>> {
    let q = ctx.pretrained.penultimate_features(&Tensor::row(x_q))?;
    Ok(feature_scores(&ctx.search_features, q.data(), metric))
}

/// Top-`k` ranking of the search set by `method`.
pub fn retrieve(
    ctx: &Context,
    query: &RetrievalQuery,
    method: Method,
    k: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Ranking> {
    let scores = match method {
        Method::Tmm => tmm_search_scores(ctx, query, cfg, seed)?,
        Method::Cosine => baseline_search_scores(ctx, &query.x_q, Metric::Cosine)?,
        Method::L2 => baseline_search_scores(ctx, &query.x_q, Metric::L2)?,
    };
    top_k(method, &scores, k)
}
