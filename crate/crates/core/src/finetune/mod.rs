//! Backdoor fine-tuning: teach the classifier to send the triggered query to
//! the dummy class while every other input, triggered or not, keeps its label.
//!
//! Per minibatch the loss is
//!
//! ```text
//! CE(f(x_q^t), dummy) + CE(f(x_q), y_q) + mean CE(f(x_i^t), y_i) + mean CE(f(x_i), y_i)
//!     + (λ/2) Σ F (θ − θ*)²
//! ```
//!
//! The two query terms are added to every minibatch. Only the layers selected
//! by [`TrainableLayers`] are updated; activations entering the first of them
//! are computed once up front.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, AdamState, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier, FisherDiag};
use crate::trigger::{apply_trigger, Trigger, TriggerStats};
use crate::util::{self, salt};

/// Which affine layers fine-tuning may change. The final layer is always
/// included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableLayers {
    #[default]
    Final,
    FinalAndLastHidden,
    FinalAndFirstHidden,
}

impl TrainableLayers {
    pub const ALL: [TrainableLayers; 3] = [
        TrainableLayers::Final,
        TrainableLayers::FinalAndLastHidden,
        TrainableLayers::FinalAndFirstHidden,
    ];

    /// Per-layer flags for a model with `num_layers` affine layers.
    pub fn mask(self, num_layers: usize) -> Vec<bool> {
        let mut m = vec![false; num_layers];
        m[num_layers - 1] = true;
        match self {
            TrainableLayers::Final => {}
            TrainableLayers::FinalAndLastHidden if num_layers >= 2 => m[num_layers - 2] = true,
            TrainableLayers::FinalAndFirstHidden if num_layers >= 2 => m[0] = true,
            _ => {}
        }
        m
    }

    pub fn key(self) -> &'static str {
        match self {
            TrainableLayers::Final => "final",
            TrainableLayers::FinalAndLastHidden => "final+last_hidden",
            TrainableLayers::FinalAndFirstHidden => "final+first_hidden",
        }
    }
}

/// Multipliers on the four cross-entropy terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub query_trigger: f32,
    pub query_clean: f32,
    pub batch_trigger: f32,
    pub batch_clean: f32,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            query_trigger: 1.0,
            query_clean: 1.0,
            batch_trigger: 1.0,
            batch_clean: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f32,
    pub epochs: usize,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub ewc_lambda: f32,
    /// Capped at the dataset size.
    pub fisher_samples: usize,
    pub trainable: TrainableLayers,
    pub term_weights: TermWeights,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 1,
            batch_size: 1,
            ewc_lambda: 100.0,
            fisher_samples: 1000,
            trainable: TrainableLayers::Final,
            term_weights: TermWeights::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.fisher_samples == 0 {
            return Err(Error::Config(
                "fine-tune epochs, batch_size and fisher_samples must be ≥ 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.ewc_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "fine-tune lr {} must be > 0 and ewc_lambda {} ≥ 0",
                self.lr, self.ewc_lambda
            )));
        }
        Ok(())
    }
}

/// Where a query came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "split", content = "index")]
pub enum QuerySource {
    Train(usize),
    Test(usize),
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalQuery {
    pub x_q: Vec<f32>,
    pub y_q: usize,
    /// Set when `y_q` is the pretrained model's prediction rather than a label.
    pub pseudo_label: bool,
    pub source: QuerySource,
}

impl RetrievalQuery {
    pub fn new(x_q: Vec<f32>, y_q: usize, pseudo_label: bool, source: QuerySource) -> Result<Self> {
        if let Some(v) = x_q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("query pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            x_q,
            y_q,
            pseudo_label,
            source,
        })
    }

    /// A training exemplar with its stored label.
    pub fn from_train(data: &Dataset, index: usize) -> Result<Self> {
        if index >= data.len() {
            return Err(Error::Index(format!("query {index} of {}", data.len())));
        }
        Self::new(data.sample(index).to_vec(), data.label(index), false, QuerySource::Train(index))
    }

    /// Any input, labelled by the pretrained model's argmax over real classes.
    pub fn pseudo_labelled(model: &Classifier, x_q: Vec<f32>, source: QuerySource) -> Result<Self> {
        let logits = model.logits(&Tensor::row(&x_q))?;
        let y = argmax(&logits.data()[..model.config().num_classes]);
        Self::new(x_q, y, true, source)
    }

    pub fn from_test(model: &Classifier, data: &Dataset, index: usize) -> Result<Self> {
        if index >= data.len() {
            return Err(Error::Index(format!("query {index} of {}", data.len())));
        }
        Self::pseudo_labelled(model, data.sample(index).to_vec(), QuerySource::Test(index))
    }
}

/// The five loss terms and their sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub query_trigger: f64,
    pub query_clean: f64,
    pub batch_trigger: f64,
    pub batch_clean: f64,
    pub ewc: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmmProvenance {
    pub query: QuerySource,
    pub y_q: usize,
    pub pseudo_label: bool,
    pub trigger: TriggerStats,
    pub trainable: TrainableLayers,
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
}

/// A fine-tuned classifier together with the reference it was tied to.
#[derive(Clone, Debug)]
pub struct TmmModel {
    pub classifier: Classifier,
    pub reference: Arc<Classifier>,
    pub fisher: Arc<FisherDiag>,
    pub provenance: TmmProvenance,
}

impl TmmModel {
    pub fn dummy_index(&self) -> usize {
        self.classifier.dummy_index()
    }

    /// `P(dummy | θ', x)` for every row of `x`.
    pub fn dummy_probability(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = self.classifier.predict_proba(x)?;
        let d = self.dummy_index();
        Ok((0..p.rows()).map(|i| f64::from(p.row_slice(i)[d])).collect())
    }
}

/// `(λ/2) Σ F (θ − θ*)²` over all parameters.
pub fn ewc_penalty(theta: &Classifier, reference: &Classifier, fisher: &FisherDiag, lambda: f32) -> Result<f64> {
    let (p, r) = (theta.params(), reference.params());
    if p.len() != r.len() || p.len() != fisher.diag.len() {
        return Err(Error::dim(
            "ewc_penalty",
            format!("{} / {} / {} parameter tensors", p.len(), r.len(), fisher.diag.len()),
        ));
    }
    let mut s = 0.0f64;
    for ((a, b), f) in p.iter().zip(&r).zip(&fisher.diag) {
        if a.shape() != b.shape() || a.shape() != f.shape() {
            return Err(Error::dim(
                "ewc_penalty",
                format!("{:?} / {:?} / {:?}", a.shape(), b.shape(), f.shape()),
            ));
        }
        for ((&x, &y), &fi) in a.data().iter().zip(b.data()).zip(f.data()) {
            s += f64::from(fi) * (f64::from(x) - f64::from(y)).powi(2);
        }
    }
    Ok(f64::from(lambda) / 2.0 * s)
}

/// Activations entering layer `from` for the four input groups of a batch.
struct Groups<'a> {
    query_trig: &'a Tensor,
    query_clean: &'a Tensor,
    batch_trig: Tensor,
    batch_clean: Tensor,
    labels: Vec<usize>,
}

struct Recorded {
    loss: Var,
    terms: [Var; 5],
    /// Parameter leaves for each trainable layer, in layer order.
    params: Vec<(Var, Var)>,
}

fn record_loss(
    tape: &mut Tape,
    model: &Classifier,
    reference: &Classifier,
    fisher: &FisherDiag,
    from: usize,
    trainable: &[bool],
    g: &Groups<'_>,
    y_q: usize,
    cfg: &FinetuneConfig,
) -> Result<Recorded> {
    let leaves = model.layer_leaves(tape, from, trainable);
    let dummy = model.dummy_index();
    let ce = |tape: &mut Tape, x: &Tensor, targets: &[usize]| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let logits = model.forward_on_tape(tape, xv, from, &leaves)?;
        tape.softmax_cross_entropy(logits, targets)
    };
    let qt = ce(tape, g.query_trig, &[dummy])?;
    let qc = ce(tape, g.query_clean, &[y_q])?;
    let bt = ce(tape, &g.batch_trig, &g.labels)?;
    let bc = ce(tape, &g.batch_clean, &g.labels)?;

    let mut ewc: Option<Var> = None;
    let mut params = Vec::new();
    for (j, &(w, b)) in leaves.iter().enumerate() {
        if !tape.requires_grad(w) {
            continue;
        }
        params.push((w, b));
        let layer = from + j;
        for (v, k) in [(w, 2 * layer), (b, 2 * layer + 1)] {
            let star = tape.constant(reference.params()[k].clone());
            let f = tape.constant(fisher.diag[k].clone());
            let d = tape.sub(v, star)?;
            let sq = tape.mul(d, d)?;
            let weighted = tape.mul(sq, f)?;
            let s = tape.sum(weighted)?;
            ewc = Some(match ewc {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let ewc = match ewc {
        Some(e) => tape.scale(e, cfg.ewc_lambda / 2.0)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let tw = &cfg.term_weights;
    let mut loss = tape.scale(qt, tw.query_trigger)?;
    for (v, w) in [(qc, tw.query_clean), (bt, tw.batch_trigger), (bc, tw.batch_clean)] {
        let scaled = tape.scale(v, w)?;
        loss = tape.add(loss, scaled)?;
    }
    loss = tape.add(loss, ewc)?;
    Ok(Recorded {
        loss,
        terms: [qt, qc, bt, bc, ewc],
        params,
    })
}

fn breakdown(tape: &Tape, rec: &Recorded) -> LossBreakdown {
    let v = |x: Var| f64::from(tape.value(x).item());
    LossBreakdown {
        query_trigger: v(rec.terms[0]),
        query_clean: v(rec.terms[1]),
        batch_trigger: v(rec.terms[2]),
        batch_clean: v(rec.terms[3]),
        ewc: v(rec.terms[4]),
        total: v(rec.loss),
    }
}

fn check_labels(labels: &[usize], dummy: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= dummy) {
        return Err(Error::Data(format!(
            "label {y} is not a real class (dummy index {dummy})"
        )));
    }
    Ok(())
}

/// Loss of `model` on one batch with every term reported. EWC is evaluated
/// over all parameters.
pub fn tmm_batch_loss(
    model: &Classifier,
    batch_x: &Tensor,
    batch_y: &[usize],
    query: &RetrievalQuery,
    trig: &Trigger,
    reference: &Classifier,
    fisher: &FisherDiag,
    lambda: f32,
) -> Result<LossBreakdown> {
    check_labels(batch_y, model.dummy_index())?;
    check_labels(&[query.y_q], model.dummy_index())?;
    let xq = Tensor::row(&query.x_q);
    let xqt = apply_trigger(&xq, trig)?;
    let groups = Groups {
        query_trig: &xqt,
        query_clean: &xq,
        batch_trig: apply_trigger(batch_x, trig)?,
        batch_clean: batch_x.clone(),
        labels: batch_y.to_vec(),
    };
    let cfg = FinetuneConfig {
        ewc_lambda: lambda,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let trainable = vec![false; model.num_layers()];
    let rec = record_loss(&mut tape, model, reference, fisher, 0, &trainable, &groups, query.y_q, &cfg)?;
    let mut b = breakdown(&tape, &rec);
    b.ewc = ewc_penalty(model, reference, fisher, lambda)?;
    b.total = b.query_trigger + b.query_clean + b.batch_trigger + b.batch_clean + b.ewc;
    Ok(b)
}

/// Inputs to fine-tuning, already pushed through the frozen prefix: rows
/// are activations entering layer `from`, the first trainable layer.
#[derive(Clone, Debug)]
pub struct PrefixActivations<'a> {
    pub from: usize,
    pub query_trig: Tensor,
    pub query_clean: Tensor,
    pub data_trig: &'a Tensor,
    pub data_clean: &'a Tensor,
}

/// First layer that fine-tuning with `cfg` may change.
pub fn first_trainable(model: &Classifier, cfg: &FinetuneConfig) -> usize {
    cfg.trainable
        .mask(model.num_layers())
        .iter()
        .position(|&t| t)
        .expect("final layer is always trainable")
}

/// Fine-tunes a copy of `reference` for one query and trigger.
pub fn finetune_tmm(
    reference: Arc<Classifier>,
    fisher: Arc<FisherDiag>,
    data: &Dataset,
    query: &RetrievalQuery,
    trig: &Trigger,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TmmModel> {
    let from = first_trainable(&reference, cfg);
    let xq = Tensor::row(&query.x_q);
    let data_clean = reference.activations_into(from, data.samples())?;
    let data_trig = reference.activations_into(from, &apply_trigger(data.samples(), trig)?)?;
    let acts = PrefixActivations {
        from,
        query_trig: reference.activations_into(from, &apply_trigger(&xq, trig)?)?,
        query_clean: reference.activations_into(from, &xq)?,
        data_trig: &data_trig,
        data_clean: &data_clean,
    };
    finetune_from_activations(reference, fisher, &acts, data.labels(), query, trig, cfg, seed)
}

/// [`finetune_tmm`] on precomputed prefix activations.
pub fn finetune_from_activations(
    reference: Arc<Classifier>,
    fisher: Arc<FisherDiag>,
    acts: &PrefixActivations<'_>,
    labels: &[usize],
    query: &RetrievalQuery,
    trig: &Trigger,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TmmModel> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Data("fine-tuning needs a non-empty dataset".into()));
    }
    let dummy = reference.dummy_index();
    check_labels(labels, dummy)?;
    check_labels(&[query.y_q], dummy)?;
    let trainable = cfg.trainable.mask(reference.num_layers());
    let from = acts.from;
    if from != first_trainable(&reference, cfg) || acts.data_trig.rows() != labels.len() || acts.data_clean.rows() != labels.len() {
        return Err(Error::dim(
            "finetune activations",
            format!(
                "activations entering layer {from} for {} / {} rows with {} labels",
                acts.data_trig.rows(),
                acts.data_clean.rows(),
                labels.len()
            ),
        ));
    }
    let (a_qt, a_q, a_trig, a_clean) = (&acts.query_trig, &acts.query_clean, acts.data_trig, acts.data_clean);

    let mut model = (*reference).clone();
    let trainable_idx: Vec<usize> = (0..model.num_layers()).filter(|&i| trainable[i]).collect();
    let shapes: Vec<&[usize]> = trainable_idx
        .iter()
        .flat_map(|&i| {
            let l = &reference.layers()[i];
            [l.weight.shape(), l.bias.shape()]
        })
        .collect();
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.lr), &shapes);
    let batch = cfg.batch_size.min(labels.len());
    let mut rng = util::rng(seed, salt::FINETUNE);
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let order = util::shuffled(labels.len(), &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(batch) {
            let groups = Groups {
                query_trig: a_qt,
                query_clean: a_q,
                batch_trig: a_trig.select_rows(idx)?,
                batch_clean: a_clean.select_rows(idx)?,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            };
            let mut tape = Tape::new();
            let rec = record_loss(&mut tape, &model, &reference, &fisher, from, &trainable, &groups, query.y_q, cfg)?;
            total += f64::from(tape.value(rec.loss).item());
            steps += 1;
            let grads = tape.backward(rec.loss)?;
            let g: Vec<Tensor> = rec
                .params
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
                .collect();
            let grefs: Vec<&Tensor> = g.iter().collect();
            let mut params: Vec<&mut Tensor> = model
                .layers_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| trainable[*i])
                .flat_map(|(_, l)| [&mut l.weight, &mut l.bias])
                .collect();
            adam.step(&mut params, &grefs)?;
        }
        history.push(total / steps as f64);
    }

    Ok(TmmModel {
        classifier: model,
        reference,
        fisher,
        provenance: TmmProvenance {
            query: query.source.clone(),
            y_q: query.y_q,
            pseudo_label: query.pseudo_label,
            trigger: trig.stats.clone(),
            trainable: cfg.trainable,
            loss_history: history,
        },
    })
}
