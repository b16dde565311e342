use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::autodiff::{AdamHyper, AdamState, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::util::{self, salt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

/// Pretrains every layer with cross-entropy over all `C + 1` outputs.
/// Returns the sample-weighted mean loss of each epoch.
pub fn train_classifier(
    model: &mut Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!(
            "batch_size {} and lr {} must be positive",
            cfg.batch_size, cfg.lr
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let dummy = model.dummy_index();
    if let Some(&y) = data.labels().iter().find(|&&y| y >= dummy) {
        return Err(Error::Data(format!(
            "label {y} collides with or exceeds dummy index {dummy}"
        )));
    }
    let trainable = vec![true; model.num_layers()];
    let mut adam = AdamState::for_params(AdamHyper::with_lr(cfg.lr), &model.params());
    let mut rng = util::rng(seed, salt::SHUFFLE);
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let order = util::shuffled(data.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.samples().select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let (logits, vars) = model.record_on_tape(&mut tape, xv, 0, &trainable)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            total += f64::from(tape.value(loss).item()) * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<_> = vars
                .iter()
                .flatten()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
                .collect();
            let grefs: Vec<_> = g.iter().collect();
            adam.step(&mut model.params_mut(), &grefs)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Classifier, Dataset) {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 100,
            ..Default::default()
        };
        let split = generate_synthetic(&spec, 1).unwrap();
        let model = init_model(ModelConfig {
            num_classes: 3,
            hidden_widths: vec![32, 32],
            ..Default::default()
        })
        .unwrap();
        (model, split.train)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (mut m, ds) = setup();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_classifier(&mut m, &ds, &cfg, 0).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn learns_synthetic_classes() {
        let (mut m, ds) = setup();
        let hist = train_classifier(&mut m, &ds, &TrainConfig::default(), 0).unwrap();
        assert_eq!(hist.len(), 30);
        assert!(hist.last().unwrap() < &hist[0]);
        assert!(m.accuracy(ds.samples(), ds.labels()).unwrap() >= 0.95);
    }

    #[test]
    fn rejects_dummy_labels() {
        let (mut m, _) = setup();
        let spec = SyntheticSpec {
            num_classes: 4,
            samples_per_class: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 0).unwrap().train;
        assert!(matches!(
            train_classifier(&mut m, &ds, &TrainConfig::default(), 0),
            Err(Error::Data(_))
        ));
    }
}
