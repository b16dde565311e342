//! Dense ReLU classifier with `C + 1` outputs. Output `C` is the dummy class
//! that fine-tuning later turns into the backdoor target; pretraining keeps it
//! in the softmax but never uses it as a label, which pushes it down.

mod checkpoint;
mod fisher;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{decode_tensor, f32_payload, read_container, records, write_container, TensorRecord};
pub use fisher::{estimate_fisher, FisherDiag};
pub use train::{train_classifier, TrainConfig};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, softmax, Tape, Tensor, Var};
use crate::data::Extents;
use crate::error::{Error, Result};
use crate::util::{self, salt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_extents: Extents,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_extents: Extents::grayscale(8),
            hidden_widths: vec![128, 1024],
            num_classes: 4,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Index of the dummy output; always equal to the class count.
    pub fn dummy_index(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_extents.numel()
    }

    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(Error::Config(format!(
                "input extents {:?} are empty",
                self.input_extents
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "hidden widths {:?} must be non-empty and positive",
                self.hidden_widths
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden_widths);
        widths.push(self.num_outputs());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine map `x·W + b` with `W` stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    layers: Vec<Layer>,
}

/// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases.
pub fn init_model(config: ModelConfig) -> Result<Classifier> {
    config.validate()?;
    let mut rng = util::rng(config.seed, salt::INIT);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            Layer {
                weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape matches"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(Classifier { config, layers })
}

/// Per-layer parameter handles on a tape; `None` for layers recorded as
/// constants.
pub type LayerVars = Vec<Option<(Var, Var)>>;

impl Classifier {
    /// Builds a classifier from explicit layers, checking that they chain.
    pub fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim(
                "classifier",
                format!("{} layers for config expecting {}", layers.len(), dims.len()),
            ));
        }
        for (i, ((fi, fo), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [*fi, *fo] || l.bias.shape() != [*fo] {
                return Err(Error::dim(
                    "classifier",
                    format!(
                        "layer {i}: weight {:?} bias {:?}, expected [{fi}, {fo}] / [{fo}]",
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                ));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite("classifier parameters"));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn final_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dummy_index(&self) -> usize {
        self.config.dummy_index()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn check_width(&self, layer: usize, batch: &Tensor) -> Result<()> {
        let want = self.layers[layer].weight.rows();
        if batch.shape().len() != 2 || batch.cols() != want {
            return Err(Error::dim(
                "classifier forward",
                format!("batch {:?} entering layer {layer} of width {want}", batch.shape()),
            ));
        }
        Ok(())
    }

    fn apply_layer(&self, i: usize, x: &Tensor) -> Tensor {
        let layer = &self.layers[i];
        let mut out = matmul(x, &layer.weight).expect("widths checked");
        let b = layer.bias.data();
        let relu = i + 1 < self.layers.len();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
                if relu {
                    *v = v.max(0.0);
                }
            }
        }
        out
    }

    /// Runs layers `from..to` on activations entering layer `from`.
    pub fn forward_range(&self, from: usize, to: usize, acts: &Tensor) -> Result<Tensor> {
        if from > to || to > self.layers.len() {
            return Err(Error::Index(format!("layer range {from}..{to}")));
        }
        if from == to {
            return Ok(acts.clone());
        }
        self.check_width(from, acts)?;
        let mut x = self.apply_layer(from, acts);
        for i in from + 1..to {
            x = self.apply_layer(i, &x);
        }
        x.ensure_finite("classifier forward")
    }

    /// Activations entering layer `layer` (0 is the raw input).
    pub fn activations_into(&self, layer: usize, batch: &Tensor) -> Result<Tensor> {
        self.forward_range(0, layer, batch)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_range(0, self.layers.len(), batch)
    }

    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(batch)?))
    }

    /// Activations entering the final affine layer.
    pub fn penultimate_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.activations_into(self.final_layer_index(), batch)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows())
            .map(|i| argmax(logits.row_slice(i)))
            .collect())
    }

    /// Fraction of samples whose argmax over all `C + 1` outputs equals the label.
    pub fn accuracy(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Puts the weights of layers `from..` on `tape`, as parameters where
    /// `trainable[i]` is set and as constants otherwise. Entry `i - from` of
    /// the result belongs to layer `i`.
    pub fn layer_leaves(&self, tape: &mut Tape, from: usize, trainable: &[bool]) -> Vec<(Var, Var)> {
        self.layers[from..]
            .iter()
            .enumerate()
            .map(|(j, layer)| {
                let rg = trainable.get(from + j).copied().unwrap_or(false);
                (
                    tape.leaf(layer.weight.clone(), rg),
                    tape.leaf(layer.bias.clone(), rg),
                )
            })
            .collect()
    }

    /// Forward pass on `tape` from activations entering layer `from`, using
    /// leaves created by [`Classifier::layer_leaves`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        from: usize,
        leaves: &[(Var, Var)],
    ) -> Result<Var> {
        let mut x = input;
        for (j, &(w, b)) in leaves.iter().enumerate() {
            x = tape.matmul(x, w)?;
            x = tape.add_row(x, b)?;
            if from + j + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Records layers `from..` on `tape`, starting from `input` (activations
    /// entering layer `from`). Layers with `trainable[i]` become parameters.
    pub fn record_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        from: usize,
        trainable: &[bool],
    ) -> Result<(Var, LayerVars)> {
        let leaves = self.layer_leaves(tape, from, trainable);
        let out = self.forward_on_tape(tape, input, from, &leaves)?;
        let mut vars: LayerVars = vec![None; self.layers.len()];
        for (j, &(w, b)) in leaves.iter().enumerate() {
            if tape.requires_grad(w) {
                vars[from + j] = Some((w, b));
            }
        }
        Ok((out, vars))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
