use rayon::prelude::*;

use super::Classifier;
use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::util::{self, salt};

/// Samples are processed in fixed-size chunks whose partial sums are added in
/// chunk order, so the result does not depend on the thread count.
const CHUNK: usize = 32;

/// Diagonal empirical Fisher information, one tensor per parameter in
/// [`Classifier::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub diag: Vec<Tensor>,
    pub samples: usize,
}

impl FisherDiag {
    pub fn zeros_like(model: &Classifier) -> Self {
        Self {
            diag: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            samples: 0,
        }
    }
}

/// Mean over up to `n_samples` distinct training pairs of the squared
/// gradient of `-log p(y | x)`, using the stored label `y`.
pub fn estimate_fisher(
    model: &Classifier,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(Error::Data("cannot estimate Fisher on an empty dataset".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("fisher_samples must be at least 1".into()));
    }
    let n = n_samples.min(data.len());
    let mut picked = util::shuffled(data.len(), &mut util::rng(seed, salt::FISHER));
    picked.truncate(n);

    let trainable = vec![true; model.num_layers()];
    let partials: Vec<Result<Vec<Vec<f64>>>> = picked
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc: Vec<Vec<f64>> =
                model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in chunk {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::row(data.sample(i)));
                let (logits, vars) = model.record_on_tape(&mut tape, x, 0, &trainable)?;
                let loss = tape.softmax_cross_entropy(logits, &[data.label(i)])?;
                let grads = tape.backward(loss)?;
                let handles = vars.iter().flatten().flat_map(|&(w, b)| [w, b]);
                for (slot, v) in acc.iter_mut().zip(handles) {
                    if let Some(g) = grads.get(v) {
                        for (a, &gi) in slot.iter_mut().zip(g.data()) {
                            *a += f64::from(gi) * f64::from(gi);
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    for part in partials {
        for (t, p) in total.iter_mut().zip(part?) {
            for (a, b) in t.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    let diag = model
        .params()
        .iter()
        .zip(total)
        .map(|(p, t)| {
            let data = t.into_iter().map(|v| (v / n as f64) as f32).collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    Ok(FisherDiag { diag, samples: n })
}
