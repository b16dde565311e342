use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Extents};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::util::{self, salt};

/// Prototype-plus-jitter image classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Images are `side × side`, one channel.
    pub side: usize,
    pub prototype_seed: u64,
    pub jitter: f32,
    pub samples_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            side: 8,
            prototype_seed: 0,
            jitter: 0.08,
            samples_per_class: 250,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::Config(format!("side {} < 4", self.side)));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::Config(format!("jitter {} must be > 0", self.jitter)));
        }
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "need at least two classes and one sample per class".into(),
            ));
        }
        Ok(())
    }

    pub fn extents(&self) -> Extents {
        Extents::grayscale(self.side)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub prototypes: Tensor,
}

/// Draws one prototype per class, jitters it into samples, and splits 80/20
/// after a seeded shuffle. A pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSplit> {
    spec.validate()?;
    let d = spec.extents().numel();
    let c = spec.num_classes;

    let mut proto_rng = util::rng(spec.prototype_seed ^ seed, salt::PROTOTYPE);
    let prototypes: Vec<f32> = (0..c * d).map(|_| proto_rng.random::<f32>()).collect();

    let normal = Normal::new(0.0f32, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let mut jitter_rng = util::rng(seed, salt::JITTER);
    let total = c * spec.samples_per_class;
    let mut rows = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for class in 0..c {
        let proto = &prototypes[class * d..(class + 1) * d];
        for _ in 0..spec.samples_per_class {
            rows.extend(
                proto
                    .iter()
                    .map(|&p| (p + normal.sample(&mut jitter_rng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
    }

    let order = util::shuffled(total, &mut util::rng(seed, salt::SPLIT));
    let n_train = total * 4 / 5;
    let take = |idx: &[usize], name: &str| -> Result<Dataset> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&rows[i * d..(i + 1) * d]);
        }
        Dataset::new(
            Tensor::new(vec![idx.len(), d], data)?,
            idx.iter().map(|&i| labels[i]).collect(),
            spec.extents(),
            c,
            format!("synthetic {name} (seed {seed}, {spec:?})"),
        )
    };
    Ok(SyntheticSplit {
        train: take(&order[..n_train], "train")?,
        test: take(&order[n_train..], "test")?,
        prototypes: Tensor::new(vec![c, d], prototypes)?,
    })
}
