//! Datasets: synthetic generation, IDX ingestion, and report emission.

mod idx;
mod report;
mod synthetic;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use report::{
    parse_report_csv, render_ablation_csv, render_report_csv, write_ablation_csv,
    sidecar_path, write_diag_json, write_report_csv, AblationRow, RateRow, ABLATION_HEADER,
    REPORT_HEADER,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticSplit};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Channels × height × width of one input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Extents {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn grayscale(side: usize) -> Self {
        Self::new(1, side, side)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Labelled inputs with every pixel in `[0, 1]`, stored as an `N × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    extents: Extents,
    num_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        extents: Extents,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if samples.shape().len() != 2 || samples.cols() != extents.numel() {
            return Err(Error::dim(
                "dataset",
                format!("samples {:?} for extents {extents:?}", samples.shape()),
            ));
        }
        if samples.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(pos) = samples.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "pixel {pos} = {} outside [0, 1]",
                samples.data()[pos]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            samples,
            labels,
            extents,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.samples.row_slice(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn dim(&self) -> usize {
        self.extents.numel()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let samples = self.samples.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(
            samples,
            labels,
            self.extents,
            self.num_classes,
            format!("{} (subset of {})", self.provenance, idx.len()),
        )
    }

    /// Indices of exemplars whose pixels equal `x` exactly.
    pub fn identical_to(&self, x: &[f32]) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sample(i) == x).collect()
    }
}
