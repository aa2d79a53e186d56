//! Datasets, manifests, splits, normalization statistics, batching and the
//! synthetic lesion generator.

mod batch;
mod image;
pub mod manifest;
mod probe;
mod split;
mod stats;
pub mod synth;

pub use self::image::Image;
pub use batch::{load_batch, load_views, Batch};
pub use manifest::{ClassificationEntry, ClassificationManifest, SegmentationEntry, SegmentationManifest};
pub use probe::{linear_probe_auc, ProbeConfig};
pub use split::{split, subsample, SplitSpec};
pub use stats::{compute_stats, NormalizationStats};
pub use synth::{synth_generate, synth_render, SyntheticConfig, SyntheticOutput};

use crate::error::{input_err, Result};

/// Supervision attached to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    None,
    /// Multi-hot label vector per sample.
    Labels(Vec<Vec<u8>>),
    /// Binary mask per sample, same size as the image.
    Masks(Vec<Image>),
}

/// An in-memory dataset. Images hold raw `[0, 1]` intensities; normalization
/// happens at batch time.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub targets: Targets,
    pub class_names: Vec<String>,
    /// Identifier of the data source, recorded in normalization statistics.
    pub source: String,
}

impl Dataset {
    pub fn unlabeled(images: Vec<Image>, source: impl Into<String>) -> Self {
        Self {
            images,
            targets: Targets::None,
            class_names: Vec::new(),
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Option<&[Vec<u8>]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            _ => None,
        }
    }

    pub fn masks(&self) -> Option<&[Image]> {
        match &self.targets {
            Targets::Masks(m) => Some(m),
            _ => None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(input_err!("index {bad} out of range for {} samples", self.len()));
        }
        let pick = |v: &[Image]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let targets = match &self.targets {
            Targets::None => Targets::None,
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i].clone()).collect()),
            Targets::Masks(m) => Targets::Masks(pick(m)),
        };
        Ok(Dataset {
            images: pick(&self.images),
            targets,
            class_names: self.class_names.clone(),
            source: self.source.clone(),
        })
    }

    /// Drops the supervision, e.g. for self-supervised pre-training.
    pub fn without_targets(&self) -> Dataset {
        Dataset {
            targets: Targets::None,
            ..self.clone()
        }
    }
}
