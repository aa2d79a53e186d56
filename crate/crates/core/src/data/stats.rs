use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{input_err, Result};

/// Per-channel normalization statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Which dataset the statistics were computed on.
    pub source: String,
}

impl NormalizationStats {
    /// Leaves values unchanged; handy for tests.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            source: "identity".into(),
        }
    }

    /// Metadata key under which checkpoints carry the statistics they were trained with.
    pub const METADATA_KEY: &'static str = "normalization";

    pub fn store(&self, metadata: &mut std::collections::BTreeMap<String, String>) -> Result<()> {
        metadata.insert(Self::METADATA_KEY.into(), serde_json::to_string(self)?);
        Ok(())
    }

    /// `None` when the metadata carries no statistics.
    pub fn from_metadata(metadata: &std::collections::BTreeMap<String, String>) -> Result<Option<Self>> {
        metadata
            .get(Self::METADATA_KEY)
            .map(|s| serde_json::from_str(s).map_err(Into::into))
            .transpose()
    }
}

/// Population mean and standard deviation per channel over all pixels.
///
/// Per-image partial sums are sorted before they are combined, so the result
/// does not depend on the order of the images.
pub fn compute_stats(ds: &Dataset) -> Result<NormalizationStats> {
    let first = ds.images.first().ok_or_else(|| input_err!("cannot compute statistics of an empty dataset"))?;
    let channels = first.channels;
    if ds.images.iter().any(|im| im.channels != channels) {
        return Err(input_err!("images have differing channel counts"));
    }
    let plane = |im: &super::Image, c: usize| {
        let n = im.height * im.width;
        im.data[c * n..(c + 1) * n].to_vec()
    };
    let ordered_sum = |mut parts: Vec<f64>| {
        parts.sort_by(f64::total_cmp);
        parts.into_iter().sum::<f64>()
    };
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for c in 0..channels {
        let count: usize = ds.images.iter().map(|im| im.height * im.width).sum();
        let sums = ds
            .images
            .iter()
            .map(|im| plane(im, c).iter().map(|&v| f64::from(v)).sum::<f64>())
            .collect();
        let m = ordered_sum(sums) / count as f64;
        let sq = ds
            .images
            .iter()
            .map(|im| plane(im, c).iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>())
            .collect();
        let s = (ordered_sum(sq) / count as f64).sqrt();
        if !(s > 0.0) {
            return Err(input_err!("channel {c} has zero variance"));
        }
        mean.push(m);
        std.push(s);
    }
    Ok(NormalizationStats {
        mean,
        std,
        source: ds.source.clone(),
    })
}
