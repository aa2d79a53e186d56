use candle_core::Tensor;
use rand::Rng;

use super::{Dataset, Image, NormalizationStats, Targets};
use crate::augment::{apply, sample_params, AugmentationPolicy};
use crate::error::{input_err, Result};
use crate::ops::{tensor_from_f64, Precision};

/// A normalized image batch `(B, C, H, W)` with optional targets:
/// labels `(B, classes)` or masks `(B, 1, H, W)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Tensor>,
    pub masks: Option<Tensor>,
}

fn normalize_into(out: &mut Vec<f64>, img: &Image, stats: &NormalizationStats) -> Result<()> {
    if stats.mean.len() != img.channels || stats.std.len() != img.channels {
        return Err(input_err!(
            "statistics cover {} channels, image has {}",
            stats.mean.len(),
            img.channels
        ));
    }
    let plane = img.height * img.width;
    for (i, &v) in img.data.iter().enumerate() {
        let c = i / plane;
        out.push((f64::from(v) - stats.mean[c]) / stats.std[c]);
    }
    Ok(())
}

fn check(ds: &Dataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(input_err!("empty batch"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(input_err!("index {bad} out of range for {} samples", ds.len()));
    }
    Ok(())
}

/// Gathers `indices` from `ds`, applying the augmentation (if any) and then
/// `(x - mean) / std`. Masks are warped with the same draw and re-binarized.
pub fn load_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    stats: &NormalizationStats,
    augmentation: Option<&AugmentationPolicy>,
    rng: &mut R,
    precision: Precision,
) -> Result<Batch> {
    check(ds, indices)?;
    if let Some(p) = augmentation {
        p.validate()?;
    }
    let mut pixels = Vec::new();
    let mut mask_px = Vec::new();
    let mut shape = None;
    for &i in indices {
        let src = &ds.images[i];
        let (img, mask) = match augmentation {
            Some(policy) => {
                if src.height < policy.crop_size || src.width < policy.crop_size {
                    return Err(input_err!("image smaller than crop size {}", policy.crop_size));
                }
                let params = sample_params(policy, src.height, src.width, rng);
                let img = apply(src, &params, policy.crop_size);
                let mask = ds.masks().map(|m| {
                    let mut w = apply(&m[i], &params, policy.crop_size);
                    w.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
                    w
                });
                (img, mask)
            }
            None => (src.clone(), ds.masks().map(|m| m[i].clone())),
        };
        let s = (img.channels, img.height, img.width);
        if *shape.get_or_insert(s) != s {
            return Err(input_err!("images in a batch must share one size"));
        }
        normalize_into(&mut pixels, &img, stats)?;
        if let Some(m) = mask {
            mask_px.extend(m.data[..m.height * m.width].iter().map(|&v| f64::from(v)));
        }
    }
    let (c, h, w) = shape.expect("non-empty batch");
    let b = indices.len();
    let images = tensor_from_f64(&pixels, &[b, c, h, w], precision)?;
    let (labels, masks) = match &ds.targets {
        Targets::None => (None, None),
        Targets::Labels(l) => {
            let k = ds.num_classes();
            let flat: Vec<f64> = indices.iter().flat_map(|&i| l[i].iter().map(|&v| f64::from(v))).collect();
            (Some(tensor_from_f64(&flat, &[b, k], precision)?), None)
        }
        Targets::Masks(_) => (None, Some(tensor_from_f64(&mask_px, &[b, 1, h, w], precision)?)),
    };
    Ok(Batch { images, labels, masks })
}

/// Two independently augmented, normalized views of each sample.
pub fn load_views<R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    stats: &NormalizationStats,
    policy: &AugmentationPolicy,
    rng: &mut R,
    precision: Precision,
) -> Result<(Tensor, Tensor)> {
    check(ds, indices)?;
    policy.validate()?;
    let mut views = [Vec::new(), Vec::new()];
    let channels = ds.images[indices[0]].channels;
    for &i in indices {
        let src = &ds.images[i];
        if src.height < policy.crop_size || src.width < policy.crop_size || src.channels != channels {
            return Err(input_err!("image {i} does not fit the view size {}", policy.crop_size));
        }
        for v in &mut views {
            let params = sample_params(policy, src.height, src.width, rng);
            normalize_into(v, &apply(src, &params, policy.crop_size), stats)?;
        }
    }
    let shape = [indices.len(), channels, policy.crop_size, policy.crop_size];
    let [a, b] = views;
    Ok((tensor_from_f64(&a, &shape, precision)?, tensor_from_f64(&b, &shape, precision)?))
}
