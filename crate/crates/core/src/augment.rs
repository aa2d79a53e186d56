//! Random resized crop, horizontal flip and small rotation, composed into a
//! single inverse mapping with bilinear sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{config_err, input_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Output side length in pixels.
    pub crop_size: usize,
    /// Range of the crop area as a fraction of the source area.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
    /// Rotation is drawn uniformly from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::standard(64)
    }
}

impl AugmentationPolicy {
    /// Crop-and-resize, flip with p = 0.5, rotation within ±7°.
    pub fn standard(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            rotation_range: 7.0,
        }
    }

    /// No randomness: the full image resized to `crop_size`.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_prob: 0.0,
            rotation_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(config_err!("crop_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(config_err!("hflip_prob must lie in [0, 1]"));
        }
        if !(self.rotation_range >= 0.0) {
            return Err(config_err!("rotation_range must be >= 0"));
        }
        let (s0, s1) = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(config_err!("crop_scale must satisfy 0 < lo <= hi <= 1"));
        }
        let (r0, r1) = self.crop_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(config_err!("crop_ratio must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop box in source pixels: left, top, width, height.
    pub crop: (f64, f64, f64, f64),
    pub flip: bool,
    pub angle_deg: f64,
}

pub fn sample_params<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    height: usize,
    width: usize,
    rng: &mut R,
) -> AugmentParams {
    let area = (height * width) as f64;
    let (log_r0, log_r1) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale.0, policy.crop_scale.1);
        let ratio = uniform(rng, log_r0, log_r1).exp();
        let w = (target * ratio).sqrt().round();
        let h = (target / ratio).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w <= width as f64 && h <= height as f64 {
            let x0 = rng.random_range(0..=(width - w as usize)) as f64;
            let y0 = rng.random_range(0..=(height - h as usize)) as f64;
            crop = Some((x0, y0, w, h));
            break;
        }
    }
    let crop = crop.unwrap_or((0.0, 0.0, width as f64, height as f64));
    let flip = policy.hflip_prob > 0.0 && rng.random::<f64>() < policy.hflip_prob;
    let angle_deg = if policy.rotation_range > 0.0 {
        uniform(rng, -policy.rotation_range, policy.rotation_range)
    } else {
        0.0
    };
    AugmentParams {
        crop,
        flip,
        angle_deg,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Applies crop → resize → flip → rotate (zero fill) as one inverse warp.
pub fn apply(image: &Image, params: &AugmentParams, out_size: usize) -> Image {
    let s = out_size as f64;
    let (x0, y0, cw, ch) = params.crop;
    let (sx, sy) = (cw / s, ch / s);
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let rotate = params.angle_deg != 0.0;
    let c = s / 2.0;
    let mut out = Image::zeros(image.channels, out_size, out_size);
    for v in 0..out_size {
        for u in 0..out_size {
            // continuous coordinates of the output pixel center
            let (mut px, mut py) = (u as f64 + 0.5, v as f64 + 0.5);
            if rotate {
                let (dx, dy) = (px - c, py - c);
                px = cos * dx + sin * dy + c;
                py = -sin * dx + cos * dy + c;
                if px < 0.0 || py < 0.0 || px > s || py > s {
                    continue;
                }
            }
            if params.flip {
                px = s - px;
            }
            let src_x = x0 + px * sx - 0.5;
            let src_y = y0 + py * sy - 0.5;
            for ch_i in 0..image.channels {
                out.set(ch_i, v, u, image.sample_bilinear(ch_i, src_y, src_x));
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Image> {
    policy.validate()?;
    if image.height < policy.crop_size || image.width < policy.crop_size {
        return Err(input_err!(
            "image {}x{} is smaller than crop size {}",
            image.height,
            image.width,
            policy.crop_size
        ));
    }
    let params = sample_params(policy, image.height, image.width, rng);
    Ok(apply(image, &params, policy.crop_size))
}

/// Two independently sampled views of the same image.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let a = augment(image, policy, rng)?;
    let b = augment(image, policy, rng)?;
    Ok((a, b))
}
