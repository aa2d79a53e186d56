use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;

use super::{ArrayMap, GroupId, ParamSet, Pooling};
use crate::error::{config_err, input_err, Result};
use crate::ops::{gelu, layer_norm, linear, softmax_last};

/// Which side of the final layer norm an intermediate feature is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTap {
    PreNorm,
    PostNorm,
}

/// `(B, C, H, W)` images to `(B, P, p·p·C)` patches, row-major over the patch grid
/// and `(row, col, channel)` within a patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(input_err!("image {h}x{w} not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

fn check_images(params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let cfg = params.config();
    let dims = images.dims();
    if dims.len() != 4
        || dims[1] != cfg.in_channels
        || dims[2] != cfg.image_size
        || dims[3] != cfg.image_size
    {
        return Err(input_err!(
            "images of shape {dims:?} do not match (B, {}, {}, {})",
            cfg.in_channels,
            cfg.image_size,
            cfg.image_size
        ));
    }
    Ok(images.to_dtype(params.dtype())?)
}

/// Patch tokens with their positional embeddings added; no class token. `(B, P, D)`.
pub fn embed_patches(params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let images = check_images(params, images)?;
    let cfg = params.config();
    let patches = patchify(&images, cfg.patch_size)?;
    let w = params.get(GroupId::Embedding, "patch_embed.weight")?;
    let b = params.get(GroupId::Embedding, "patch_embed.bias")?;
    let tokens = linear(&patches, w, Some(b))?;
    let pos = params.get(GroupId::Embedding, "pos_embed")?;
    let offset = usize::from(cfg.use_class_token);
    let patch_pos = pos.narrow(1, offset, cfg.num_patches())?;
    Ok(tokens.broadcast_add(&patch_pos)?)
}

/// Prepends `cls_token + pos_embed[0]` when the config uses a class token.
pub(crate) fn prepend_class_token(params: &ParamSet, tokens: &Tensor) -> Result<Tensor> {
    if !params.config().use_class_token {
        return Ok(tokens.clone());
    }
    let (b, _, d) = tokens.dims3()?;
    let cls = params.get(GroupId::Embedding, "cls_token")?;
    let pos0 = params.get(GroupId::Embedding, "pos_embed")?.narrow(1, 0, 1)?;
    let cls = (cls + pos0)?.broadcast_as((b, 1, d))?;
    Ok(Tensor::cat(&[&cls, tokens], 1)?)
}

fn embed(params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let patches = embed_patches(params, images)?;
    prepend_class_token(params, &patches)
}

fn attention(map: &ArrayMap, prefix: &str, x: &Tensor, num_heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    let dh = d / num_heads;
    let qkv = linear(
        x,
        get(map, prefix, "attn.qkv.weight")?,
        Some(get(map, prefix, "attn.qkv.bias")?),
    )?
    .reshape((b, t, 3, num_heads, dh))?
    .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    let att = softmax_last(&scores)?;
    let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
    linear(
        &y,
        get(map, prefix, "attn.proj.weight")?,
        Some(get(map, prefix, "attn.proj.bias")?),
    )
}

fn get<'a>(map: &'a ArrayMap, prefix: &str, name: &str) -> Result<&'a Tensor> {
    let key = format!("{prefix}{name}");
    map.get(&key)
        .ok_or_else(|| input_err!("parameter `{key}` is missing"))
}

/// One pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub(crate) fn block_forward(
    map: &ArrayMap,
    prefix: &str,
    x: &Tensor,
    num_heads: usize,
) -> Result<Tensor> {
    let h = layer_norm(x, get(map, prefix, "norm1.weight")?, get(map, prefix, "norm1.bias")?)?;
    let x = (x + attention(map, prefix, &h, num_heads)?)?;
    let h = layer_norm(&x, get(map, prefix, "norm2.weight")?, get(map, prefix, "norm2.bias")?)?;
    let h = gelu(&linear(
        &h,
        get(map, prefix, "mlp.fc1.weight")?,
        Some(get(map, prefix, "mlp.fc1.bias")?),
    )?)?;
    let h = linear(
        &h,
        get(map, prefix, "mlp.fc2.weight")?,
        Some(get(map, prefix, "mlp.fc2.bias")?),
    )?;
    Ok((x + h)?)
}

/// Runs blocks `from..=to` (1-indexed) over a token sequence.
pub fn run_blocks(params: &ParamSet, tokens: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let heads = params.config().num_heads;
    let mut x = tokens.clone();
    for i in from..=to {
        let g = params
            .group(GroupId::Block(i))
            .ok_or_else(|| input_err!("block {i} is missing"))?;
        x = block_forward(g, "", &x, heads)?;
    }
    Ok(x)
}

pub fn final_norm(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    layer_norm(
        x,
        params.get(GroupId::FinalNorm, "weight")?,
        params.get(GroupId::FinalNorm, "bias")?,
    )
}

fn check_layer(params: &ParamSet, layer: usize) -> Result<()> {
    let depth = params.depth();
    if layer < 1 || layer > depth {
        return Err(input_err!("layer {layer} outside [1, {depth}]"));
    }
    Ok(())
}

/// Token activations after block `upto_layer` (default: last), before the final norm.
pub fn forward_prenorm(
    params: &ParamSet,
    images: &Tensor,
    upto_layer: Option<usize>,
) -> Result<Tensor> {
    let upto = upto_layer.unwrap_or(params.depth());
    check_layer(params, upto)?;
    let x = embed(params, images)?;
    run_blocks(params, &x, 1, upto)
}

/// Embedding, blocks `1..=upto_layer`, then the final layer norm. `(B, T, D)`.
pub fn forward_features(
    params: &ParamSet,
    images: &Tensor,
    upto_layer: Option<usize>,
) -> Result<Tensor> {
    let x = forward_prenorm(params, images, upto_layer)?;
    final_norm(params, &x)
}

/// Activations after each requested block, from a single forward pass.
pub fn extract_intermediate(
    params: &ParamSet,
    images: &Tensor,
    layers: &BTreeSet<usize>,
    tap: FeatureTap,
) -> Result<BTreeMap<usize, Tensor>> {
    for &l in layers {
        check_layer(params, l)?;
    }
    let Some(&last) = layers.last() else {
        return Ok(BTreeMap::new());
    };
    let mut x = embed(params, images)?;
    let mut out = BTreeMap::new();
    for i in 1..=last {
        x = run_blocks(params, &x, i, i)?;
        if layers.contains(&i) {
            let feat = match tap {
                FeatureTap::PreNorm => x.clone(),
                FeatureTap::PostNorm => final_norm(params, &x)?,
            };
            out.insert(i, feat);
        }
    }
    Ok(out)
}

/// Per-sample embedding `(B, D)` from a `(B, T, D)` token sequence.
pub fn pool(tokens: &Tensor, mode: Pooling, has_class_token: bool) -> Result<Tensor> {
    let (_, t, _) = tokens.dims3()?;
    match mode {
        Pooling::ClassToken => {
            if !has_class_token {
                return Err(config_err!("class_token pooling requested without a class token"));
            }
            Ok(tokens.narrow(1, 0, 1)?.squeeze(1)?)
        }
        Pooling::MeanPatch => {
            let offset = usize::from(has_class_token);
            if t <= offset {
                return Err(input_err!("no patch tokens to pool"));
            }
            Ok(tokens.narrow(1, offset, t - offset)?.mean(1)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{tensor_from_f64, to_f64_vec, Precision};
    use crate::vit::{init_vit, truncate, ViTConfig};
    use rand::{Rng, SeedableRng};

    fn cfg(depth: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 1,
            use_class_token: true,
            pooling: Pooling::ClassToken,
        }
    }

    fn images(b: usize, seed: u64, precision: Precision) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensor_from_f64(&data, &[b, 1, 8, 8], precision).unwrap()
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = tensor_from_f64(&data, &[1, 1, 4, 4], Precision::F64).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.dims(), &[1, 4, 4]);
        let v = to_f64_vec(&p).unwrap();
        assert_eq!(&v[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&v[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn upto_full_depth_equals_default_forward() {
        let p = init_vit(&cfg(3), 0, Precision::F32).unwrap();
        let x = images(2, 1, Precision::F32);
        let a = to_f64_vec(&forward_features(&p, &x, None).unwrap()).unwrap();
        let b = to_f64_vec(&forward_features(&p, &x, Some(3)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prenorm_prefix_matches_intermediate_taps() {
        let p = init_vit(&cfg(4), 5, Precision::F32).unwrap();
        let x = images(3, 2, Precision::F32);
        let all: BTreeSet<usize> = (1..=4).collect();
        let taps = extract_intermediate(&p, &x, &all, FeatureTap::PreNorm).unwrap();
        for n in 1..=4 {
            let direct = to_f64_vec(&forward_prenorm(&p, &x, Some(n)).unwrap()).unwrap();
            assert_eq!(direct, to_f64_vec(&taps[&n]).unwrap(), "layer {n}");
            let trunc = truncate(&p, n).unwrap();
            let t = to_f64_vec(&forward_prenorm(&trunc, &x, None).unwrap()).unwrap();
            assert_eq!(direct, t, "truncated {n}");
        }
        for n in 1..4 {
            assert_ne!(to_f64_vec(&taps[&n]).unwrap(), to_f64_vec(&taps[&(n + 1)]).unwrap());
        }
        let last: BTreeSet<usize> = [4].into();
        let post = extract_intermediate(&p, &x, &last, FeatureTap::PostNorm).unwrap();
        assert_eq!(
            to_f64_vec(&post[&4]).unwrap(),
            to_f64_vec(&forward_features(&p, &x, None).unwrap()).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let p = init_vit(&cfg(2), 0, Precision::F32).unwrap();
        let bad = Tensor::zeros((1, 1, 12, 12), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(
            forward_features(&p, &bad, None),
            Err(crate::error::Error::Input(_))
        ));
        let x = images(1, 0, Precision::F32);
        assert!(forward_features(&p, &x, Some(3)).is_err());
        assert!(forward_features(&p, &x, Some(0)).is_err());
        let bad_layers: BTreeSet<usize> = [5].into();
        assert!(extract_intermediate(&p, &x, &bad_layers, FeatureTap::PreNorm).is_err());
    }

    #[test]
    fn pooling_contracts() {
        // one patch token after the class token
        let t = tensor_from_f64(&[9.0, 9.0, 1.0, 2.0], &[1, 2, 2], Precision::F64).unwrap();
        let m = to_f64_vec(&pool(&t, Pooling::MeanPatch, true).unwrap()).unwrap();
        assert_eq!(m, [1.0, 2.0]);
        let c = to_f64_vec(&pool(&t, Pooling::ClassToken, true).unwrap()).unwrap();
        assert_eq!(c, [9.0, 9.0]);
        assert!(pool(&t, Pooling::ClassToken, false).is_err());

        let same = tensor_from_f64(&[0.5, -1.0].repeat(3), &[1, 3, 2], Precision::F64).unwrap();
        for mode in [Pooling::ClassToken, Pooling::MeanPatch] {
            assert_eq!(to_f64_vec(&pool(&same, mode, true).unwrap()).unwrap(), [0.5, -1.0]);
        }

        let batch = tensor_from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2], Precision::F64).unwrap();
        let swapped = tensor_from_f64(&[5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0, 4.0], &[2, 2, 2], Precision::F64).unwrap();
        let a = to_f64_vec(&pool(&batch, Pooling::MeanPatch, true).unwrap()).unwrap();
        let b = to_f64_vec(&pool(&swapped, Pooling::MeanPatch, true).unwrap()).unwrap();
        assert_eq!(&a[..2], &b[2..]);
        assert_eq!(&a[2..], &b[..2]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = init_vit(&cfg(2), 0, Precision::F32).unwrap();
        let x = images(4, 9, Precision::F32);
        let a = to_f64_vec(&forward_features(&p, &x, None).unwrap()).unwrap();
        let b = to_f64_vec(&forward_features(&p, &x, None).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
