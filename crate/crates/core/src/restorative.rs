//! Masked-autoencoder pre-training: random patch masking, an encoder that
//! sees only visible patches, a light decoder that fills masked positions
//! with a learned mask token, and a pixel MSE on masked patches only.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{load_batch, Dataset, NormalizationStats};
use crate::error::{config_err, input_err, Result};
use crate::ops::{layer_norm, linear, Precision};
use crate::train::{batches_per_epoch, epoch_batches, PretrainResult, ScheduledAdamW, WindowSnapshots};
use crate::vit::{
    block_forward, block_shapes, embed_patches, final_norm, init_tensor, init_vit, keyed_rng, patchify,
    prepend_class_token, run_blocks, ArrayMap, GroupId, InitKind, ParamSet, ViTConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MAEConfig {
    pub mask_ratio: f64,
    /// Decoder transformer blocks; 0 gives a per-token linear decoder.
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub augmentation: AugmentationPolicy,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for MAEConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            decoder_depth: 1,
            decoder_dim: 32,
            decoder_heads: 4,
            decoder_mlp_ratio: 2.0,
            batch_size: 64,
            epochs: 40,
            lr: 1.5e-3,
            weight_decay: 0.05,
            warmup_epochs: 4,
            augmentation: AugmentationPolicy::standard(64),
            precision: Precision::F32,
            seed: 0,
        }
    }
}

/// `round(ratio · P)`, rejecting ratios that mask nothing or everything.
pub fn masked_count(num_patches: usize, mask_ratio: f64) -> Result<usize> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(config_err!("mask_ratio must lie in (0, 1)"));
    }
    let m = (mask_ratio * num_patches as f64).round() as usize;
    if m == 0 || m >= num_patches {
        return Err(config_err!(
            "mask_ratio {mask_ratio} masks {m} of {num_patches} patches; need 1..={}",
            num_patches.saturating_sub(1)
        ));
    }
    Ok(m)
}

impl MAEConfig {
    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        masked_count(vit.num_patches(), self.mask_ratio)?;
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(config_err!("decoder_dim must be a positive multiple of decoder_heads"));
        }
        if !(self.decoder_mlp_ratio > 0.0) {
            return Err(config_err!("decoder_mlp_ratio must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!("batch_size and epochs must be positive"));
        }
        self.augmentation.validate()
    }

    fn decoder_hidden(&self) -> usize {
        ((self.decoder_dim as f64) * self.decoder_mlp_ratio).round().max(1.0) as usize
    }
}

/// Per-sample patch masks. Sample `b`'s visible patches are
/// `permutation[b][..visible]` (in that order), the rest are masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub num_patches: usize,
    pub masked: usize,
    /// `mask[b][p]` is true when patch `p` of sample `b` is masked.
    pub mask: Vec<Vec<bool>>,
    pub permutation: Vec<Vec<usize>>,
}

impl MaskSpec {
    pub fn from_permutations(num_patches: usize, masked: usize, permutation: Vec<Vec<usize>>) -> Result<Self> {
        if masked == 0 || masked >= num_patches {
            return Err(config_err!("masked count must lie in 1..{num_patches}"));
        }
        let mut mask = Vec::with_capacity(permutation.len());
        for p in &permutation {
            let mut seen = vec![false; num_patches];
            if p.len() != num_patches || p.iter().any(|&i| i >= num_patches || std::mem::replace(&mut seen[i], true)) {
                return Err(input_err!("not a permutation of 0..{num_patches}"));
            }
            let mut m = vec![true; num_patches];
            for &i in &p[..num_patches - masked] {
                m[i] = false;
            }
            mask.push(m);
        }
        Ok(Self {
            num_patches,
            masked,
            mask,
            permutation,
        })
    }

    pub fn batch(&self) -> usize {
        self.mask.len()
    }

    pub fn visible(&self) -> usize {
        self.num_patches - self.masked
    }

    fn index_tensor(rows: impl Iterator<Item = Vec<usize>>, width: usize, dim: usize) -> Result<Tensor> {
        let flat: Vec<u32> = rows
            .flat_map(|r| r.into_iter().flat_map(move |i| std::iter::repeat_n(i as u32, dim)))
            .collect();
        let b = flat.len() / (width * dim).max(1);
        Ok(Tensor::from_vec(flat, (b, width, dim), &Device::Cpu)?)
    }

    /// `(B, V, dim)` gather index of the visible patches.
    fn visible_index(&self, dim: usize) -> Result<Tensor> {
        let v = self.visible();
        Self::index_tensor(self.permutation.iter().map(|p| p[..v].to_vec()), v, dim)
    }

    /// `(B, P, dim)` index that maps permutation order back to patch order.
    fn restore_index(&self, dim: usize) -> Result<Tensor> {
        let restore = self.permutation.iter().map(|p| {
            let mut inv = vec![0; p.len()];
            for (pos, &i) in p.iter().enumerate() {
                inv[i] = pos;
            }
            inv
        });
        Self::index_tensor(restore, self.num_patches, dim)
    }

    /// `(B, P)` tensor with 1 at masked patches.
    pub fn mask_tensor(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f32> = self.mask.iter().flatten().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(flat, (self.batch(), self.num_patches), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Independent uniform masks for `batch` samples.
pub fn sample_mask<R: Rng + ?Sized>(num_patches: usize, mask_ratio: f64, rng: &mut R, batch: usize) -> Result<MaskSpec> {
    let masked = masked_count(num_patches, mask_ratio)?;
    let perms = (0..batch)
        .map(|_| {
            let mut p: Vec<usize> = (0..num_patches).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    MaskSpec::from_permutations(num_patches, masked, perms)
}

fn check_mask(params: &ParamSet, mask: &MaskSpec, batch: usize) -> Result<()> {
    if mask.num_patches != params.config().num_patches() || mask.batch() != batch {
        return Err(input_err!(
            "mask for {} samples x {} patches does not fit {batch} x {}",
            mask.batch(),
            mask.num_patches,
            params.config().num_patches()
        ));
    }
    Ok(())
}

/// Encodes only the visible patches (plus the class token when configured);
/// returns post-norm tokens `(B, V (+1), D)`.
pub fn encode_visible(params: &ParamSet, images: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let tokens = embed_patches(params, images)?;
    let (b, _, d) = tokens.dims3()?;
    check_mask(params, mask, b)?;
    let visible = tokens.gather(&mask.visible_index(d)?, 1)?;
    let x = prepend_class_token(params, &visible)?;
    let x = run_blocks(params, &x, 1, params.depth())?;
    final_norm(params, &x)
}

/// Adds the decoder arrays to the head group of `params`.
pub fn init_decoder(params: &mut ParamSet, cfg: &MAEConfig, seed: u64) -> Result<()> {
    let vit = params.config().clone();
    cfg.validate(&vit)?;
    let p = params.precision();
    let dd = cfg.decoder_dim;
    let mut head = ArrayMap::new();
    let mut add = |name: String, shape: &[usize], kind: InitKind| -> Result<()> {
        let t = init_tensor(kind, shape, seed, &format!("head/{name}"), p)?;
        head.insert(name, t);
        Ok(())
    };
    add("decoder_embed.weight".into(), &[vit.embed_dim, dd], InitKind::Xavier)?;
    add("decoder_embed.bias".into(), &[dd], InitKind::Zeros)?;
    add("mask_token".into(), &[1, 1, dd], InitKind::TruncNormal(0.02))?;
    add("decoder_pos_embed".into(), &[1, vit.num_tokens(), dd], InitKind::TruncNormal(0.02))?;
    for i in 0..cfg.decoder_depth {
        for (name, shape, kind) in block_shapes(dd, cfg.decoder_hidden()) {
            add(format!("decoder_blocks.{i}.{name}"), &shape, kind)?;
        }
    }
    add("decoder_norm.weight".into(), &[dd], InitKind::Ones)?;
    add("decoder_norm.bias".into(), &[dd], InitKind::Zeros)?;
    add("decoder_pred.weight".into(), &[dd, vit.patch_dim()], InitKind::Xavier)?;
    add("decoder_pred.bias".into(), &[vit.patch_dim()], InitKind::Zeros)?;
    params.set_head(head);
    params.metadata.insert("decoder_heads".into(), cfg.decoder_heads.to_string());
    Ok(())
}

fn head_get<'a>(head: &'a ArrayMap, name: &str) -> Result<&'a Tensor> {
    head.get(name).ok_or_else(|| config_err!("decoder array `{name}` is missing"))
}

fn decoder_heads(params: &ParamSet) -> Result<usize> {
    params
        .metadata
        .get("decoder_heads")
        .and_then(|v| v.parse().ok())
        .filter(|&h: &usize| h > 0)
        .ok_or_else(|| config_err!("decoder head count missing from metadata"))
}

/// Reassembles the full token sequence (mask tokens at masked positions, original
/// patch order), adds decoder positions, runs the decoder and predicts pixels
/// `(B, P, p·p·C)`.
pub fn decode_with_mask_tokens(params: &ParamSet, latent: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let head = params.head().ok_or_else(|| config_err!("no decoder attached"))?;
    let heads = decoder_heads(params)?;
    let cfg = params.config();
    let (b, t, d) = latent.dims3()?;
    check_mask(params, mask, b)?;
    let cls = usize::from(cfg.use_class_token);
    if t != mask.visible() + cls {
        return Err(input_err!("latent has {t} tokens, mask expects {}", mask.visible() + cls));
    }
    let w = head_get(head, "decoder_embed.weight")?;
    if w.dims2()?.0 != d {
        return Err(config_err!("decoder_embed expects width {}, latent has {d}", w.dims2()?.0));
    }
    let emb = linear(latent, w, Some(head_get(head, "decoder_embed.bias")?))?;
    let dd = emb.dim(D::Minus1)?;
    if dd % heads != 0 {
        return Err(config_err!("decoder width {dd} is not divisible by {heads} heads"));
    }
    let patches = emb.narrow(1, cls, mask.visible())?;
    let filler = head_get(head, "mask_token")?.broadcast_as((b, mask.masked, dd))?.contiguous()?;
    let shuffled = Tensor::cat(&[&patches, &filler], 1)?;
    let mut x = shuffled.gather(&mask.restore_index(dd)?, 1)?;
    if cls == 1 {
        x = Tensor::cat(&[&emb.narrow(1, 0, 1)?, &x], 1)?;
    }
    x = x.broadcast_add(head_get(head, "decoder_pos_embed")?)?;
    let depth = (0..).take_while(|i| head.contains_key(&format!("decoder_blocks.{i}.norm1.weight"))).count();
    for i in 0..depth {
        x = block_forward(head, &format!("decoder_blocks.{i}."), &x, heads)?;
    }
    let x = layer_norm(&x, head_get(head, "decoder_norm.weight")?, head_get(head, "decoder_norm.bias")?)?;
    let pred = linear(&x, head_get(head, "decoder_pred.weight")?, Some(head_get(head, "decoder_pred.bias")?))?;
    Ok(pred.narrow(1, cls, mask.num_patches)?)
}

/// Mean over masked patches of the per-patch pixel MSE against `patchify(images)`.
pub fn mae_loss(pred: &Tensor, images: &Tensor, mask: &MaskSpec, patch_size: usize) -> Result<Tensor> {
    let target = patchify(&images.to_dtype(pred.dtype())?, patch_size)?;
    if target.dims() != pred.dims() {
        return Err(input_err!("prediction {:?} does not match targets {:?}", pred.dims(), target.dims()));
    }
    let (b, p, _) = pred.dims3()?;
    if mask.batch() != b || mask.num_patches != p {
        return Err(input_err!("mask does not match predictions"));
    }
    if mask.masked == 0 {
        return Err(config_err!("empty mask"));
    }
    let per_patch = (pred - target)?.sqr()?.mean(D::Minus1)?;
    let m = mask.mask_tensor(pred.dtype())?;
    let total = (per_patch * m)?.sum_all()?;
    Ok(total.affine(1.0 / (b * mask.masked) as f64, 0.0)?)
}

/// Encoder on visible patches, decoder, masked loss.
pub fn mae_forward_loss(params: &ParamSet, images: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let latent = encode_visible(params, images, mask)?;
    let pred = decode_with_mask_tokens(params, &latent, mask)?;
    mae_loss(&pred, images, mask, params.config().patch_size)
}

/// Encoder plus decoder, trainable, with its optimizer.
pub struct MaeState {
    pub params: ParamSet,
    opt: ScheduledAdamW,
    mask_ratio: f64,
}

impl MaeState {
    pub fn new(encoder: &ParamSet, cfg: &MAEConfig, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let mut params = encoder.without_head().deep_clone()?;
        init_decoder(&mut params, cfg, cfg.seed)?;
        let ids: Vec<GroupId> = params.group_ids().collect();
        let vars = params.make_trainable(ids)?;
        Ok(Self {
            params,
            opt: ScheduledAdamW::new(vars, cfg.lr, cfg.weight_decay, warmup_steps, total_steps)?,
            mask_ratio: cfg.mask_ratio,
        })
    }
}

pub fn mae_pretrain_step<R: Rng + ?Sized>(state: &mut MaeState, images: &Tensor, rng: &mut R) -> Result<f64> {
    let b = images.dims()[0];
    let mask = sample_mask(state.params.config().num_patches(), state.mask_ratio, rng, b)?;
    let loss = mae_forward_loss(&state.params, images, &mask)?;
    state.opt.step(&loss)
}

/// Full pre-training run from a fresh encoder, one augmented view per image.
pub fn mae_pretrain(
    dataset: &Dataset,
    vit: &ViTConfig,
    cfg: &MAEConfig,
    stats: &NormalizationStats,
) -> Result<PretrainResult> {
    cfg.validate(vit)?;
    if dataset.is_empty() {
        return Err(input_err!("empty pre-training dataset"));
    }
    let encoder = init_vit(vit, cfg.seed, cfg.precision)?;
    let ds = dataset.without_targets();
    let bs = cfg.batch_size.min(ds.len());
    let per_epoch = batches_per_epoch(ds.len(), bs, true);
    let mut state = MaeState::new(&encoder, cfg, cfg.warmup_epochs * per_epoch, cfg.epochs * per_epoch)?;
    let mut rng = keyed_rng(cfg.seed, "mae/data");
    let mut snaps = WindowSnapshots::new(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(ds.len(), bs, &mut rng, true);
        for idx in &batches {
            let batch = load_batch(&ds, idx, stats, Some(&cfg.augmentation), &mut rng, cfg.precision)?;
            total += mae_pretrain_step(&mut state, &batch.images, &mut rng)?;
        }
        let mean = total / batches.len() as f64;
        log::info!("mae epoch {epoch}/{}: loss {mean:.5}", cfg.epochs);
        losses.push(mean);
        snaps.offer(epoch, &state.params)?;
    }
    let mut out = snaps.finish(losses, "mae")?;
    stats.store(&mut out.model.metadata)?;
    Ok(out)
}
