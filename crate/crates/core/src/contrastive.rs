//! Momentum-contrast pre-training: a query encoder with projection and
//! prediction heads, a momentum key encoder with a projection head, and an
//! in-batch InfoNCE objective.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{load_views, Dataset, NormalizationStats};
use crate::error::{config_err, input_err, Result};
use crate::heads::{init_mlp, mlp_forward};
use crate::ops::{l2_normalize, log_softmax_last, to_f64_vec, Precision};
use crate::train::{batches_per_epoch, epoch_batches, PretrainResult, ScheduledAdamW, WindowSnapshots};
use crate::vit::{forward_features, init_vit, keyed_rng, pool, ArrayMap, GroupId, ParamSet, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoCoConfig {
    pub temperature: f64,
    pub momentum: f64,
    /// Output width of the projector (the embedding space of the loss).
    pub proj_dim: usize,
    /// Hidden width of the projector.
    pub proj_hidden: usize,
    /// Number of linear layers in the projector.
    pub proj_layers: usize,
    /// Hidden width of the two-layer predictor.
    pub pred_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub augmentation: AugmentationPolicy,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            momentum: 0.99,
            proj_dim: 64,
            proj_hidden: 128,
            proj_layers: 2,
            pred_dim: 128,
            batch_size: 64,
            epochs: 40,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 4,
            augmentation: AugmentationPolicy::standard(64),
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(config_err!("temperature must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2 for in-batch negatives"));
        }
        if self.proj_layers == 0 || self.proj_dim == 0 || self.proj_hidden == 0 || self.pred_dim == 0 {
            return Err(config_err!("head widths and proj_layers must be positive"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be positive"));
        }
        self.augmentation.validate()
    }

    fn proj_dims(&self, embed_dim: usize) -> Vec<usize> {
        let mut dims = vec![embed_dim];
        dims.extend(std::iter::repeat_n(self.proj_hidden, self.proj_layers - 1));
        dims.push(self.proj_dim);
        dims
    }
}

/// Queries, their positive keys and a shared pool of negative keys; all rows unit-norm.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub q: Tensor,
    pub k_pos: Tensor,
    pub k_neg: Tensor,
}

impl ContrastiveBatch {
    pub fn new(q: Tensor, k_pos: Tensor, k_neg: Tensor) -> Result<Self> {
        let (b, d) = q.dims2()?;
        if k_pos.dims2()? != (b, d) {
            return Err(input_err!("k_pos must be {b}x{d}"));
        }
        let (n, dn) = k_neg.dims2()?;
        if n == 0 || dn != d {
            return Err(input_err!("k_neg must be N x {d} with N >= 1"));
        }
        for (name, t) in [("q", &q), ("k_pos", &k_pos), ("k_neg", &k_neg)] {
            let norms = to_f64_vec(&t.sqr()?.sum(D::Minus1)?.sqrt()?)?;
            if norms.iter().any(|v| (v - 1.0).abs() > 1e-5) {
                return Err(input_err!("rows of {name} must have unit norm"));
            }
        }
        Ok(Self { q, k_pos, k_neg })
    }
}

/// `mean_i −log( exp(q_i·k⁺_i/τ) / (exp(q_i·k⁺_i/τ) + Σ_j exp(q_i·k⁻_j/τ)) )`.
pub fn infonce_loss(batch: &ContrastiveBatch, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be > 0"));
    }
    let pos = (&batch.q * &batch.k_pos)?.sum_keepdim(D::Minus1)?;
    let neg = batch.q.matmul(&batch.k_neg.t()?)?;
    let logits = (Tensor::cat(&[&pos, &neg], 1)? / tau)?;
    let lsm = log_softmax_last(&logits)?;
    Ok(lsm.narrow(1, 0, 1)?.mean_all()?.neg()?)
}

/// InfoNCE where query `i`'s positive is key `i` and its negatives are the
/// other keys of the batch.
pub fn infonce_in_batch(q: &Tensor, k: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be > 0"));
    }
    let (b, _) = q.dims2()?;
    if b < 2 {
        return Err(config_err!("in-batch InfoNCE needs at least 2 samples"));
    }
    let logits = (q.matmul(&k.t()?)? / tau)?;
    let lsm = log_softmax_last(&logits)?;
    let eye = Tensor::eye(b, q.dtype(), &Device::Cpu)?;
    Ok((lsm * eye)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// `g ← m·g + (1−m)·f` for every array of `g`. `f` may additionally carry
/// `pred.*` arrays, which have no counterpart in `g`.
pub fn momentum_update(g: &mut ParamSet, f: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(config_err!("momentum must lie in [0, 1]"));
    }
    for (id, fg) in f.groups() {
        let gg = g.group(*id).ok_or_else(|| input_err!("momentum encoder lacks group `{id}`"))?;
        for name in fg.keys() {
            if !gg.contains_key(name) && !(*id == GroupId::Head && name.starts_with("pred.")) {
                return Err(input_err!("momentum encoder lacks `{id}/{name}`"));
            }
        }
    }
    for (id, gg) in g.groups_mut() {
        let fg = f.group(*id).ok_or_else(|| input_err!("online encoder lacks group `{id}`"))?;
        for (name, gt) in gg.iter_mut() {
            let ft = fg.get(name).ok_or_else(|| input_err!("online encoder lacks `{id}/{name}`"))?;
            if ft.dims() != gt.dims() {
                return Err(input_err!("shape mismatch at `{id}/{name}`"));
            }
            *gt = (gt.affine(m, 0.0)? + ft.detach().affine(1.0 - m, 0.0)?)?;
        }
    }
    Ok(())
}

/// Adds projector and predictor to `encoder` (the online network `f`) and
/// derives the momentum network `g` as an independent copy without predictor.
pub fn init_moco(encoder: &ParamSet, cfg: &MoCoConfig, seed: u64) -> Result<(ParamSet, ParamSet)> {
    cfg.validate()?;
    let precision = encoder.precision();
    let mut head = ArrayMap::new();
    init_mlp(&mut head, "proj", &cfg.proj_dims(encoder.config().embed_dim), seed, precision)?;
    init_mlp(&mut head, "pred", &[cfg.proj_dim, cfg.pred_dim, cfg.proj_dim], seed, precision)?;
    let mut f = encoder.without_head().deep_clone()?;
    f.set_head(head);
    let mut g = f.deep_clone()?;
    if let Some(h) = g.remove_head() {
        g.set_head(h.into_iter().filter(|(k, _)| k.starts_with("proj.")).collect());
    }
    Ok((f, g))
}

fn embed(params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let cfg = params.config();
    let tokens = forward_features(params, images, None)?;
    pool(&tokens, cfg.pooling, cfg.use_class_token)
}

/// Unit-norm query embedding `pred(proj(f(x)))`.
pub fn query_embedding(f: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let head = f.head().ok_or_else(|| input_err!("online encoder has no heads"))?;
    let z = mlp_forward(head, "proj", &embed(f, images)?)?;
    l2_normalize(&mlp_forward(head, "pred", &z)?)
}

/// Unit-norm key embedding `proj(g(x))`, detached from the graph.
pub fn key_embedding(g: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let head = g.head().ok_or_else(|| input_err!("momentum encoder has no projector"))?;
    Ok(l2_normalize(&mlp_forward(head, "proj", &embed(g, images)?)?)?.detach())
}

/// Symmetrized loss `½[ℓ(q₁, k₂) + ℓ(q₂, k₁)]` for two views of a batch.
pub fn moco_loss(f: &ParamSet, g: &ParamSet, view1: &Tensor, view2: &Tensor, tau: f64) -> Result<Tensor> {
    let q1 = query_embedding(f, view1)?;
    let q2 = query_embedding(f, view2)?;
    let k1 = key_embedding(g, view1)?;
    let k2 = key_embedding(g, view2)?;
    let l = (infonce_in_batch(&q1, &k2, tau)? + infonce_in_batch(&q2, &k1, tau)?)?;
    Ok(l.affine(0.5, 0.0)?)
}

/// Online/momentum networks plus the optimizer over the online network.
pub struct MoCoState {
    pub f: ParamSet,
    pub g: ParamSet,
    opt: ScheduledAdamW,
    tau: f64,
    momentum: f64,
}

impl MoCoState {
    /// `total_steps` and `warmup_steps` drive the cosine schedule.
    pub fn new(encoder: &ParamSet, cfg: &MoCoConfig, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let (mut f, g) = init_moco(encoder, cfg, cfg.seed)?;
        let ids: Vec<GroupId> = f.group_ids().collect();
        let vars = f.make_trainable(ids)?;
        Ok(Self {
            f,
            g,
            opt: ScheduledAdamW::new(vars, cfg.lr, cfg.weight_decay, warmup_steps, total_steps)?,
            tau: cfg.temperature,
            momentum: cfg.momentum,
        })
    }
}

/// One optimization step on the online network followed by the momentum update.
pub fn moco_pretrain_step(state: &mut MoCoState, view1: &Tensor, view2: &Tensor) -> Result<f64> {
    if view1.dims()[0] < 2 {
        return Err(config_err!("batch_size must be at least 2 for in-batch negatives"));
    }
    let loss = moco_loss(&state.f, &state.g, view1, view2, state.tau)?;
    let value = state.opt.step(&loss)?;
    momentum_update(&mut state.g, &state.f, state.momentum)?;
    Ok(value)
}

/// Full pre-training run from a fresh encoder; the checkpoint is chosen by the
/// last-5%-of-epochs minimum-loss rule.
pub fn moco_pretrain(
    dataset: &Dataset,
    vit: &ViTConfig,
    cfg: &MoCoConfig,
    stats: &NormalizationStats,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(input_err!("empty pre-training dataset"));
    }
    if dataset.len() < 2 {
        return Err(input_err!("need at least 2 images for in-batch negatives"));
    }
    let encoder = init_vit(vit, cfg.seed, cfg.precision)?;
    let bs = cfg.batch_size.min(dataset.len());
    let per_epoch = batches_per_epoch(dataset.len(), bs, true);
    let mut state = MoCoState::new(&encoder, cfg, cfg.warmup_epochs * per_epoch, cfg.epochs * per_epoch)?;
    let mut rng = keyed_rng(cfg.seed, "moco/data");
    let mut snaps = WindowSnapshots::new(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(dataset.len(), bs, &mut rng, true);
        for idx in &batches {
            let (v1, v2) = load_views(dataset, idx, stats, &cfg.augmentation, &mut rng, cfg.precision)?;
            total += moco_pretrain_step(&mut state, &v1, &v2)?;
        }
        let mean = total / batches.len() as f64;
        log::info!("moco epoch {epoch}/{}: loss {mean:.5}", cfg.epochs);
        losses.push(mean);
        snaps.offer(epoch, &state.f)?;
    }
    let mut out = snaps.finish(losses, "moco")?;
    stats.store(&mut out.model.metadata)?;
    Ok(out)
}
