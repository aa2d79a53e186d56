//! Layer-selective fine-tuning: policies, trainable masks, task heads and the
//! supervised training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationPolicy;
use crate::data::{compute_stats, load_batch, Dataset, NormalizationStats, Targets};
use crate::error::{config_err, input_err, Error, Result};
use crate::metrics::{dice_from_logits, mean_auc, PredictionSet};
use crate::ops::{bce_with_logits, dice_loss, gelu, linear, to_f64_vec, Precision};
use crate::train::{batches_per_epoch, deterministic_mode, epoch_batches, ScheduledAdamW};
use crate::vit::{
    extract_intermediate, final_norm, forward_features, init_tensor, keyed_rng, pool, truncate,
    ArrayMap, FeatureTap, GroupId, InitKind, LayerRange, ParamSet, Pooling,
};

pub use crate::train::select_pretrain_checkpoint;

/// Which part of a pre-trained encoder is updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetunePolicy {
    /// Only the given blocks (plus the head, and the embedding or final norm
    /// when the range touches the first or last block).
    Surgical(LayerRange),
    /// Truncate to the first `N` blocks, then train everything.
    Shallow(usize),
    EndToEnd,
}

impl FinetunePolicy {
    pub fn validate(&self, depth: usize) -> Result<()> {
        match *self {
            FinetunePolicy::Surgical(r) => r.validate(depth),
            FinetunePolicy::Shallow(n) if n < 1 || n > depth => {
                Err(input_err!("shallow depth {n} outside [1, {depth}]"))
            }
            _ => Ok(()),
        }
    }

    /// Depth of the network the policy trains.
    pub fn effective_depth(&self, depth: usize) -> usize {
        match *self {
            FinetunePolicy::Shallow(n) => n,
            _ => depth,
        }
    }
}

impl fmt::Display for FinetunePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinetunePolicy::Surgical(r) => write!(f, "surgical:{r}"),
            FinetunePolicy::Shallow(n) => write!(f, "shallow:{n}"),
            FinetunePolicy::EndToEnd => write!(f, "e2e"),
        }
    }
}

impl FromStr for FinetunePolicy {
    type Err = Error;
    /// `e2e`, `surgical:4-6` or `shallow:9`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "e2e" || s == "end_to_end" {
            return Ok(FinetunePolicy::EndToEnd);
        }
        match s.split_once(':') {
            Some(("surgical", r)) => Ok(FinetunePolicy::Surgical(r.parse()?)),
            Some(("shallow", n)) => n
                .trim()
                .parse()
                .map(FinetunePolicy::Shallow)
                .map_err(|_| config_err!("bad shallow depth in `{s}`")),
            _ => Err(config_err!("unknown policy `{s}` (expected e2e, surgical:lo-hi or shallow:N)")),
        }
    }
}

impl Serialize for FinetunePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FinetunePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Trainable flag for every parameter group of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub trainable: BTreeMap<GroupId, bool>,
}

impl TrainableMask {
    pub fn trainable_groups(&self) -> Vec<GroupId> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(&g, _)| g).collect()
    }

    pub fn frozen_groups(&self) -> Vec<GroupId> {
        self.trainable.iter().filter(|(_, &t)| !t).map(|(&g, _)| g).collect()
    }

    pub fn is_trainable(&self, id: GroupId) -> bool {
        self.trainable.get(&id).copied().unwrap_or(false)
    }

    /// The mask must name exactly the groups of `model`.
    pub fn check(&self, model: &ParamSet) -> Result<()> {
        let have: BTreeSet<GroupId> = model.group_ids().collect();
        let want: BTreeSet<GroupId> = self.trainable.keys().copied().collect();
        if have != want {
            let missing: Vec<String> = have.difference(&want).map(ToString::to_string).collect();
            let extra: Vec<String> = want.difference(&have).map(ToString::to_string).collect();
            return Err(input_err!(
                "mask does not match model (unmasked: [{}], unknown: [{}])",
                missing.join(","),
                extra.join(",")
            ));
        }
        Ok(())
    }
}

/// Mask over the groups of the network `policy` trains (for `Shallow(N)`, the
/// `N`-block truncation of an `L`-block encoder), head included.
pub fn build_trainable_mask(policy: FinetunePolicy, depth: usize) -> Result<TrainableMask> {
    policy.validate(depth)?;
    let d = policy.effective_depth(depth);
    let mut trainable = BTreeMap::new();
    let (emb, norm, block): (bool, bool, Box<dyn Fn(usize) -> bool>) = match policy {
        FinetunePolicy::Surgical(r) => (r.lo == 1, r.hi == depth, Box::new(move |i| r.contains(i))),
        _ => (true, true, Box::new(|_| true)),
    };
    trainable.insert(GroupId::Embedding, emb);
    for i in 1..=d {
        trainable.insert(GroupId::Block(i), block(i));
    }
    trainable.insert(GroupId::FinalNorm, norm);
    trainable.insert(GroupId::Head, true);
    Ok(TrainableMask { trainable })
}

/// The encoder the policy fine-tunes: truncated for `Shallow`, otherwise a copy.
pub fn apply_policy(encoder: &ParamSet, policy: FinetunePolicy) -> Result<ParamSet> {
    policy.validate(encoder.depth())?;
    match policy {
        FinetunePolicy::Shallow(n) => truncate(encoder, n),
        _ => Ok(encoder.without_head().deep_clone()?),
    }
}

/// Scalar parameters in the trainable groups.
pub fn trainable_param_count(model: &ParamSet, mask: &TrainableMask) -> Result<usize> {
    mask.check(model)?;
    Ok(mask.trainable_groups().into_iter().map(|g| model.group_param_count(g)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegHeadConfig {
    /// Channel width of the decoder.
    pub channels: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self { channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { num_classes: usize },
    Segmentation(SegHeadConfig),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Segmentation(_) => "segmentation",
        }
    }

    /// Name of the validation metric the task reports.
    pub fn metric(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "mean_auc",
            Task::Segmentation(_) => "dice",
        }
    }
}

/// Blocks read by the segmentation decoder: `L/4, L/2, 3L/4, L`.
pub fn segmentation_taps(depth: usize) -> Result<Vec<usize>> {
    if depth < 4 {
        return Err(config_err!("segmentation head needs depth >= 4, got {depth}"));
    }
    Ok(vec![depth / 4, depth / 2, 3 * depth / 4, depth])
}

/// Adds a freshly initialized task head to a copy of `encoder`.
pub fn attach_head(encoder: &ParamSet, task: &Task, seed: u64) -> Result<ParamSet> {
    let mut model = encoder.without_head().deep_clone()?;
    let cfg = model.config().clone();
    let prec = model.precision();
    let d = cfg.embed_dim;
    let mut head = ArrayMap::new();
    let mut add = |name: &str, shape: &[usize], kind: InitKind| -> Result<()> {
        head.insert(name.into(), init_tensor(kind, shape, seed, &format!("head/{name}"), prec)?);
        Ok(())
    };
    match task {
        Task::Classification { num_classes } => {
            if *num_classes == 0 {
                return Err(config_err!("classification needs at least one class"));
            }
            add("fc.weight", &[d, *num_classes], InitKind::Xavier)?;
            add("fc.bias", &[*num_classes], InitKind::Zeros)?;
        }
        Task::Segmentation(seg) => {
            let taps = segmentation_taps(cfg.depth)?;
            if seg.channels == 0 {
                return Err(config_err!("segmentation channels must be positive"));
            }
            let c = seg.channels;
            for k in 0..taps.len() {
                add(&format!("seg.tap{k}.weight"), &[d, c], InitKind::Xavier)?;
                add(&format!("seg.tap{k}.bias"), &[c], InitKind::Zeros)?;
            }
            add("seg.fuse.weight", &[c, c], InitKind::Xavier)?;
            add("seg.fuse.bias", &[c], InitKind::Zeros)?;
            add("seg.out.weight", &[c, cfg.patch_size * cfg.patch_size], InitKind::Xavier)?;
            add("seg.out.bias", &[cfg.patch_size * cfg.patch_size], InitKind::Zeros)?;
            add("seg.skip.weight", &[cfg.in_channels, 1], InitKind::Xavier)?;
            add("seg.skip.bias", &[1], InitKind::Zeros)?;
        }
    }
    model.set_head(head);
    model.metadata.insert("task".into(), serde_json::to_string(task)?);
    model.metadata.insert("head_seed".into(), seed.to_string());
    Ok(model)
}

/// Task stored by [`attach_head`].
pub fn model_task(model: &ParamSet) -> Result<Task> {
    let s = model
        .metadata
        .get("task")
        .ok_or_else(|| input_err!("model has no task head"))?;
    Ok(serde_json::from_str(s)?)
}

fn head_tensor<'a>(head: &'a ArrayMap, name: &str) -> Result<&'a Tensor> {
    head.get(name).ok_or_else(|| input_err!("head array `{name}` is missing"))
}

/// Pooled post-norm feature `(B, D)`.
pub fn pooled_features(model: &ParamSet, images: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let tokens = forward_features(model, images, None)?;
    pool(&tokens, pooling, model.config().use_class_token)
}

/// Pooled post-norm features of every image in `ds`, one row per image.
pub fn embed_dataset(
    encoder: &ParamSet,
    ds: &Dataset,
    stats: &NormalizationStats,
    pooling: Pooling,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = keyed_rng(0, "embed");
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    let d = encoder.config().embed_dim;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = load_batch(ds, chunk, stats, None, &mut rng, encoder.precision())?;
        let z = to_f64_vec(&pooled_features(encoder, &batch.images, pooling)?)?;
        out.extend(z.chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Task logits: `(B, classes)` or `(B, 1, H, W)`.
pub fn model_forward(model: &ParamSet, images: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let head = model.head().ok_or_else(|| input_err!("model has no task head"))?;
    match model_task(model)? {
        Task::Classification { .. } => {
            let z = pooled_features(model, images, pooling)?;
            linear(&z, head_tensor(head, "fc.weight")?, Some(head_tensor(head, "fc.bias")?))
        }
        Task::Segmentation(_) => segmentation_forward(model, head, images),
    }
}

// Simplified UNETR decoder: every tap's patch tokens are projected to a common
// width, summed deepest-first with a GELU-mixing layer in between, then each
// token is expanded to its p×p pixel logits. A per-pixel linear skip from the
// input image is added at full resolution.
fn segmentation_forward(model: &ParamSet, head: &ArrayMap, images: &Tensor) -> Result<Tensor> {
    let cfg = model.config();
    let taps = segmentation_taps(cfg.depth)?;
    let feats = extract_intermediate(model, images, &taps.iter().copied().collect(), FeatureTap::PreNorm)?;
    let cls = usize::from(cfg.use_class_token);
    let p = cfg.num_patches();
    let mut x: Option<Tensor> = None;
    for (k, layer) in taps.iter().enumerate().rev() {
        let mut f = feats[layer].clone();
        if *layer == cfg.depth {
            f = final_norm(model, &f)?;
        }
        let f = f.narrow(1, cls, p)?;
        let proj = linear(&f, head_tensor(head, &format!("seg.tap{k}.weight"))?, Some(head_tensor(head, &format!("seg.tap{k}.bias"))?))?;
        x = Some(match x {
            None => proj,
            Some(prev) => {
                let mixed = linear(&prev, head_tensor(head, "seg.fuse.weight")?, Some(head_tensor(head, "seg.fuse.bias")?))?;
                (gelu(&mixed)? + proj)?
            }
        });
    }
    let x = gelu(&x.expect("four taps"))?;
    let px = linear(&x, head_tensor(head, "seg.out.weight")?, Some(head_tensor(head, "seg.out.bias")?))?;
    let (b, _, _) = px.dims3()?;
    let (g, ps) = (cfg.grid(), cfg.patch_size);
    let logits = px
        .reshape((b, g, g, ps, ps))?
        .permute((0, 1, 3, 2, 4))?
        .reshape((b, 1, cfg.image_size, cfg.image_size))?;
    let skip = linear(
        &images.permute((0, 2, 3, 1))?,
        head_tensor(head, "seg.skip.weight")?,
        Some(head_tensor(head, "seg.skip.bias")?),
    )?
    .permute((0, 3, 1, 2))?;
    Ok((logits + skip)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSource {
    PretrainDataset,
    #[default]
    FinetuneDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub normalization_source: NormalizationSource,
    /// Overrides the encoder's pooling mode.
    pub pooling: Option<Pooling>,
    /// Training-time augmentation; none by default.
    pub augmentation: Option<AugmentationPolicy>,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 32,
            max_epochs: 50,
            warmup_epochs: 2,
            early_stop_patience: 10,
            normalization_source: NormalizationSource::FinetuneDataset,
            pooling: None,
            augmentation: None,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("batch_size and max_epochs must be >= 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(config_err!("early_stop_patience must be >= 1"));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// One fine-tuning run, as persisted in a result store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub seed: u64,
    /// Free-form labels (method, policy, size, ...) used for grouping.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub metric: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub test_metric: Option<f64>,
    pub convergence_epoch: usize,
    pub trainable_param_count: usize,
    pub total_param_count: usize,
    #[serde(default)]
    pub deterministic: bool,
}

/// Epoch with the best validation metric; the first one on ties, which under
/// early stopping is the epoch the patience counter last reset at.
pub fn convergence_epoch(record: &RunRecord) -> Result<usize> {
    let mut best: Option<&EpochLog> = None;
    for e in &record.epochs {
        if best.is_none_or(|b| e.val_metric > b.val_metric) {
            best = Some(e);
        }
    }
    best.map(|e| e.epoch).ok_or_else(|| input_err!("run has no epochs"))
}

/// Stable hash of a serializable value plus a seed. serde_json orders object
/// keys, so the encoding is canonical.
pub fn config_fingerprint<T: Serialize>(value: &T, seed: u64) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&v)?.as_bytes());
    h.update(format!("#seed={seed}").as_bytes());
    Ok(hex::encode(h.finalize()))
}

pub struct FinetuneData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub record: RunRecord,
    /// Parameters at the best validation epoch.
    pub best: ParamSet,
}

fn check_targets(ds: &Dataset, task: &Task, split: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(input_err!("{split} split is empty"));
    }
    match (task, &ds.targets) {
        (Task::Classification { num_classes }, Targets::Labels(l)) => {
            if l.iter().any(|r| r.len() != *num_classes) {
                return Err(input_err!("{split} labels do not have {num_classes} classes"));
            }
            Ok(())
        }
        (Task::Segmentation(_), Targets::Masks(_)) => Ok(()),
        _ => Err(input_err!("{split} split has the wrong target kind for {}", task.name())),
    }
}

/// Statistics for the configured normalization source.
pub fn resolve_stats(model: &ParamSet, train: &Dataset, source: NormalizationSource) -> Result<NormalizationStats> {
    match source {
        NormalizationSource::FinetuneDataset => compute_stats(train),
        NormalizationSource::PretrainDataset => NormalizationStats::from_metadata(&model.metadata)?
            .ok_or_else(|| config_err!("checkpoint carries no pre-training statistics")),
    }
}

/// Something with trainable state that maps a normalized image batch to task logits.
pub(crate) trait Supervised: Sized {
    fn logits(&self, images: &Tensor, pooling: Pooling) -> Result<Tensor>;
    /// Frozen deep copy of the current parameters.
    fn snapshot(&self) -> Result<Self>;
}

impl Supervised for ParamSet {
    fn logits(&self, images: &Tensor, pooling: Pooling) -> Result<Tensor> {
        model_forward(self, images, pooling)
    }

    fn snapshot(&self) -> Result<Self> {
        let mut s = self.deep_clone()?;
        s.freeze_all()?;
        Ok(s)
    }
}

pub(crate) fn evaluate_model<M: Supervised>(
    model: &M,
    task: &Task,
    ds: &Dataset,
    stats: &NormalizationStats,
    pooling: Pooling,
    batch_size: usize,
    precision: Precision,
) -> Result<f64> {
    check_targets(ds, task, "evaluation")?;
    let mut rng = keyed_rng(0, "eval");
    let mut scores = Vec::new();
    let mut dices = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = load_batch(ds, chunk, stats, None, &mut rng, precision)?;
        let out = to_f64_vec(&model.logits(&batch.images, pooling)?)?;
        let per = out.len() / chunk.len();
        match task {
            Task::Classification { .. } => scores.extend(out.chunks(per).map(<[f64]>::to_vec)),
            Task::Segmentation(_) => {
                let gt = to_f64_vec(batch.masks.as_ref().expect("segmentation batch has masks"))?;
                for (o, g) in out.chunks(per).zip(gt.chunks(per)) {
                    dices.push(dice_from_logits(o, g)?);
                }
            }
        }
    }
    match task {
        Task::Classification { .. } => {
            let labels = ds.labels().expect("checked").to_vec();
            mean_auc(&PredictionSet::new(scores, labels)?)
        }
        Task::Segmentation(_) => Ok(dices.iter().sum::<f64>() / dices.len() as f64),
    }
}

/// Validation or test metric of `model` on `ds`: mean AUC or mean per-image Dice.
pub fn evaluate(
    model: &ParamSet,
    ds: &Dataset,
    stats: &NormalizationStats,
    pooling: Pooling,
    batch_size: usize,
    precision: Precision,
) -> Result<f64> {
    evaluate_model(model, &model_task(model)?, ds, stats, pooling, batch_size, precision)
}

pub(crate) struct LoopOutcome<M> {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub test_metric: Option<f64>,
    pub best: M,
}

pub(crate) fn check_data(task: &Task, data: &FinetuneData<'_>) -> Result<()> {
    check_targets(data.train, task, "train")?;
    check_targets(data.val, task, "validation")?;
    if let Some(t) = data.test {
        check_targets(t, task, "test")?;
    }
    Ok(())
}

/// Epoch loop shared by single-encoder and fusion fine-tuning. `opt` holds
/// exactly the trainable variables of `model`.
pub(crate) fn supervised_loop<M: Supervised>(
    model: &M,
    mut opt: ScheduledAdamW,
    task: &Task,
    data: &FinetuneData<'_>,
    stats: &NormalizationStats,
    pooling: Pooling,
    cfg: &FinetuneConfig,
) -> Result<LoopOutcome<M>> {
    let bs = cfg.batch_size.min(data.train.len());
    let mut rng = keyed_rng(cfg.seed, "finetune/data");
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.train.len(), bs, &mut rng, false);
        for idx in &batches {
            let batch = load_batch(data.train, idx, stats, cfg.augmentation.as_ref(), &mut rng, cfg.precision)?;
            let logits = model.logits(&batch.images, pooling)?;
            let loss = match task {
                Task::Classification { .. } => bce_with_logits(&logits, batch.labels.as_ref().expect("labels"))?,
                Task::Segmentation(_) => dice_loss(&logits, batch.masks.as_ref().expect("masks"))?,
            };
            total += opt.step(&loss)?;
        }
        let train_loss = total / batches.len() as f64;
        let val_metric = evaluate_model(model, task, data.val, stats, pooling, cfg.batch_size, cfg.precision)?;
        log::info!("finetune epoch {epoch}: loss {train_loss:.5} val {} {val_metric:.4}", task.metric());
        epochs.push(EpochLog { epoch, train_loss, val_metric });
        if best.as_ref().is_none_or(|(_, m, _)| val_metric > *m) {
            best = Some((epoch, val_metric, model.snapshot()?));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_epoch, best_metric, best) = best.expect("at least one epoch");
    let test_metric = data
        .test
        .map(|t| evaluate_model(&best, task, t, stats, pooling, cfg.batch_size, cfg.precision))
        .transpose()?;
    Ok(LoopOutcome { epochs, best_epoch, best_metric, test_metric, best })
}

/// Steps per epoch and the matching optimizer.
pub(crate) fn make_optimizer(vars: Vec<candle_core::Var>, n_train: usize, cfg: &FinetuneConfig) -> Result<ScheduledAdamW> {
    let per_epoch = batches_per_epoch(n_train, cfg.batch_size.min(n_train), false);
    ScheduledAdamW::new(vars, cfg.lr, cfg.weight_decay, cfg.warmup_epochs * per_epoch, cfg.max_epochs * per_epoch)
}

/// Supervised fine-tuning of the `mask`-trainable groups of `model`.
///
/// Frozen groups never become variables, so they carry no optimizer state and
/// stay bit-identical. The best validation epoch is kept (strict improvement);
/// training stops after `early_stop_patience` epochs without one.
pub fn finetune(model: &ParamSet, mask: &TrainableMask, data: &FinetuneData<'_>, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    mask.check(model)?;
    let task = model_task(model)?;
    check_data(&task, data)?;
    let pooling = cfg.pooling.unwrap_or(model.config().pooling);
    let stats = resolve_stats(model, data.train, cfg.normalization_source)?;
    let mut params = model.to_precision(cfg.precision)?.deep_clone()?;
    let fingerprint = config_fingerprint(&(cfg, mask, params.checksum()?), cfg.seed)?;
    let vars = params.make_trainable(mask.trainable_groups())?;
    let opt = make_optimizer(vars, data.train.len(), cfg)?;
    let out = supervised_loop(&params, opt, &task, data, &stats, pooling, cfg)?;
    let mut record = RunRecord {
        fingerprint,
        seed: cfg.seed,
        tags: BTreeMap::new(),
        metric: task.metric().into(),
        epochs: out.epochs,
        best_epoch: out.best_epoch,
        best_metric: out.best_metric,
        test_metric: out.test_metric,
        convergence_epoch: out.best_epoch,
        trainable_param_count: trainable_param_count(&params, mask)?,
        total_param_count: params.param_count(),
        deterministic: deterministic_mode(),
    };
    record.convergence_epoch = convergence_epoch(&record)?;
    let mut best = out.best;
    best.metadata.insert("finetune_best_epoch".into(), out.best_epoch.to_string());
    best.metadata.insert("finetune_best_metric".into(), format!("{:e}", out.best_metric));
    stats.store(&mut best.metadata)?;
    Ok(FinetuneOutcome { record, best })
}
