//! Two-branch models: pooled features of a restorative and a contrastive
//! encoder, concatenated under one linear classifier.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::NormalizationStats;
use crate::error::{config_err, input_err, Error, Result};
use crate::finetune::{
    build_trainable_mask, check_data, config_fingerprint, convergence_epoch, make_optimizer,
    pooled_features, supervised_loop, FinetuneConfig, FinetuneData, FinetunePolicy, NormalizationSource,
    RunRecord, Supervised, Task, TrainableMask,
};
use crate::data::compute_stats;
use crate::ops::linear;
use crate::train::deterministic_mode;
use crate::vit::{init_tensor, truncate, ArrayMap, GroupId, InitKind, LayerRange, ParamSet, Pooling};

/// How one branch is cut and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub truncate_to: Option<usize>,
    pub policy: FinetunePolicy,
}

impl BranchSpec {
    pub fn new(truncate_to: Option<usize>, policy: FinetunePolicy) -> Self {
        Self { truncate_to, policy }
    }

    /// Depth after truncation, checked against the policy.
    pub fn effective_depth(&self, depth: usize) -> Result<usize> {
        let d = self.truncate_to.unwrap_or(depth);
        if d < 1 || d > depth {
            return Err(config_err!("cannot truncate a {depth}-block encoder to {d}"));
        }
        match self.policy {
            FinetunePolicy::Shallow(n) if self.truncate_to.is_some_and(|t| t != n) => Err(config_err!(
                "shallow:{n} conflicts with truncate_to {d}"
            )),
            FinetunePolicy::Shallow(n) => {
                if n > depth {
                    return Err(config_err!("shallow:{n} exceeds depth {depth}"));
                }
                Ok(n)
            }
            FinetunePolicy::Surgical(r) => {
                r.validate(d).map_err(|_| config_err!("surgical range {r} outside effective depth {d}"))?;
                Ok(d)
            }
            FinetunePolicy::EndToEnd => Ok(d),
        }
    }
}

/// The three named two-branch configurations. Branch A is the restorative
/// (MAE) encoder, branch B the contrastive (MoCo) one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPreset {
    /// Both full 12-block encoders, everything trained.
    EndToEnd,
    /// Both truncated to 9 blocks, everything trained.
    Shallow,
    /// MAE truncated to 9 with blocks 7-9 trained; MoCo with blocks 4-6 trained,
    /// truncated to 6 unless `moco_full_depth` is set.
    Surgical { moco_full_depth: bool },
}

impl FusionPreset {
    pub const NAMES: [&'static str; 3] = ["e2e12+12", "shallow9+9", "surgical_mae9_moco6"];

    pub fn branch_specs(&self) -> (BranchSpec, BranchSpec) {
        match *self {
            FusionPreset::EndToEnd => (
                BranchSpec::new(None, FinetunePolicy::EndToEnd),
                BranchSpec::new(None, FinetunePolicy::EndToEnd),
            ),
            FusionPreset::Shallow => (
                BranchSpec::new(Some(9), FinetunePolicy::Shallow(9)),
                BranchSpec::new(Some(9), FinetunePolicy::Shallow(9)),
            ),
            FusionPreset::Surgical { moco_full_depth } => (
                BranchSpec::new(Some(9), FinetunePolicy::Surgical(LayerRange::new(7, 9))),
                BranchSpec::new(
                    if moco_full_depth { None } else { Some(6) },
                    FinetunePolicy::Surgical(LayerRange::new(4, 6)),
                ),
            ),
        }
    }
}

impl fmt::Display for FusionPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionPreset::EndToEnd => f.write_str(Self::NAMES[0]),
            FusionPreset::Shallow => f.write_str(Self::NAMES[1]),
            FusionPreset::Surgical { moco_full_depth: false } => f.write_str(Self::NAMES[2]),
            FusionPreset::Surgical { moco_full_depth: true } => write!(f, "{}:full", Self::NAMES[2]),
        }
    }
}

impl FromStr for FusionPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "e2e12+12" => Ok(FusionPreset::EndToEnd),
            "shallow9+9" => Ok(FusionPreset::Shallow),
            "surgical_mae9_moco6" => Ok(FusionPreset::Surgical { moco_full_depth: false }),
            "surgical_mae9_moco6:full" => Ok(FusionPreset::Surgical { moco_full_depth: true }),
            other => Err(config_err!("unknown fusion preset `{other}` (expected one of {:?})", Self::NAMES)),
        }
    }
}

impl Serialize for FusionPreset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FusionPreset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Two headless encoders and a linear classifier over their concatenated pooled features.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub branch_a: ParamSet,
    pub branch_b: ParamSet,
    /// `fc.weight (d_a + d_b, classes)` and `fc.bias (classes)`.
    pub head: ArrayMap,
    /// Per-branch masks over encoder groups (no head entry; the head is always trained).
    pub mask_a: TrainableMask,
    pub mask_b: TrainableMask,
}

fn branch(ckpt: &ParamSet, spec: &BranchSpec) -> Result<(ParamSet, TrainableMask)> {
    let depth = ckpt.depth();
    let d = spec.effective_depth(depth)?;
    let params = if d < depth { truncate(ckpt, d)? } else { ckpt.without_head().deep_clone()? };
    let policy = match spec.policy {
        FinetunePolicy::Shallow(_) => FinetunePolicy::EndToEnd,
        p => p,
    };
    let mut mask = build_trainable_mask(policy, d)?;
    mask.trainable.remove(&GroupId::Head);
    mask.check(&params)?;
    Ok((params, mask))
}

/// Cuts both checkpoints per their specs and adds a fresh classifier.
pub fn build_fusion(
    ckpt_a: &ParamSet,
    spec_a: &BranchSpec,
    ckpt_b: &ParamSet,
    spec_b: &BranchSpec,
    num_classes: usize,
    seed: u64,
) -> Result<FusionModel> {
    let (ca, cb) = (ckpt_a.config(), ckpt_b.config());
    if ca.image_size != cb.image_size || ca.in_channels != cb.in_channels {
        return Err(config_err!(
            "branches take different inputs ({}px×{} vs {}px×{})",
            ca.image_size,
            ca.in_channels,
            cb.image_size,
            cb.in_channels
        ));
    }
    if ckpt_a.dtype() != ckpt_b.dtype() {
        return Err(config_err!("branches have different precisions"));
    }
    if num_classes == 0 {
        return Err(config_err!("classification needs at least one class"));
    }
    let (branch_a, mask_a) = branch(ckpt_a, spec_a)?;
    let (branch_b, mask_b) = branch(ckpt_b, spec_b)?;
    let d = ca.embed_dim + cb.embed_dim;
    let prec = branch_a.precision();
    let mut head = ArrayMap::new();
    head.insert("fc.weight".into(), init_tensor(InitKind::Xavier, &[d, num_classes], seed, "head/fusion.fc.weight", prec)?);
    head.insert("fc.bias".into(), init_tensor(InitKind::Zeros, &[num_classes], seed, "", prec)?);
    Ok(FusionModel { branch_a, branch_b, head, mask_a, mask_b })
}

/// Builds a named preset from a restorative (`mae`) and a contrastive (`moco`) checkpoint.
pub fn build_preset(preset: FusionPreset, mae: &ParamSet, moco: &ParamSet, num_classes: usize, seed: u64) -> Result<FusionModel> {
    let (a, b) = preset.branch_specs();
    build_fusion(mae, &a, moco, &b, num_classes, seed)
}

impl FusionModel {
    pub fn num_classes(&self) -> usize {
        self.head["fc.bias"].dims()[0]
    }

    fn pooled(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (ca, cb) = (self.branch_a.config(), self.branch_b.config());
        if images.dims().len() != 4 || images.dims()[2] != ca.image_size || images.dims()[1] != ca.in_channels {
            return Err(input_err!("images {:?} do not match the branch inputs", images.dims()));
        }
        Ok((
            pooled_features(&self.branch_a, images, ca.pooling)?,
            pooled_features(&self.branch_b, images, cb.pooling)?,
        ))
    }

    /// `z_a · W[..d_a] + z_b · W[d_a..] + b`, the same as a linear layer on `[z_a, z_b]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (za, zb) = self.pooled(images)?;
        let w = &self.head["fc.weight"];
        let da = self.branch_a.config().embed_dim;
        let db = self.branch_b.config().embed_dim;
        let la = linear(&za, &w.narrow(0, 0, da)?, None)?;
        let lb = linear(&zb, &w.narrow(0, da, db)?, None)?;
        Ok((la + lb)?.broadcast_add(&self.head["fc.bias"])?)
    }

    pub fn head_param_count(&self) -> usize {
        self.head.values().map(|t| t.elem_count()).sum()
    }

    /// Trainable scalars of both branches plus the head.
    pub fn trainable_param_count(&self) -> usize {
        let side = |p: &ParamSet, m: &TrainableMask| -> usize {
            m.trainable_groups().into_iter().map(|g| p.group_param_count(g)).sum()
        };
        side(&self.branch_a, &self.mask_a) + side(&self.branch_b, &self.mask_b) + self.head_param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.branch_a.param_count() + self.branch_b.param_count() + self.head_param_count()
    }

    fn make_trainable(&mut self) -> Result<Vec<Var>> {
        let mut vars = self.branch_a.make_trainable(self.mask_a.trainable_groups())?;
        vars.extend(self.branch_b.make_trainable(self.mask_b.trainable_groups())?);
        for t in self.head.values_mut() {
            let v = Var::from_tensor(t)?;
            *t = v.as_tensor().clone();
            vars.push(v);
        }
        Ok(vars)
    }

    /// Writes `branch_a.ckpt` (carrying the classifier as its head group) and `branch_b.ckpt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut a = self.branch_a.clone();
        a.set_head(self.head.clone());
        a.metadata.insert("fusion_mask".into(), serde_json::to_string(&self.mask_a)?);
        let mut b = self.branch_b.clone();
        b.metadata.insert("fusion_mask".into(), serde_json::to_string(&self.mask_b)?);
        checkpoint::save(&a, dir.join("branch_a.ckpt"))?;
        checkpoint::save(&b, dir.join("branch_b.ckpt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut a = checkpoint::load(dir.join("branch_a.ckpt"))?;
        let b = checkpoint::load(dir.join("branch_b.ckpt"))?;
        let head = a.remove_head().ok_or_else(|| Error::Format("fusion classifier missing".into()))?;
        let mask = |p: &ParamSet| -> Result<TrainableMask> {
            let s = p.metadata.get("fusion_mask").ok_or_else(|| Error::Format("fusion mask missing".into()))?;
            Ok(serde_json::from_str(s)?)
        };
        let (mask_a, mask_b) = (mask(&a)?, mask(&b)?);
        Ok(FusionModel { branch_a: a, branch_b: b, head, mask_a, mask_b })
    }
}

impl Supervised for FusionModel {
    fn logits(&self, images: &Tensor, _pooling: Pooling) -> Result<Tensor> {
        self.forward(images)
    }

    fn snapshot(&self) -> Result<Self> {
        let mut s = self.clone();
        s.branch_a = self.branch_a.deep_clone()?;
        s.branch_b = self.branch_b.deep_clone()?;
        s.branch_a.freeze_all()?;
        s.branch_b.freeze_all()?;
        s.head = self
            .head
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.detach().copy()?)))
            .collect::<Result<_>>()?;
        Ok(s)
    }
}

pub struct FusionOutcome {
    pub record: RunRecord,
    pub best: FusionModel,
}

/// Fine-tunes a fusion model with the shared loop; both branches see the
/// fine-tuning dataset's statistics.
pub fn fusion_finetune(model: &FusionModel, data: &FinetuneData<'_>, cfg: &FinetuneConfig) -> Result<FusionOutcome> {
    cfg.validate()?;
    let task = Task::Classification { num_classes: model.num_classes() };
    check_data(&task, data)?;
    let stats: NormalizationStats = match cfg.normalization_source {
        NormalizationSource::FinetuneDataset => compute_stats(data.train)?,
        NormalizationSource::PretrainDataset => {
            return Err(config_err!("fusion models always use fine-tuning dataset statistics"))
        }
    };
    let mut m = model.snapshot()?;
    let fingerprint = config_fingerprint(
        &(cfg, &m.mask_a, &m.mask_b, m.branch_a.checksum()?, m.branch_b.checksum()?),
        cfg.seed,
    )?;
    let vars = m.make_trainable()?;
    let opt = make_optimizer(vars, data.train.len(), cfg)?;
    let out = supervised_loop(&m, opt, &task, data, &stats, Pooling::ClassToken, cfg)?;
    let mut record = RunRecord {
        fingerprint,
        seed: cfg.seed,
        tags: Default::default(),
        metric: task.metric().into(),
        epochs: out.epochs,
        best_epoch: out.best_epoch,
        best_metric: out.best_metric,
        test_metric: out.test_metric,
        convergence_epoch: out.best_epoch,
        trainable_param_count: m.trainable_param_count(),
        total_param_count: m.total_param_count(),
        deterministic: deterministic_mode(),
    };
    record.convergence_epoch = convergence_epoch(&record)?;
    record.tags.insert("branch_a_checksum".into(), model.branch_a.checksum()?);
    record.tags.insert("branch_b_checksum".into(), model.branch_b.checksum()?);
    Ok(FusionOutcome { record, best: out.best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::{attach_head, model_forward};
    use crate::ops::{tensor_from_f64, to_f64_vec, Precision};
    use crate::vit::{init_vit, ViTConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vit(dim: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 12,
            embed_dim: dim,
            num_heads: 2,
            mlp_ratio: 2.0,
            ..ViTConfig::default()
        }
    }

    fn images() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..3 * 64).map(|_| rng.random::<f64>() - 0.5).collect();
        tensor_from_f64(&v, &[3, 1, 8, 8], Precision::F32).unwrap()
    }

    fn encoders() -> (ParamSet, ParamSet) {
        (init_vit(&vit(8), 1, Precision::F32).unwrap(), init_vit(&vit(12), 2, Precision::F32).unwrap())
    }

    #[test]
    fn preset_accounting_matches_the_sum_of_parts() {
        let (mae, moco) = encoders();
        let shallow = build_preset(FusionPreset::Shallow, &mae, &moco, 4, 0).unwrap();
        let all = |p: &ParamSet| p.param_count();
        let head = (8 + 12) * 4 + 4;
        assert_eq!(shallow.head["fc.weight"].dims(), &[20, 4]);
        assert_eq!(
            shallow.trainable_param_count(),
            all(&truncate(&mae, 9).unwrap()) + all(&truncate(&moco, 9).unwrap()) + head
        );
        let e2e = build_preset(FusionPreset::EndToEnd, &mae, &moco, 4, 0).unwrap();
        assert_eq!(e2e.trainable_param_count(), all(&mae) + all(&moco) + head);
        let blocks = |p: &ParamSet, r: std::ops::RangeInclusive<usize>| -> usize {
            r.map(|i| p.group_param_count(GroupId::Block(i))).sum()
        };
        let norm = |p: &ParamSet| p.group_param_count(GroupId::FinalNorm);
        let surg = build_preset(FusionPreset::Surgical { moco_full_depth: false }, &mae, &moco, 4, 0).unwrap();
        assert_eq!(surg.branch_a.depth(), 9);
        assert_eq!(surg.branch_b.depth(), 6);
        assert_eq!(
            surg.mask_a.trainable_groups(),
            vec![GroupId::Block(7), GroupId::Block(8), GroupId::Block(9), GroupId::FinalNorm]
        );
        assert_eq!(
            surg.trainable_param_count(),
            blocks(&mae, 7..=9) + norm(&mae) + blocks(&moco, 4..=6) + norm(&moco) + head
        );
        let full = build_preset(FusionPreset::Surgical { moco_full_depth: true }, &mae, &moco, 4, 0).unwrap();
        assert_eq!(full.branch_b.depth(), 12);
        assert_eq!(full.mask_b.trainable_groups(), vec![GroupId::Block(4), GroupId::Block(5), GroupId::Block(6)]);
    }

    #[test]
    fn preset_names_round_trip() {
        for n in FusionPreset::NAMES {
            assert_eq!(n.parse::<FusionPreset>().unwrap().to_string(), n);
        }
        assert!("mae12".parse::<FusionPreset>().is_err());
    }

    #[test]
    fn incompatible_branches_are_config_errors() {
        let (mae, _) = encoders();
        let other = init_vit(&ViTConfig { image_size: 12, ..vit(8) }, 0, Precision::F32).unwrap();
        let e = build_preset(FusionPreset::EndToEnd, &mae, &other, 2, 0).unwrap_err();
        assert_eq!(e.kind(), "config");
        let bad = BranchSpec::new(Some(6), FinetunePolicy::Surgical(LayerRange::new(7, 9)));
        assert_eq!(build_fusion(&mae, &bad, &mae, &bad, 2, 0).unwrap_err().kind(), "config");
        let bad = BranchSpec::new(Some(6), FinetunePolicy::Shallow(9));
        assert_eq!(build_fusion(&mae, &bad, &mae, &bad, 2, 0).unwrap_err().kind(), "config");
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let (mae, moco) = encoders();
        let mut m = build_preset(FusionPreset::EndToEnd, &mae, &moco, 3, 0).unwrap();
        for t in m.head.values_mut() {
            *t = t.zeros_like().unwrap();
        }
        assert!(to_f64_vec(&m.forward(&images()).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_branches_with_permuted_head_rows_is_exact() {
        let (mae, moco) = encoders();
        let m = build_preset(FusionPreset::Shallow, &mae, &moco, 3, 5).unwrap();
        let w = &m.head["fc.weight"];
        let swapped_w = Tensor::cat(&[&w.narrow(0, 8, 12).unwrap(), &w.narrow(0, 0, 8).unwrap()], 0).unwrap();
        let mut s = m.clone();
        std::mem::swap(&mut s.branch_a, &mut s.branch_b);
        std::mem::swap(&mut s.mask_a, &mut s.mask_b);
        s.head.insert("fc.weight".into(), swapped_w);
        let x = images();
        assert_eq!(to_f64_vec(&m.forward(&x).unwrap()).unwrap(), to_f64_vec(&s.forward(&x).unwrap()).unwrap());
    }

    #[test]
    fn ablated_branch_matches_single_branch_model() {
        let (mae, moco) = encoders();
        let mut m = build_preset(FusionPreset::Surgical { moco_full_depth: false }, &mae, &moco, 3, 1).unwrap();
        let w = m.head["fc.weight"].clone();
        let wa = w.narrow(0, 0, 8).unwrap();
        let zeroed = Tensor::cat(&[&wa, &w.narrow(0, 8, 12).unwrap().zeros_like().unwrap()], 0).unwrap();
        m.head.insert("fc.weight".into(), zeroed);
        let mut single = attach_head(&m.branch_a, &Task::Classification { num_classes: 3 }, 0).unwrap();
        let mut h = single.remove_head().unwrap();
        h.insert("fc.weight".into(), wa);
        h.insert("fc.bias".into(), m.head["fc.bias"].clone());
        single.set_head(h);
        let x = images();
        let fused = to_f64_vec(&m.forward(&x).unwrap()).unwrap();
        let alone = to_f64_vec(&model_forward(&single, &x, Pooling::ClassToken).unwrap()).unwrap();
        assert_eq!(fused, alone);
    }

    #[test]
    fn save_and_load_round_trip() {
        let (mae, moco) = encoders();
        let m = build_preset(FusionPreset::Shallow, &mae, &moco, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = FusionModel::load(dir.path()).unwrap();
        let x = images();
        assert_eq!(to_f64_vec(&m.forward(&x).unwrap()).unwrap(), to_f64_vec(&back.forward(&x).unwrap()).unwrap());
        assert_eq!(back.mask_b, m.mask_b);
    }
}
