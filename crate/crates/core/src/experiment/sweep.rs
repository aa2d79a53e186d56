use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::ResultStore;
use super::{ExperimentConfig, Splits};
use crate::checkpoint;
use crate::data::subsample;
use crate::error::{config_err, input_err, Error, Result};
use crate::finetune::{
    apply_policy, attach_head, build_trainable_mask, config_fingerprint, finetune, FinetuneConfig, FinetuneData,
    FinetunePolicy, RunRecord, Task,
};
use crate::fusion::{build_preset, fusion_finetune, FusionPreset};
use crate::vit::{init_vit, LayerRange, ParamSet};

pub const METHODS: [&str; 3] = ["moco", "mae", "random"];

/// A fine-tuning policy for one encoder, or a two-branch fusion preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellPolicy {
    Single(FinetunePolicy),
    Fusion(FusionPreset),
}

impl fmt::Display for CellPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellPolicy::Single(p) => write!(f, "{p}"),
            CellPolicy::Fusion(p) => write!(f, "fusion:{p}"),
        }
    }
}

impl FromStr for CellPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().strip_prefix("fusion:") {
            Some(p) => Ok(CellPolicy::Fusion(p.parse()?)),
            None => Ok(CellPolicy::Single(s.parse()?)),
        }
    }
}

impl Serialize for CellPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// The sweep axes plus the pre-trained checkpoint for each method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    /// `moco`, `mae` or `random` (no pre-training).
    pub methods: Vec<String>,
    pub policies: Vec<CellPolicy>,
    /// Fine-tuning subset sizes; a size at or above the training split uses all of it.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Checkpoint file per pre-training method.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        let quarters = LayerRange::quarters(12).expect("12 is divisible by 4");
        Self {
            methods: vec!["moco".into(), "mae".into()],
            policies: quarters.iter().map(|r| CellPolicy::Single(FinetunePolicy::Surgical(*r))).collect(),
            sizes: vec![100, 1000],
            seeds: vec![0, 1, 2],
            checkpoints: BTreeMap::new(),
        }
    }
}

/// One unit of work: fine-tune `method`'s checkpoint with `policy` on `size` samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub policy: CellPolicy,
    pub size: usize,
    pub seed: u64,
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "method={} policy={} size={} seed={}", self.method, self.policy, self.size, self.seed)
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.policies.is_empty() || self.sizes.is_empty() || self.seeds.is_empty() {
            return Err(config_err!("sweep axes must be non-empty"));
        }
        if let Some(m) = self.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            return Err(config_err!("unknown method `{m}` (expected one of {METHODS:?})"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_err!("sweep seeds must be pairwise distinct"));
        }
        if self.sizes.contains(&0) {
            return Err(config_err!("sweep sizes must be >= 1"));
        }
        Ok(())
    }

    /// Every cell in axis order. Fusion presets combine both pre-trained
    /// encoders, so they appear once per (size, seed) with method `mae+moco`.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        let mut fusion_done = BTreeSet::new();
        for method in &self.methods {
            for policy in &self.policies {
                for &size in &self.sizes {
                    for &seed in &self.seeds {
                        let method = match policy {
                            CellPolicy::Fusion(p) => {
                                if !fusion_done.insert((p.to_string(), size, seed)) {
                                    continue;
                                }
                                "mae+moco".to_string()
                            }
                            CellPolicy::Single(_) => method.clone(),
                        };
                        out.push(SweepCell { method, policy: *policy, size, seed });
                    }
                }
            }
        }
        out
    }

    /// Checkpoint methods the cells need.
    pub fn required_checkpoints(&self) -> BTreeSet<String> {
        let mut need = BTreeSet::new();
        for c in self.cells() {
            match c.policy {
                CellPolicy::Fusion(_) => {
                    need.insert("mae".to_string());
                    need.insert("moco".to_string());
                }
                CellPolicy::Single(_) if c.method != "random" => {
                    need.insert(c.method.clone());
                }
                _ => {}
            }
        }
        need
    }
}

/// Loaded data and checkpoints shared by every cell of a sweep.
pub struct SweepContext {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub checkpoints: BTreeMap<String, ParamSet>,
    /// SHA-256 of each checkpoint file, part of every cell fingerprint.
    pub checkpoint_digests: BTreeMap<String, String>,
}

impl SweepContext {
    /// Loads data and every checkpoint the grid needs; a missing one fails here,
    /// before any cell runs.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut checkpoints = BTreeMap::new();
        let mut checkpoint_digests = BTreeMap::new();
        for m in config.sweep.required_checkpoints() {
            let path = config
                .sweep
                .checkpoints
                .get(&m)
                .ok_or_else(|| config_err!("sweep needs a `{m}` checkpoint (sweep.checkpoints.{m})"))?;
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            checkpoint_digests.insert(m.clone(), hex::encode(Sha256::digest(&bytes)));
            checkpoints.insert(m, checkpoint::decode(&bytes)?);
        }
        let splits = config.data.load()?;
        Ok(Self { config, splits, checkpoints, checkpoint_digests })
    }

    /// Stable hash of everything that determines the cell's result.
    pub fn fingerprint(&self, cell: &SweepCell) -> Result<String> {
        let c = &self.config;
        let digests: BTreeMap<&String, &String> = self
            .checkpoint_digests
            .iter()
            .filter(|(m, _)| match cell.policy {
                CellPolicy::Fusion(_) => true,
                CellPolicy::Single(_) => **m == cell.method,
            })
            .collect();
        let key = serde_json::json!({
            "cell": { "method": cell.method, "policy": cell.policy.to_string(), "size": cell.size },
            "vit": c.vit,
            "data": c.data,
            "finetune": FinetuneConfig { seed: cell.seed, ..c.finetune.clone() },
            "segmentation": c.segmentation,
            "checkpoints": digests,
        });
        config_fingerprint(&key, cell.seed)
    }
}

/// Runs one cell in this process.
pub fn run_cell(ctx: &SweepContext, cell: &SweepCell) -> Result<RunRecord> {
    let cfg = FinetuneConfig { seed: cell.seed, ..ctx.config.finetune.clone() };
    let train_idx = subsample(&(0..ctx.splits.train.len()).collect::<Vec<_>>(), cell.size, cell.seed)?;
    let train = ctx.splits.train.subset(&train_idx)?;
    let data = FinetuneData { train: &train, val: &ctx.splits.val, test: Some(&ctx.splits.test) };
    let task = ctx.splits.task(ctx.config.data.task, &ctx.config.segmentation);
    let ckpt = |m: &str| ctx.checkpoints.get(m).ok_or_else(|| input_err!("no `{m}` checkpoint loaded"));
    let mut record = match cell.policy {
        CellPolicy::Single(policy) => {
            let encoder = if cell.method == "random" {
                init_vit(&ctx.config.vit, cell.seed, cfg.precision)?
            } else {
                ckpt(&cell.method)?.clone()
            };
            let model = attach_head(&apply_policy(&encoder, policy)?, &task, cell.seed)?;
            let mask = build_trainable_mask(policy, encoder.depth())?;
            finetune(&model, &mask, &data, &cfg)?.record
        }
        CellPolicy::Fusion(preset) => {
            let Task::Classification { num_classes } = task else {
                return Err(config_err!("fusion presets are classification-only"));
            };
            let model = build_preset(preset, ckpt("mae")?, ckpt("moco")?, num_classes, cell.seed)?;
            fusion_finetune(&model, &data, &cfg)?.record
        }
    };
    record.fingerprint = ctx.fingerprint(cell)?;
    record.tags.insert("method".into(), cell.method.clone());
    record.tags.insert("policy".into(), cell.policy.to_string());
    record.tags.insert("size".into(), cell.size.to_string());
    record.tags.insert("train_size".into(), train.len().to_string());
    record.tags.insert("task".into(), task.name().into());
    Ok(record)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub total: usize,
    pub skipped: usize,
    pub executed: usize,
}

/// Executes every cell whose fingerprint is not yet in `store`, with up to
/// `parallelism` cells in flight. `exec` produces the record of one cell
/// (in-process or in a child process). After a failure no new cells start;
/// records already appended stay in the store.
pub fn run_sweep<F>(
    cells: &[(SweepCell, String)],
    store: &ResultStore,
    parallelism: usize,
    exec: F,
) -> Result<SweepSummary>
where
    F: Fn(&SweepCell) -> Result<RunRecord> + Sync,
{
    let done = store.fingerprints()?;
    let todo: Vec<&(SweepCell, String)> = cells.iter().filter(|(_, fp)| !done.contains(fp)).collect();
    let summary = SweepSummary { total: cells.len(), skipped: cells.len() - todo.len(), executed: todo.len() };
    let next = Mutex::new(todo.into_iter());
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        if failed.load(Ordering::SeqCst) {
            return;
        }
        let Some((cell, fp)) = next.lock().expect("queue lock").next() else {
            return;
        };
        let outcome = exec(cell).and_then(|r| {
            if &r.fingerprint != fp {
                return Err(Error::Eval(format!("cell {cell} returned fingerprint {}, expected {fp}", r.fingerprint)));
            }
            store.append(&r)
        });
        match outcome {
            Ok(_) => log::info!("finished {cell}"),
            Err(e) => {
                failed.store(true, Ordering::SeqCst);
                first_error.lock().expect("error lock").get_or_insert(e);
                return;
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1) {
            s.spawn(worker);
        }
    });
    match first_error.into_inner().expect("error lock") {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
