//! Experiment configuration, the (method × policy × size × seed) sweep, the
//! JSON-lines result store, aggregation and plots.

mod aggregate;
mod plot;
mod store;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::MoCoConfig;
use crate::data::{
    manifest::manifest_root, split, ClassificationManifest, Dataset, SegmentationManifest, SplitSpec, SyntheticConfig,
};
use crate::data::synth_generate;
use crate::error::{config_err, Error, Result};
use crate::finetune::{FinetuneConfig, SegHeadConfig, Task};
use crate::restorative::MAEConfig;
use crate::vit::ViTConfig;

pub use aggregate::{aggregate, render_table, AggregateRow, ValueField};
pub use plot::{emit_plot, read_sidecar, sidecar_map, PlotKind, SidecarRow};
pub use store::ResultStore;
pub use sweep::{run_cell, run_sweep, CellPolicy, SweepCell, SweepContext, SweepGrid, SweepSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Classification,
    Segmentation,
}

/// Where the data comes from: a `gen-data` directory, one manifest to be
/// split, or (neither set) the synthetic generator in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `train.tsv`, `val.tsv`, `test.tsv` (and `*_seg.tsv`).
    pub dir: Option<PathBuf>,
    /// A single manifest, split with `split`.
    pub manifest: Option<PathBuf>,
    pub split: SplitSpec,
    pub synthetic: SyntheticConfig,
    pub task: TaskKind,
}

/// Train, validation and test datasets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn task(&self, kind: TaskKind, seg: &SegHeadConfig) -> Task {
        match kind {
            TaskKind::Classification => Task::Classification { num_classes: self.train.num_classes() },
            TaskKind::Segmentation => Task::Segmentation(seg.clone()),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        let seg = self.task == TaskKind::Segmentation;
        match (&self.dir, &self.manifest) {
            (Some(_), Some(_)) => Err(config_err!("set data.dir or data.manifest, not both")),
            (Some(dir), None) => {
                let load = |name: &str| -> Result<Dataset> {
                    let source = format!("{}/{name}", dir.display());
                    if seg {
                        SegmentationManifest::read(dir.join(format!("{name}_seg.tsv")))?.load(dir, &source)
                    } else {
                        ClassificationManifest::read(dir.join(format!("{name}.tsv")))?.load(dir, &source)
                    }
                };
                Ok(Splits { train: load("train")?, val: load("val")?, test: load("test")? })
            }
            (None, Some(path)) => {
                let root = manifest_root(path);
                let source = path.display().to_string();
                let all = if seg {
                    SegmentationManifest::read(path)?.load(&root, &source)?
                } else {
                    ClassificationManifest::read(path)?.load(&root, &source)?
                };
                let (tr, va, te) = split(&(0..all.len()).collect::<Vec<_>>(), &self.split)?;
                Ok(Splits { train: all.subset(&tr)?, val: all.subset(&va)?, test: all.subset(&te)? })
            }
            (None, None) => {
                let out = synth_generate(&self.synthetic)?;
                let get = |n: &str| if seg { out.segmentation(n) } else { out.classification(n) };
                Ok(Splits { train: get("train")?, val: get("val")?, test: get("test")? })
            }
        }
    }
}

/// Everything a run needs, read from one TOML file. Unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub vit: ViTConfig,
    pub data: DataConfig,
    pub moco: MoCoConfig,
    pub mae: MAEConfig,
    pub finetune: FinetuneConfig,
    pub segmentation: SegHeadConfig,
    pub sweep: SweepGrid,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}", e.to_string().replace('\n', " ")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize config: {e}"))
    }

    /// Sets every seed that is not a sweep axis.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.moco.seed = seed;
        self.mae.seed = seed;
        self.finetune.seed = seed;
        self.data.synthetic.seed = seed;
        self.data.split.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.finetune.validate()?;
        self.sweep.validate()?;
        self.moco.validate()?;
        self.mae.validate(&self.vit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_toml("[finetune]\nlearning_rat = 0.1\n").unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(e.to_string().contains("learning_rat"), "{e}");
        let e = ExperimentConfig::from_toml("[nonsense]\n").unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = ExperimentConfig::from_toml("[vit]\ndepth = 4\n[sweep]\nsizes = [50]\n").unwrap();
        assert_eq!(c.vit.depth, 4);
        assert_eq!(c.vit.embed_dim, ViTConfig::default().embed_dim);
        assert_eq!(c.sweep.sizes, vec![50]);
    }
}
