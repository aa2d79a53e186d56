//! `ftlab`: pre-train, fine-tune, fuse, sweep and report.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use ftlab::checkpoint;
use ftlab::contrastive::moco_pretrain;
use ftlab::data::{compute_stats, subsample, synth_generate, NormalizationStats};
use ftlab::error::{Error, Result};
use ftlab::experiment::{
    aggregate, emit_plot, render_table, run_cell, run_sweep, ExperimentConfig, PlotKind, ResultStore, SweepCell,
    SweepContext, ValueField,
};
use ftlab::finetune::{
    apply_policy, attach_head, build_trainable_mask, embed_dataset, evaluate, finetune, model_task, resolve_stats,
    FinetuneData, FinetunePolicy,
};
use ftlab::fusion::{build_preset, fusion_finetune, FusionPreset};
use ftlab::metrics::{neighbor_montage, nn_analysis};
use ftlab::restorative::mae_pretrain;
use ftlab::train::deterministic_mode;
use ftlab::vit::{init_vit, truncate};

#[derive(Parser)]
#[command(name = "ftlab", version, about = "Self-supervised pre-training and layer-selective fine-tuning of vision transformers")]
struct Cli {
    /// TOML experiment config; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config except the sweep axis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Moco,
    Mae,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Self-supervised pre-training on the training split (labels ignored).
    Pretrain {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes a checkpoint (or a random encoder) under one policy.
    Finetune {
        /// Pre-trained encoder; omit for random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `e2e`, `surgical:lo-hi` or `shallow:N`.
        #[arg(long, default_value = "e2e")]
        policy: String,
        /// Subsample the training split to this many images.
        #[arg(long)]
        size: Option<usize>,
        /// Where to write the best checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Result store to append the run record to.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Builds and fine-tunes a two-branch fusion preset.
    Fuse {
        /// `e2e12+12`, `shallow9+9` or `surgical_mae9_moco6`.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        mae: PathBuf,
        #[arg(long)]
        moco: PathBuf,
        /// Keep the contrastive branch at full depth in the surgical preset.
        #[arg(long)]
        moco_full_depth: bool,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Evaluates a fine-tuned checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Runs every missing cell of the configured grid.
    Sweep {
        #[arg(long)]
        store: PathBuf,
        /// Print the cells and exit.
        #[arg(long)]
        dry_run: bool,
        /// Cells run concurrently, each in its own process.
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
    },
    #[command(hide = true)]
    SweepCell {
        #[arg(long)]
        cell: String,
    },
    /// Mean ± sample std of stored runs.
    Aggregate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "method,policy,size")]
        group_by: Vec<String>,
        #[arg(long, default_value = "test_metric")]
        value: String,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG figure plus a `.tsv` sidecar from stored runs.
    Plot {
        #[arg(long)]
        store: PathBuf,
        /// `lines_vs_size` or `grouped_bars`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        group_by: Option<Vec<String>>,
        #[arg(long, default_value = "test_metric")]
        value: String,
        #[arg(long, default_value = "")]
        title: String,
    },
    /// Nearest training neighbors of test images in the encoder's feature space.
    NnAnalysis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Test images shown in the montage.
        #[arg(long, default_value_t = 8)]
        queries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keeps the first N blocks of a checkpoint.
    Truncate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the synthetic dataset (PNGs and manifests).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn train_subset(train: &ftlab::data::Dataset, size: Option<usize>, seed: u64) -> Result<ftlab::data::Dataset> {
    match size {
        Some(n) => train.subset(&subsample(&(0..train.len()).collect::<Vec<_>>(), n, seed)?),
        None => Ok(train.clone()),
    }
}

fn store_record(store: Option<&Path>, record: &ftlab::finetune::RunRecord) -> Result<()> {
    if let Some(p) = store {
        ResultStore::new(p).append(record)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Pretrain { method, out } => {
            let splits = cfg.data.load()?;
            let unlabeled = splits.train.without_targets();
            let stats = compute_stats(&unlabeled)?;
            let result = match method {
                Method::Moco => moco_pretrain(&unlabeled, &cfg.vit, &cfg.moco, &stats)?,
                Method::Mae => mae_pretrain(&unlabeled, &cfg.vit, &cfg.mae, &stats)?,
            };
            checkpoint::save(&result.model, out)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "selected_epoch": result.selected_epoch,
                "losses": result.losses,
            }))
        }
        Cmd::Finetune { checkpoint: ckpt, policy, size, out, store } => {
            let splits = cfg.data.load()?;
            let policy: FinetunePolicy = policy.parse()?;
            let seed = cfg.finetune.seed;
            let encoder = match ckpt {
                Some(p) => checkpoint::load(p)?,
                None => init_vit(&cfg.vit, seed, cfg.finetune.precision)?,
            };
            let task = splits.task(cfg.data.task, &cfg.segmentation);
            let model = attach_head(&apply_policy(&encoder, policy)?, &task, seed)?;
            let mask = build_trainable_mask(policy, encoder.depth())?;
            let train = train_subset(&splits.train, *size, seed)?;
            let data = FinetuneData { train: &train, val: &splits.val, test: Some(&splits.test) };
            let outcome = finetune(&model, &mask, &data, &cfg.finetune)?;
            let mut record = outcome.record;
            let method = match encoder.metadata.get("ssl_method").map(String::as_str) {
                Some(m) if m != "none" => m.to_string(),
                _ => "random".to_string(),
            };
            record.tags.insert("method".into(), method);
            record.tags.insert("policy".into(), policy.to_string());
            record.tags.insert("size".into(), train.len().to_string());
            if let Some(o) = out {
                checkpoint::save(&outcome.best, o)?;
            }
            store_record(store.as_deref(), &record)?;
            print_json(&record)
        }
        Cmd::Fuse { preset, mae, moco, moco_full_depth, size, out, store } => {
            let splits = cfg.data.load()?;
            let mut preset: FusionPreset = preset.parse()?;
            if let FusionPreset::Surgical { moco_full_depth: full } = &mut preset {
                *full = *moco_full_depth;
            }
            let seed = cfg.finetune.seed;
            let model = build_preset(preset, &checkpoint::load(mae)?, &checkpoint::load(moco)?, splits.train.num_classes(), seed)?;
            let train = train_subset(&splits.train, *size, seed)?;
            let data = FinetuneData { train: &train, val: &splits.val, test: Some(&splits.test) };
            let outcome = fusion_finetune(&model, &data, &cfg.finetune)?;
            let mut record = outcome.record;
            record.tags.insert("method".into(), "mae+moco".into());
            record.tags.insert("policy".into(), format!("fusion:{preset}"));
            record.tags.insert("size".into(), train.len().to_string());
            if let Some(o) = out {
                outcome.best.save(o)?;
            }
            store_record(store.as_deref(), &record)?;
            print_json(&record)
        }
        Cmd::Eval { checkpoint: ckpt, split } => {
            let model = checkpoint::load(ckpt)?;
            let task = model_task(&model)?;
            let splits = cfg.data.load()?;
            let ds = match split {
                SplitName::Train => &splits.train,
                SplitName::Val => &splits.val,
                SplitName::Test => &splits.test,
            };
            let stats = match NormalizationStats::from_metadata(&model.metadata)? {
                Some(s) => s,
                None => compute_stats(&splits.train)?,
            };
            let pooling = cfg.finetune.pooling.unwrap_or(model.config().pooling);
            let value = evaluate(&model, ds, &stats, pooling, cfg.finetune.batch_size, cfg.finetune.precision)?;
            print_json(&serde_json::json!({ "metric": task.metric(), "value": value, "n": ds.len() }))
        }
        Cmd::Sweep { store, dry_run, parallelism } => sweep(&cli, cfg, store, *dry_run, *parallelism),
        Cmd::SweepCell { cell } => {
            let cell: SweepCell = serde_json::from_str(cell)?;
            let ctx = SweepContext::prepare(cfg)?;
            print_json(&run_cell(&ctx, &cell)?)
        }
        Cmd::Aggregate { store, group_by, value, out } => {
            let records = ResultStore::new(store).records()?;
            let rows = aggregate(&records, group_by, value.parse::<ValueField>()?)?;
            let table = render_table(&rows);
            if let Some(o) = out {
                std::fs::write(o, &table).map_err(|e| Error::io(o, e))?;
            }
            print!("{table}");
            Ok(())
        }
        Cmd::Plot { store, kind, out, group_by, value, title } => {
            let kind: PlotKind = kind.parse()?;
            let group_by = group_by.clone().unwrap_or_else(|| match kind {
                PlotKind::LinesVsSize => vec!["method".into(), "policy".into(), "size".into()],
                PlotKind::GroupedBars => vec!["method".into(), "policy".into()],
            });
            let records = ResultStore::new(store).records()?;
            let value_field: ValueField = value.parse()?;
            let rows = aggregate(&records, &group_by, value_field)?;
            let metric = records.first().map_or("value", |r| r.metric.as_str());
            let side = emit_plot(&rows, kind, out, title, if value == "test_metric" { metric } else { value })?;
            print_json(&serde_json::json!({ "figure": out, "sidecar": side }))
        }
        Cmd::NnAnalysis { checkpoint: ckpt, k, queries, out } => {
            let encoder = checkpoint::load(ckpt)?.without_head();
            let splits = cfg.data.load()?;
            let stats = resolve_stats(&encoder, &splits.train, cfg.finetune.normalization_source)?;
            let pooling = cfg.finetune.pooling.unwrap_or(encoder.config().pooling);
            let bs = cfg.finetune.batch_size;
            let train_f = embed_dataset(&encoder, &splits.train, &stats, pooling, bs)?;
            let test_f = embed_dataset(&encoder, &splits.test, &stats, pooling, bs)?;
            let labels = |d: &ftlab::data::Dataset| -> Result<Vec<Vec<u8>>> {
                d.labels().map(<[_]>::to_vec).ok_or_else(|| Error::Config("nn-analysis needs a classification dataset".into()))
            };
            let report = nn_analysis(&train_f, &labels(&splits.train)?, &test_f, &labels(&splits.test)?, *k)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let shown = (*queries).min(splits.test.len());
            let q: Vec<&ftlab::data::Image> = splits.test.images.iter().take(shown).collect();
            let sub = ftlab::metrics::NeighborReport {
                k: report.k,
                indices: report.indices[..shown].to_vec(),
                distances: report.distances[..shown].to_vec(),
                nn_label_mauc: report.nn_label_mauc,
            };
            neighbor_montage(&q, &splits.train.images, &sub, out.join("montage.png"))?;
            let path = out.join("neighbors.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
            print_json(&serde_json::json!({ "k": k, "nn_label_mauc": report.nn_label_mauc, "report": path }))
        }
        Cmd::Truncate { input, n, out } => {
            let t = truncate(&checkpoint::load(input)?, *n)?;
            checkpoint::save(&t, out)?;
            print_json(&serde_json::json!({ "checkpoint": out, "depth": t.depth() }))
        }
        Cmd::GenData { out } => {
            let data = synth_generate(&cfg.data.synthetic)?;
            data.write(out)?;
            print_json(&serde_json::json!({
                "dir": out,
                "train": data.train.images.len(),
                "val": data.val.images.len(),
                "test": data.test.images.len(),
            }))
        }
    }
}

fn sweep(cli: &Cli, cfg: ExperimentConfig, store: &Path, dry_run: bool, parallelism: usize) -> Result<()> {
    let cells = cfg.sweep.cells();
    if dry_run {
        for (i, c) in cells.iter().enumerate() {
            println!("cell {i}: {c}");
        }
        println!("{} cells", cells.len());
        return Ok(());
    }
    let ctx = SweepContext::prepare(cfg)?;
    let keyed = cells
        .into_iter()
        .map(|c| ctx.fingerprint(&c).map(|fp| (c, fp)))
        .collect::<Result<Vec<_>>>()?;
    let store = ResultStore::new(store);
    let summary = if parallelism <= 1 {
        run_sweep(&keyed, &store, 1, |c| run_cell(&ctx, c))?
    } else {
        let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
        run_sweep(&keyed, &store, parallelism, |c| {
            let mut cmd = Command::new(&exe);
            if let Some(p) = &cli.config {
                cmd.arg("--config").arg(p);
            }
            if let Some(s) = cli.seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            cmd.arg("sweep-cell").arg("--cell").arg(serde_json::to_string(c)?);
            let out = cmd.output().map_err(|e| Error::io(&exe, e))?;
            if !out.status.success() {
                return Err(Error::Eval(format!(
                    "cell {c} failed: {}",
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
            Ok(serde_json::from_slice(&out.stdout)?)
        })?
    };
    print_json(&serde_json::json!({
        "total": summary.total,
        "skipped": summary.skipped,
        "executed": summary.executed,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if deterministic_mode() {
        // single-threaded kernels; must be set before the first tensor op
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
