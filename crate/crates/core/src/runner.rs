//! One complete experiment: train, optionally calibrate, evaluate, and
//! leave every artifact in a run directory named after the config.
//!
//! Run directory contents: `config.toml` (the resolved config),
//! `metrics.jsonl`, `last.ckpt`, `best.ckpt`, `calibrated.ckpt` (calibrating
//! presets only) and `summary.json`, written last.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bncal::calibrate_on;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{manifest_path, DataConfig, ResolvedConfig};
use crate::data::{generate_synthetic_pair, load_manifest, Dataset, Domain, Split, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::model::build_networks;
use crate::training::{train, EvalEntry, TrainArtifacts, TrainData};

/// The four splits of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl RunData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        if let Some(spec) = cfg.synthetic_spec() {
            let p = generate_synthetic_pair(&spec)?;
            return Ok(Self {
                source_train: p.source_train,
                source_test: p.source_test,
                target_train: p.target_train,
                target_test: p.target_test,
            });
        }
        let dir = cfg.manifest_dir.as_deref().expect("manifest_dir set when not synthetic");
        let load = |d, s| load_manifest(manifest_path(dir, d, s))?.load_dataset();
        Ok(Self {
            source_train: load(Domain::Source, Split::Train)?,
            source_test: load(Domain::Source, Split::Test)?,
            target_train: load(Domain::Target, Split::Train)?,
            target_test: load(Domain::Target, Split::Test)?,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            source_train: &self.source_train,
            target_train: &self.target_train,
            source_test: Some(&self.source_test),
            target_test: Some(&self.target_test),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub iter: usize,
    pub value: f64,
}

/// Final numbers of a run, in percentage points of the task's headline
/// metric. `target` is measured after calibration when the preset
/// calibrates, with the uncalibrated figure in `target_before_bn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: Task,
    pub metric: String,
    pub iters: usize,
    pub source: f64,
    pub target: f64,
    pub target_before_bn: Option<f64>,
    /// Best uncalibrated target metric seen at any evaluation.
    pub best_target: Option<BestEval>,
    /// `target` minus the target metric of the matching source-only run
    /// (same config family and seed), when that run exists in the output
    /// directory.
    pub gain_vs_src: Option<f64>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join("summary.json"))?)?)
    }
}

fn headline(records: &[MetricsRecord], domain: Domain) -> Result<f64> {
    records
        .iter()
        .find(|r| r.domain == domain)
        .map(MetricsRecord::headline)
        .ok_or_else(|| Error::InvalidInput(format!("no {} evaluation", domain.as_str())))
}

fn evaluate_both(nets: &mut crate::model::Networks<f32>, data: &RunData, bs: usize) -> Result<Vec<MetricsRecord>> {
    let mut out = evaluate(nets, &data.source_test, bs)?;
    out.extend(evaluate(nets, &data.target_test, bs)?);
    Ok(out)
}

#[derive(Serialize)]
struct CalibrationLine {
    iter: usize,
    stage: &'static str,
    eval: Vec<EvalEntry>,
}

pub fn run_dir(out_dir: &Path, cfg: &ResolvedConfig) -> PathBuf {
    out_dir.join(cfg.run_name())
}

/// Runs the experiment described by `cfg` under `out_dir`. Refuses to touch
/// a directory that already has a `summary.json` unless `force` is set, in
/// which case the directory is cleared first.
pub fn execute(cfg: &ResolvedConfig, out_dir: &Path, force: bool) -> Result<RunSummary> {
    let data = RunData::load(&cfg.data)?;
    execute_with_data(cfg, &data, out_dir, force)
}

/// [`execute`] with preloaded data, which must be what `cfg.data` describes.
pub fn execute_with_data(cfg: &ResolvedConfig, data: &RunData, out_dir: &Path, force: bool) -> Result<RunSummary> {
    let dir = run_dir(out_dir, cfg);
    if dir.join("summary.json").exists() {
        if !force {
            return Err(Error::RunExists(dir));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let hash = cfg.hash();
    log::info!("run {} ({} iterations)", dir.display(), cfg.train.max_iters);

    let nets = build_networks::<f32>(&cfg.arch, cfg.seed())?;
    let artifacts = TrainArtifacts { dir: &dir, config_hash: &hash };
    let outcome = train(nets, data.train_data(), &cfg.train, Some(artifacts))?;
    let (iters, records) = outcome.evals.last().cloned().expect("train evaluates at the end");
    let mut nets = outcome.nets;
    let source = headline(&records, Domain::Source)?;
    let mut target = headline(&records, Domain::Target)?;
    let mut target_before_bn = None;

    if cfg.calibrate {
        calibrate_on(&mut nets, &data.target_train, &cfg.calibration)?;
        let meta = CheckpointMeta { config_hash: hash.clone(), iter: iters, bn_calibrated: true };
        save_checkpoint(&dir.join("calibrated.ckpt"), &nets, &meta)?;
        let calibrated = evaluate_both(&mut nets, data, cfg.train.eval_batch_size)?;
        target_before_bn = Some(target);
        target = headline(&calibrated, Domain::Target)?;
        let line = CalibrationLine {
            iter: iters,
            stage: "bn_calibrated",
            eval: calibrated
                .iter()
                .map(|r| EvalEntry { domain: r.domain, metric: r.metric_name().into(), value: r.headline() })
                .collect(),
        };
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.join("metrics.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&line)?)?;
    }

    let src = cfg.src_counterpart();
    let gain_vs_src = if src.hash() == hash {
        Some(target - headline(&records, Domain::Target)?)
    } else {
        RunSummary::load(&run_dir(out_dir, &src)).ok().map(|s| target - s.target)
    };
    let summary = RunSummary {
        preset: cfg.preset().to_string(),
        config_hash: hash,
        seed: cfg.seed(),
        task: cfg.arch.task,
        metric: records[0].metric_name().into(),
        iters,
        source,
        target,
        target_before_bn,
        best_target: outcome.best.map(|(iter, value)| BestEval { iter, value }),
        gain_vs_src,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
