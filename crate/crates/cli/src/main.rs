use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ssda_core::bncal::calibrate;
use ssda_core::checkpoint::{load_checkpoint, save_checkpoint};
use ssda_core::config::{Preset, RunConfig};
use ssda_core::data::{generate_synthetic_pair, load_manifest, Dataset, Domain, Task};
use ssda_core::eval::{evaluate, export_embeddings, predict, save_prediction_png, MetricsRecord};
use ssda_core::runner::{execute, RunData};

#[derive(Parser)]
#[command(name = "ssda", version, about = "Self-supervised domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic source/target pair to PNGs and manifests.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train, calibrate if the preset asks for it, and evaluate.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// e.g. `src`, `tar`, `rot+adv+bn`; replaces the config's preset.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-estimate BN statistics of a checkpoint on target training images.
    CalibrateBn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Print per-domain metrics of a checkpoint on held-out data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Also write metrics to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Segmentation only: dump argmax maps as PNGs here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write pooled tap features of held-out images as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run `train` in a separate process for every preset and seed.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "src,tar,rot,rot+adv,rot+adv+bn,src+bn")]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
}

/// Data for the checkpoint commands: explicit manifests, or the `[data]`
/// section of a config.
#[derive(Args)]
struct DataArgs {
    /// Manifest CSV; repeat for several.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Split {
    TargetTrain,
    Test,
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<Vec<Dataset>> {
        if !self.manifests.is_empty() {
            if self.config.is_some() {
                bail!("--manifest and --config are mutually exclusive");
            }
            return self
                .manifests
                .iter()
                .map(|m| {
                    load_manifest(m)
                        .and_then(|m| m.load_dataset())
                        .with_context(|| format!("--manifest {}", m.display()))
                })
                .collect();
        }
        let cfg = load_config(self.config.as_deref())?;
        cfg.data.validate()?;
        let data = RunData::load(&cfg.data)?;
        Ok(match split {
            Split::TargetTrain => vec![data.target_train],
            Split::Test => vec![data.source_test, data.target_test],
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_ckpt(path: &Path) -> Result<ssda_core::model::Networks<f32>> {
    let (nets, _) = load_checkpoint(path).with_context(|| format!("--checkpoint {}", path.display()))?;
    Ok(nets)
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    domain: Domain,
    metric: &'a str,
    value: f64,
    accuracy: f64,
    miou: f64,
    per_class_iou: &'a [Option<f64>],
    units: u64,
}

fn metrics_json(records: &[MetricsRecord]) -> Result<String> {
    let lines: Vec<MetricsLine<'_>> = records
        .iter()
        .map(|r| MetricsLine {
            domain: r.domain,
            metric: r.metric_name(),
            value: r.headline(),
            accuracy: r.accuracy,
            miou: r.miou,
            per_class_iou: &r.per_class_iou,
            units: r.units,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&lines)?)
}

fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out_dir: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.data.validate()?;
    let Some(mut spec) = cfg.data.synthetic_spec() else {
        bail!("data.manifest_dir is set; generate needs [data.synthetic]");
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if out_dir.join("spec.json").exists() && !force {
        bail!("{} already holds a generated pair (pass --force to overwrite)", out_dir.display());
    }
    let pair = generate_synthetic_pair(&spec)?;
    for path in pair.write(out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(config: Option<&Path>, preset: Option<&str>, seed: u64, out_dir: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?.resolve(preset)?.with_seed(seed);
    let summary = execute(&cfg, out_dir, force)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_calibrate(
    checkpoint: &Path,
    out: &Path,
    data: &DataArgs,
    passes: Option<usize>,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    if out.exists() && !force {
        bail!("--out {} exists (pass --force to overwrite)", out.display());
    }
    let (mut nets, mut meta) = load_checkpoint(checkpoint).with_context(|| format!("--checkpoint {}", checkpoint.display()))?;
    let mut cal = match &data.config {
        Some(p) => RunConfig::load(p)?.calibration,
        None => Default::default(),
    };
    if let Some(p) = passes {
        cal.passes = p;
    }
    if let Some(s) = seed {
        cal.seed = s;
    }
    let sets = data.load(Split::TargetTrain)?;
    let images: Vec<_> = sets
        .iter()
        .flat_map(|d| d.samples.iter().filter(|s| s.domain == Domain::Target).map(|s| &s.image))
        .collect();
    if images.is_empty() {
        bail!("--manifest holds no target images to calibrate on");
    }
    calibrate(&mut nets, &images, &cal)?;
    meta.bn_calibrated = true;
    save_checkpoint(out, &nets, &meta)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &DataArgs, out: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let mut nets = load_ckpt(checkpoint)?;
    let mut records = Vec::new();
    let sets = data.load(Split::Test)?;
    for d in &sets {
        records.extend(evaluate(&mut nets, d, 64)?);
    }
    if let Some(dir) = predictions {
        if nets.arch.task != Task::Segmentation {
            bail!("--predictions is only available for segmentation");
        }
        std::fs::create_dir_all(dir)?;
        for d in &sets {
            for (i, s) in d.samples.iter().enumerate() {
                let pred = predict(&mut nets, &[&s.image])?;
                let name = format!("{}_{i:05}.png", s.domain.as_str());
                save_prediction_png(&pred, s.image.height, s.image.width, &dir.join(name))?;
            }
        }
    }
    let json = metrics_json(&records)?;
    if let Some(p) = out {
        std::fs::write(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_export(checkpoint: &Path, data: &DataArgs, out: &Path) -> Result<()> {
    let mut nets = load_ckpt(checkpoint)?;
    let sets = data.load(Split::Test)?;
    let refs: Vec<&Dataset> = sets.iter().collect();
    let n = export_embeddings(&mut nets, &refs, out, 64)?;
    println!("{n} rows -> {}", out.display());
    Ok(())
}

fn cmd_sweep(
    config: Option<&Path>,
    presets: &[String],
    seeds: &[u64],
    out_dir: &Path,
    jobs: usize,
    force: bool,
) -> Result<()> {
    let mut parsed = Vec::new();
    for p in presets {
        parsed.push(p.parse::<Preset>()?);
    }
    // Source-only runs go first so the others can report their gain.
    parsed.sort_by_key(|p| *p != Preset::SRC);
    let exe = std::env::current_exe()?;
    let mut queue = Vec::new();
    for &seed in seeds {
        for p in &parsed {
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--preset").arg(p.to_string()).arg("--seed").arg(seed.to_string());
            cmd.arg("--out-dir").arg(out_dir);
            if let Some(c) = config {
                cmd.arg("--config").arg(c);
            }
            if force {
                cmd.arg("--force");
            }
            queue.push((format!("{p} seed {seed}"), cmd));
        }
    }
    let mut failed = Vec::new();
    let mut running: Vec<(String, Child)> = Vec::new();
    let mut queue = queue.into_iter();
    loop {
        while running.len() < jobs.max(1) {
            let Some((name, mut cmd)) = queue.next() else { break };
            log::info!("launching {name}");
            running.push((name, cmd.spawn()?));
        }
        if running.is_empty() {
            break;
        }
        let (name, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        bail!("{} run(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Cmd::Generate { config, seed, out_dir, force } => cmd_generate(config.as_deref(), *seed, out_dir, *force),
        Cmd::Train { config, preset, seed, out_dir, force } => {
            cmd_train(config.as_deref(), preset.as_deref(), *seed, out_dir, *force)
        }
        Cmd::CalibrateBn { checkpoint, out, data, passes, seed, force } => {
            cmd_calibrate(checkpoint, out, data, *passes, *seed, *force)
        }
        Cmd::Eval { checkpoint, data, out, predictions } => {
            cmd_eval(checkpoint, data, out.as_deref(), predictions.as_deref())
        }
        Cmd::ExportEmbeddings { checkpoint, data, out } => cmd_export(checkpoint, data, out),
        Cmd::Sweep { config, presets, seeds, out_dir, jobs, force } => {
            cmd_sweep(config.as_deref(), presets, seeds, out_dir, *jobs, *force)
        }
    }
}
