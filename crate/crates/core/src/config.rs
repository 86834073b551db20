//! Experiment configuration: TOML files, composable presets, and the
//! hash that names a run.
//!
//! A preset is a `+`-joined list of tokens: `src`, `tar`, `rot`, `mixrot`,
//! `sprot`, `adv`, `bn`. It sets the mode fields of `[train]` (supervision,
//! pretext mode, adversarial) and the top-level `calibrate` flag, overriding
//! whatever the file says about them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bncal::CalibrationConfig;
use crate::data::{load_manifest, Domain, Split, SyntheticShiftSpec, Task};
use crate::error::{config_err, Result};
use crate::model::{ArchitectureSpec, FeatureTap};
use crate::pretext::PretextMode;
use crate::training::{Supervision, TrainConfig};

/// The mode fields a preset controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub supervision: Supervision,
    pub pretext: Option<PretextMode>,
    pub adversarial: bool,
    pub calibrate: bool,
}

impl Preset {
    pub const SRC: Preset = Preset { supervision: Supervision::Source, pretext: None, adversarial: false, calibrate: false };

    pub fn of(train: &TrainConfig, calibrate: bool) -> Self {
        Self { supervision: train.supervision, pretext: train.pretext_mode, adversarial: train.adversarial, calibrate }
    }

    pub fn apply(&self, train: &mut TrainConfig, calibrate: &mut bool) {
        train.supervision = self.supervision;
        train.pretext_mode = self.pretext;
        train.adversarial = self.adversarial;
        *calibrate = self.calibrate;
    }
}

impl FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Preset::SRC;
        let (mut src, mut tar) = (false, false);
        let mut seen: Vec<&str> = Vec::new();
        for tok in s.split('+').map(str::trim) {
            let tok_lc = tok.to_ascii_lowercase();
            if seen.iter().any(|t| t.eq_ignore_ascii_case(tok)) {
                return Err(config_err(format!("preset: duplicate token `{tok}` in `{s}`")));
            }
            seen.push(tok);
            match tok_lc.as_str() {
                "src" => src = true,
                "tar" => tar = true,
                "rot" | "mixrot" | "sprot" => {
                    if p.pretext.is_some() {
                        return Err(config_err(format!("preset: more than one pretext task in `{s}`")));
                    }
                    p.pretext = Some(match tok_lc.as_str() {
                        "rot" => PretextMode::Rot,
                        "mixrot" => PretextMode::MixRot,
                        _ => PretextMode::SpRot,
                    });
                }
                "adv" => p.adversarial = true,
                "bn" => p.calibrate = true,
                _ => {
                    return Err(config_err(format!(
                        "preset: unknown token `{tok}` in `{s}` (expected src, tar, rot, mixrot, sprot, adv, bn)"
                    )))
                }
            }
        }
        if tar {
            if seen.len() > 1 {
                return Err(config_err(format!("preset: `tar` cannot be combined with other tokens in `{s}`")));
            }
            p.supervision = Supervision::Target;
        }
        if src && (p.pretext.is_some() || p.adversarial) {
            return Err(config_err(format!("preset: `src` excludes adaptation terms in `{s}`")));
        }
        Ok(p)
    }
}

impl fmt::Display for Preset {
    /// Canonical spelling, e.g. `rot+adv+bn`, `src`, `src+bn`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.supervision == Supervision::Target {
            return f.write_str("tar");
        }
        let mut parts: Vec<&str> = Vec::new();
        match self.pretext {
            Some(PretextMode::Rot) => parts.push("rot"),
            Some(PretextMode::MixRot) => parts.push("mixrot"),
            Some(PretextMode::SpRot) => parts.push("sprot"),
            None => {}
        }
        if self.adversarial {
            parts.push("adv");
        }
        if parts.is_empty() {
            parts.push("src");
        }
        if self.calibrate {
            parts.push("bn");
        }
        f.write_str(&parts.join("+"))
    }
}

/// Where the four splits come from. With neither field set, the default
/// synthetic classification pair is generated in memory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `source_train.csv`, `source_test.csv`,
    /// `target_train.csv` and `target_test.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticShiftSpec>,
}

pub fn manifest_path(dir: &Path, domain: Domain, split: Split) -> PathBuf {
    dir.join(format!("{}_{}.csv", domain.as_str(), split.as_str()))
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.manifest_dir, &self.synthetic) {
            (Some(_), Some(_)) => Err(config_err("data: set either manifest_dir or synthetic, not both")),
            (None, Some(s)) => s.validate().map_err(|e| config_err(format!("data.synthetic: {e}"))),
            _ => Ok(()),
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticShiftSpec> {
        match (&self.manifest_dir, &self.synthetic) {
            (None, Some(s)) => Some(s.clone()),
            (None, None) => Some(SyntheticShiftSpec::default()),
            _ => None,
        }
    }

    /// Task and class count, read from the source training manifest when
    /// the data lives on disk.
    pub fn task_and_classes(&self) -> Result<(Task, usize)> {
        match (&self.manifest_dir, self.synthetic_spec()) {
            (_, Some(s)) => Ok((s.task, s.num_classes)),
            (Some(dir), None) => {
                let m = load_manifest(manifest_path(dir, Domain::Source, Split::Train))?;
                Ok((m.task, m.num_classes))
            }
            (None, None) => unreachable!("synthetic_spec covers the empty case"),
        }
    }
}

/// Architecture knobs; task, class count and pretext label count come from
/// the data and the pretext mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 4],
    pub discriminator_channels: [usize; 2],
    pub feature_tap: FeatureTap,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = ArchitectureSpec::new(Task::Classification, 2, 4);
        Self {
            encoder_channels: a.encoder_channels,
            discriminator_channels: a.discriminator_channels,
            feature_tap: a.feature_tap,
            bn_eps: a.bn_eps,
            bn_momentum: a.bn_momentum,
        }
    }
}

/// A config file as written by hand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Recalibrate BN statistics on target training images after training.
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(config_err(format!("--config: no such file {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Applies the preset (the file's own, or `preset_override`), derives
    /// the architecture and validates everything.
    pub fn resolve(&self, preset_override: Option<&str>) -> Result<ResolvedConfig> {
        self.data.validate()?;
        let mut train = self.train.clone();
        let mut calibrate = self.calibrate;
        if let Some(p) = preset_override.or(self.preset.as_deref()) {
            p.parse::<Preset>()?.apply(&mut train, &mut calibrate);
        }
        let (task, num_classes) = self.data.task_and_classes()?;
        let k = train.pretext_mode.map_or(4, PretextMode::num_labels);
        let m = &self.model;
        let arch = ArchitectureSpec {
            encoder_channels: m.encoder_channels,
            discriminator_channels: m.discriminator_channels,
            feature_tap: m.feature_tap,
            bn_eps: m.bn_eps,
            bn_momentum: m.bn_momentum,
            ..ArchitectureSpec::new(task, num_classes, k)
        };
        arch.validate().map_err(|e| config_err(format!("model: {e}")))?;
        train.validate(&arch).map_err(|e| config_err(format!("train: {e}")))?;
        self.calibration.validate().map_err(|e| config_err(format!("calibration: {e}")))?;
        Ok(ResolvedConfig { data: self.data.clone(), arch, train, calibrate, calibration: self.calibration })
    }
}

/// A validated config with the preset applied. Seeds live in `train.seed`
/// and `calibration.seed`, which [`ResolvedConfig::with_seed`] sets
/// together; neither enters the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub data: DataConfig,
    pub arch: ArchitectureSpec,
    pub train: TrainConfig,
    pub calibrate: bool,
    pub calibration: CalibrationConfig,
}

impl ResolvedConfig {
    pub fn preset(&self) -> Preset {
        Preset::of(&self.train, self.calibrate)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.calibration.seed = seed;
        self
    }

    /// Hex SHA-256 of the canonical JSON form with the seeds zeroed.
    pub fn hash(&self) -> String {
        let unseeded = self.clone().with_seed(0);
        let json = serde_json::to_vec(&unseeded).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// The same experiment with every adaptation switch off, i.e. the
    /// source-only run it should be compared against.
    pub fn src_counterpart(&self) -> Self {
        let mut c = self.clone();
        Preset::SRC.apply(&mut c.train, &mut c.calibrate);
        c.arch.pretext_labels = 4;
        c
    }

    /// `<preset>-<hash8>-s<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}-s{}", self.preset(), &self.hash()[..8], self.seed())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }
}
