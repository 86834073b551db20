//! Post-training re-estimation of BN running statistics on target images.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, Dataset, Image};
use crate::error::{config_err, Error, Result};
use crate::model::Networks;
use crate::nn::{ChannelStats, Mode, Real};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Full sweeps over the images.
    pub passes: usize,
    pub batch_size: usize,
    /// Reset running statistics to zero mean, unit variance first.
    pub reset: bool,
    /// Seeds the per-pass image order.
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { passes: 5, batch_size: 64, reset: true, seed: 0 }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(config_err("calibration needs at least one pass"));
        }
        if self.batch_size == 0 {
            return Err(config_err("calibration batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Replaces the running statistics of every BN layer of the test-time model
/// by moving averages gathered from train-mode forwards over `images`. No
/// learnable parameter is touched.
pub fn calibrate<T: Real>(nets: &mut Networks<T>, images: &[&Image], cfg: &CalibrationConfig) -> Result<()> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one image".into()));
    }
    if cfg.reset {
        nets.bn_layers_mut().into_iter().for_each(|bn| bn.reset_running_stats());
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    for pass in 0..cfg.passes {
        order.shuffle(&mut rng_for(cfg.seed, &[0xbc, pass as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let x = images_to_tensor::<T>(&batch)?;
            nets.forward_main(&x, Mode::Train, false)?;
        }
    }
    Ok(())
}

/// Calibrates on every image of `data`; labels are never read.
pub fn calibrate_on<T: Real>(nets: &mut Networks<T>, data: &Dataset, cfg: &CalibrationConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    calibrate(nets, &data.images(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exact per-channel mean and (population) variance of every BN layer's
/// input over the whole image set.
///
/// Layers are resolved front to back: once a layer's statistics are known
/// they are installed in a copy of the networks, which then runs in eval
/// mode to produce the next layer's inputs. The result is the fixed point
/// that moving-average calibration approaches as passes grow.
pub fn bn_stat_oracle<T: Real>(nets: &Networks<T>, images: &[&Image], batch_size: usize) -> Result<Vec<LayerStats>> {
    if images.is_empty() {
        return Err(Error::InvalidInput("oracle needs at least one image".into()));
    }
    let mut work = nets.clone();
    let layers = work.bn_layers().len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let channels = work.bn_layers()[l].channels;
        work.bn_layers_mut()[l].collector = Some(ChannelStats::new(channels));
        for chunk in images.chunks(batch_size.max(1)) {
            let x = images_to_tensor::<T>(chunk)?;
            work.forward_main(&x, Mode::Eval, false)?;
        }
        let bn = &mut work.bn_layers_mut()[l];
        let stats = bn.collector.take().expect("collector installed above");
        let var = stats.variance();
        bn.set_running_stats(&stats.mean, &var)?;
        out.push(LayerStats { name: bn.gamma.name.trim_end_matches(".gamma").to_string(), mean: stats.mean, var });
    }
    Ok(out)
}

/// Largest relative deviation of the networks' running statistics from the
/// oracle. Mean errors are measured against the channel's scale
/// `max(|mean|, std)`, since a mean can sit arbitrarily close to zero;
/// variance errors against the variance itself.
pub fn oracle_rel_error<T: Real>(nets: &Networks<T>, oracle: &[LayerStats]) -> f64 {
    let mut worst = 0.0f64;
    for (bn, o) in nets.bn_layers().iter().zip(oracle) {
        for c in 0..bn.channels {
            let (m, v) = (o.mean[c], o.var[c]);
            let scale = m.abs().max(v.sqrt());
            if scale > 0.0 {
                worst = worst.max((bn.running_mean[c].as_f64() - m).abs() / scale);
            }
            if v > 0.0 {
                worst = worst.max((bn.running_var[c].as_f64() - v).abs() / v);
            }
        }
    }
    worst
}
