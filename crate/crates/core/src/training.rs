//! Joint training: pretext and main-task gradients accumulated in the shared
//! encoder, optional prediction-layer adversarial alignment, and the
//! source-only / target-supervised reference runs.

use std::cell::Cell;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_checkpoint, CheckpointMeta};
use crate::data::{images_to_tensor, BatchIterator, Dataset, Domain, Label, LabelMap, LabeledSample, Task};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::losses::{
    adversarial_loss, classification_loss, discriminator_loss, full_objective, pretext_loss, segmentation_loss,
    DomainLabel, LossWeights, Reduction,
};
use crate::model::{ArchitectureSpec, NetSet, Networks};
use crate::nn::{softmax_backward, softmax_channels, Mode, Real, Tensor};
use crate::optim::{Sgd, SgdConfig};
use crate::pretext::{make_pretext_samples, pretext_image_list, PoolImage, PretextConfig, PretextMode};
use crate::seed::{derive_seed, rng_for};

/// Whose labels train the main head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Source labels only; the adaptation setting.
    #[default]
    Source,
    /// Target labels; the supervised reference run. Nothing else is trained.
    Target,
}

mod pretext_setting {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::pretext::PretextMode;

    pub fn serialize<S: Serializer>(v: &Option<PretextMode>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str("none"),
            Some(m) => m.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PretextMode>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "none" {
            return Ok(None);
        }
        PretextMode::deserialize(serde::de::value::StrDeserializer::<D::Error>::new(&s))
            .map(Some)
            .map_err(|_| serde::de::Error::custom(format!("unknown pretext mode `{s}` (none, rot, mixrot, sprot)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub supervision: Supervision,
    #[serde(with = "pretext_setting")]
    pub pretext_mode: Option<PretextMode>,
    pub adversarial: bool,
    /// Apply the confusion loss to target outputs only instead of both domains.
    pub adv_target_only: bool,
    pub weights: LossWeights,
    pub optimizer: SgdConfig,
    pub disc_optimizer: SgdConfig,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub max_iters: usize,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub expand_all_rotations: bool,
    pub loss_normalization: Reduction,
    /// In builds with debug assertions, compare the accumulated encoder
    /// gradient against separate backward passes every this many steps (0 = never).
    pub verify_accumulation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            supervision: Supervision::Source,
            pretext_mode: None,
            adversarial: false,
            adv_target_only: false,
            weights: LossWeights::default(),
            optimizer: SgdConfig::default(),
            disc_optimizer: SgdConfig::discriminator_default(),
            batch_size_source: 16,
            batch_size_target: 16,
            max_iters: 2000,
            eval_every: 500,
            eval_batch_size: 64,
            seed: 0,
            crop_size: 16,
            expand_all_rotations: true,
            loss_normalization: Reduction::Mean,
            verify_accumulation_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn pretext_config(&self) -> Option<PretextConfig> {
        self.pretext_mode.map(|mode| PretextConfig {
            mode,
            crop_size: self.crop_size,
            expand_all_rotations: self.expand_all_rotations,
        })
    }

    pub fn validate(&self, arch: &ArchitectureSpec) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.disc_optimizer.validate()?;
        if self.batch_size_source == 0 || self.batch_size_target == 0 || self.eval_batch_size == 0 {
            return Err(config_err("batch sizes must be at least 1"));
        }
        if self.supervision == Supervision::Target && (self.pretext_mode.is_some() || self.adversarial) {
            return Err(config_err("target-supervised reference runs take no pretext or adversarial terms"));
        }
        if let Some(m) = self.pretext_mode {
            if m.num_labels() != arch.pretext_labels {
                return Err(config_err(format!(
                    "pretext mode {m:?} has {} labels but the pretext head has {}",
                    m.num_labels(),
                    arch.pretext_labels
                )));
            }
        }
        Ok(())
    }
}

thread_local! {
    static TARGET_LABEL_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of target-domain labels handed out by [`supervision`] on this thread.
pub fn target_label_reads() -> u64 {
    TARGET_LABEL_READS.with(Cell::get)
}

/// The only path from a sample's ground truth to a training loss. Target
/// labels are refused unless the run is the target-supervised reference.
pub fn supervision(sample: &LabeledSample, mode: Supervision) -> Result<&Label> {
    if sample.domain == Domain::Target {
        if mode != Supervision::Target {
            return Err(Error::TaintViolation);
        }
        TARGET_LABEL_READS.with(|c| c.set(c.get() + 1));
    }
    Ok(sample.raw_label())
}

/// Main-task ground truth of one batch.
#[derive(Debug, Clone)]
pub enum MainTargets<'a> {
    Classes(Vec<usize>),
    Maps(Vec<&'a LabelMap>),
}

impl<'a> MainTargets<'a> {
    pub fn gather(samples: &[&'a LabeledSample], task: Task, mode: Supervision) -> Result<Self> {
        match task {
            Task::Classification => samples
                .iter()
                .map(|s| match supervision(s, mode)? {
                    Label::Class(c) => Ok(*c),
                    Label::Map(_) => Err(Error::InvalidInput("label map in a classification batch".into())),
                })
                .collect::<Result<_>>()
                .map(MainTargets::Classes),
            Task::Segmentation => samples
                .iter()
                .map(|s| match supervision(s, mode)? {
                    Label::Map(m) => Ok(m),
                    Label::Class(_) => Err(Error::InvalidInput("class label in a segmentation batch".into())),
                })
                .collect::<Result<_>>()
                .map(MainTargets::Maps),
        }
    }
}

pub fn main_loss<T: Real>(logits: &Tensor<T>, targets: &MainTargets<'_>, reduction: Reduction) -> Result<(f64, Tensor<T>)> {
    match targets {
        MainTargets::Classes(c) => classification_loss(logits, c),
        MainTargets::Maps(m) => segmentation_loss(logits, m, reduction),
    }
}

#[derive(Debug, Clone)]
pub struct PretextBatch<T> {
    pub patches: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Everything one training iteration consumes.
#[derive(Debug, Clone)]
pub struct StepBatch<'a, T> {
    /// Supervised images (source, or target for the reference run).
    pub main_images: Tensor<T>,
    pub main_targets: MainTargets<'a>,
    pub pretext: Option<PretextBatch<T>>,
    /// Target images for the adversarial phases.
    pub adv_target_images: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: usize,
    pub pretext: Option<f64>,
    pub main: f64,
    pub adversarial: Option<f64>,
    pub discriminator: Option<f64>,
    pub total: f64,
    pub grad_norm_encoder: f64,
}

/// Relative disagreement between the accumulated encoder gradient and the
/// sum of separately computed pretext and main-task gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccumulationCheck {
    pub max_rel_error: f64,
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Networks plus optimizer state, with each phase of an iteration exposed.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub nets: Networks<T>,
    pub cfg: TrainConfig,
    opt: Sgd<T>,
    opt_disc: Sgd<T>,
    pub iter: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(nets: Networks<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&nets.arch)?;
        Ok(Self { opt: Sgd::new(cfg.optimizer), opt_disc: Sgd::new(cfg.disc_optimizer), nets, cfg, iter: 0 })
    }

    fn lr(&self) -> f64 {
        self.cfg.optimizer.lr_at(self.iter, self.cfg.max_iters)
    }

    /// Gradient sets reached by the pretext loss. With the final tap on
    /// segmentation the pretext head reads the prediction layer, which then
    /// accumulates pretext gradient as well.
    fn pretext_grads(&self) -> NetSet {
        NetSet { encoder: true, pretext_head: true, main_head: true, discriminator: false }
    }

    /// Step (1): weighted pretext loss backpropagated into `P` and `E`.
    pub fn pretext_phase(&mut self, batch: &PretextBatch<T>) -> Result<f64> {
        let logits = self.nets.forward_pretext(&batch.patches, Mode::Train, true)?;
        let (loss, mut d) = pretext_loss(&logits, &batch.labels, self.nets.arch.pretext_labels)?;
        d.scale(T::lit(self.cfg.weights.lambda_p));
        self.nets.backward_pretext(&d, self.pretext_grads())?;
        Ok(loss)
    }

    /// Step (2): update `P` with the pretext gradient alone.
    pub fn update_pretext_head(&mut self) {
        let lr = self.lr();
        self.opt.step(self.nets.pretext_head.params_mut(), lr);
    }

    /// Step (3): main-task loss backpropagated into `S` and `E`, adding onto
    /// whatever the encoder already holds.
    pub fn main_phase(&mut self, images: &Tensor<T>, targets: &MainTargets<'_>) -> Result<f64> {
        let logits = self.nets.forward_main(images, Mode::Train, true)?;
        let (loss, d) = main_loss(&logits, targets, self.cfg.loss_normalization)?;
        self.nets.backward_main(&d, NetSet::MAIN_MODEL)?;
        Ok(loss)
    }

    fn domains<'b>(&self, source: &'b Tensor<T>, target: &'b Tensor<T>) -> Vec<(&'b Tensor<T>, DomainLabel)> {
        if self.cfg.adv_target_only {
            vec![(target, DomainLabel::TARGET)]
        } else {
            vec![(source, DomainLabel::SOURCE), (target, DomainLabel::TARGET)]
        }
    }

    /// Generator phase: the weighted confusion loss on the prediction-layer
    /// outputs, accumulated into `E` only. `D` and `S` pass gradients
    /// through without accumulating any. BN normalizes with batch
    /// statistics and leaves its running estimates alone.
    pub fn generator_phase(&mut self, source: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut total = 0.0;
        for (x, z) in self.domains(source, target) {
            let logits = self.nets.forward_main(x, Mode::BatchStats, true)?;
            let probs = softmax_channels(&logits);
            let zmap = self.nets.forward_discriminator(&probs, true)?;
            let (loss, mut dz) = adversarial_loss(&zmap, z, self.cfg.loss_normalization)?;
            total += loss;
            dz.scale(T::lit(self.cfg.weights.lambda_adv));
            let dprobs = self.nets.backward_discriminator(&dz, false)?;
            let dlogits = softmax_backward(&probs, &dprobs);
            self.nets.backward_main(&dlogits, NetSet::ENCODER)?;
        }
        Ok(total)
    }

    /// Step (4): one update of `E` and `S` with everything accumulated.
    pub fn update_main_model(&mut self) {
        let lr = self.lr();
        self.opt.step(self.nets.params_mut(NetSet::MAIN_MODEL), lr);
    }

    /// Discriminator phase: outputs recomputed with the updated, frozen
    /// encoder (nothing cached, so no gradient can reach it) and the
    /// weighted domain-classification loss accumulated into `D`.
    pub fn discriminator_phase(&mut self, source: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut total = 0.0;
        for (x, z) in [(source, DomainLabel::SOURCE), (target, DomainLabel::TARGET)] {
            let logits = self.nets.forward_main(x, Mode::BatchStats, false)?;
            let probs = softmax_channels(&logits);
            let zmap = self.nets.forward_discriminator(&probs, true)?;
            let (loss, mut dz) = discriminator_loss(&zmap, z, self.cfg.loss_normalization)?;
            total += loss;
            dz.scale(T::lit(self.cfg.weights.lambda_d));
            self.nets.backward_discriminator(&dz, true)?;
        }
        Ok(total)
    }

    pub fn update_discriminator(&mut self) {
        let lr = self.cfg.disc_optimizer.lr_at(self.iter, self.cfg.max_iters);
        self.opt_disc.step(self.nets.discriminator.params_mut(), lr);
    }

    fn encoder_grads(&self) -> Vec<Vec<f64>> {
        self.nets.params(NetSet::ENCODER).iter().map(|p| p.grad.iter().map(|g| g.as_f64()).collect()).collect()
    }

    fn encoder_grad_norm(&self) -> f64 {
        self.nets
            .params(NetSet::ENCODER)
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One iteration in the order pretext, main, generator, discriminator.
    pub fn step(&mut self, batch: &StepBatch<'_, T>) -> Result<StepReport> {
        self.step_inner(batch, false).map(|(r, _)| r)
    }

    fn step_inner(&mut self, batch: &StepBatch<'_, T>, snapshot: bool) -> Result<(StepReport, Option<Vec<Vec<f64>>>)> {
        let iter = self.iter;
        let diverged = |e: Error| match e {
            Error::NonFinite(what) => Error::Diverged { iter, reason: format!("non-finite {what}") },
            other => other,
        };
        self.nets.zero_grad(NetSet::ALL);
        let mut pretext = None;
        if let Some(pb) = &batch.pretext {
            pretext = Some(self.pretext_phase(pb).map_err(diverged)?);
            self.update_pretext_head();
        }
        let main = self.main_phase(&batch.main_images, &batch.main_targets).map_err(diverged)?;
        let accumulated = snapshot.then(|| self.encoder_grads());
        let (mut adversarial, mut disc) = (None, None);
        let adv_target = if self.cfg.adversarial {
            Some(batch.adv_target_images.as_ref().ok_or_else(|| config_err("adversarial step without target images"))?)
        } else {
            None
        };
        if let Some(tgt) = adv_target {
            adversarial = Some(self.generator_phase(&batch.main_images, tgt).map_err(diverged)?);
        }
        let grad_norm_encoder = self.encoder_grad_norm();
        self.update_main_model();
        if let Some(tgt) = adv_target {
            disc = Some(self.discriminator_phase(&batch.main_images, tgt).map_err(diverged)?);
            self.update_discriminator();
        }
        self.nets.clear_caches();
        let total = full_objective(
            main,
            pretext.unwrap_or(0.0),
            adversarial.unwrap_or(0.0),
            disc.unwrap_or(0.0),
            &self.cfg.weights,
        );
        if !total.is_finite() || !grad_norm_encoder.is_finite() {
            return Err(Error::Diverged { iter, reason: "non-finite loss or gradient".into() });
        }
        self.iter += 1;
        let report = StepReport { iter, pretext, main, adversarial, discriminator: disc, total, grad_norm_encoder };
        Ok((report, accumulated))
    }

    /// Runs one step while checking the accumulated encoder gradient against
    /// `grad(L_main) + lambda_p * grad(L_p)` from two independent backward
    /// passes on copies of the networks.
    pub fn step_verified(&mut self, batch: &StepBatch<'_, T>) -> Result<(StepReport, AccumulationCheck)> {
        let mut oracle: Option<Vec<Vec<f64>>> = None;
        let mut add = |g: Vec<Vec<f64>>| match &mut oracle {
            None => oracle = Some(g),
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
        };
        if let Some(pb) = &batch.pretext {
            let mut t = self.clone();
            t.nets.zero_grad(NetSet::ALL);
            t.pretext_phase(pb)?;
            add(t.encoder_grads());
        }
        let mut t = self.clone();
        t.nets.zero_grad(NetSet::ALL);
        t.main_phase(&batch.main_images, &batch.main_targets)?;
        add(t.encoder_grads());
        let oracle = oracle.expect("main phase always contributes");
        let (report, acc) = self.step_inner(batch, true)?;
        let acc = acc.expect("snapshot requested");
        let max_rel_error = acc.iter().zip(&oracle).map(|(a, o)| rel_l2(a, o)).fold(0.0, f64::max);
        Ok((report, AccumulationCheck { max_rel_error }))
    }
}

/// Datasets of one training run. Train sets hold a single domain each.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source_train: &'a Dataset,
    pub target_train: &'a Dataset,
    pub source_test: Option<&'a Dataset>,
    pub target_test: Option<&'a Dataset>,
}

impl TrainData<'_> {
    fn validate(&self, arch: &ArchitectureSpec) -> Result<()> {
        for (name, d, dom) in [("source_train", self.source_train, Domain::Source), ("target_train", self.target_train, Domain::Target)] {
            if d.is_empty() {
                return Err(Error::InvalidInput(format!("{name} is empty")));
            }
            if d.samples.iter().any(|s| s.domain != dom) {
                return Err(Error::InvalidInput(format!("{name} must hold only {} samples", dom.as_str())));
            }
        }
        for d in [Some(self.source_train), Some(self.target_train), self.source_test, self.target_test].into_iter().flatten() {
            if d.task != arch.task || d.num_classes != arch.num_classes {
                return Err(Error::InvalidInput(format!(
                    "dataset ({} with {} classes) does not match the model ({} with {} classes)",
                    d.task.as_str(),
                    d.num_classes,
                    arch.task.as_str(),
                    arch.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Draws the batches of every iteration from seeded, cycling streams.
pub struct BatchSource<'a> {
    data: TrainData<'a>,
    cfg: TrainConfig,
    task: Task,
    main: BatchIterator,
    pretext_pool: Vec<PoolImage>,
    pretext_iter: Option<BatchIterator>,
    adv_iter: Option<BatchIterator>,
}

impl<'a> BatchSource<'a> {
    pub fn new(data: TrainData<'a>, cfg: &TrainConfig, task: Task) -> Result<Self> {
        let seed = cfg.seed;
        let (main_set, bs) = match cfg.supervision {
            Supervision::Source => (data.source_train, cfg.batch_size_source),
            Supervision::Target => (data.target_train, cfg.batch_size_target),
        };
        let main = BatchIterator::new(main_set.len(), bs, derive_seed(seed, &[0x3a1]), true)?;
        let (pretext_pool, pretext_iter) = match cfg.pretext_config() {
            Some(pc) => {
                let pool = pretext_image_list(data.target_train, Some(data.source_train), pc.mode)?;
                for p in &pool {
                    let img = &Self::pool_set(&data, p.domain).samples[p.index].image;
                    pc.validate_for(img.height, img.width)?;
                }
                let it = BatchIterator::new(pool.len(), cfg.batch_size_target, derive_seed(seed, &[0x7a2]), true)?;
                (pool, Some(it))
            }
            None => (Vec::new(), None),
        };
        let adv_iter = if cfg.adversarial {
            Some(BatchIterator::new(data.target_train.len(), cfg.batch_size_target, derive_seed(seed, &[0xad7]), true)?)
        } else {
            None
        };
        Ok(Self { data, cfg: cfg.clone(), task, main, pretext_pool, pretext_iter, adv_iter })
    }

    fn pool_set<'d>(data: &TrainData<'d>, domain: Domain) -> &'d Dataset {
        match domain {
            Domain::Target => data.target_train,
            Domain::Source => data.source_train,
        }
    }

    pub fn next_batch<T: Real>(&mut self, iter: usize) -> Result<StepBatch<'a, T>> {
        let main_set = match self.cfg.supervision {
            Supervision::Source => self.data.source_train,
            Supervision::Target => self.data.target_train,
        };
        let idx = self.main.next().expect("cycling iterator");
        let samples: Vec<&'a LabeledSample> = idx.iter().map(|&i| &main_set.samples[i]).collect();
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let main_images = images_to_tensor(&images)?;
        let main_targets = MainTargets::gather(&samples, self.task, self.cfg.supervision)?;

        let pretext = match (&mut self.pretext_iter, self.cfg.pretext_config()) {
            (Some(it), Some(pc)) => {
                let idx = it.next().expect("cycling iterator");
                let mut rng = rng_for(self.cfg.seed, &[0x9e7, iter as u64]);
                let mut patches = Vec::new();
                let mut labels = Vec::new();
                for &k in &idx {
                    let p = self.pretext_pool[k];
                    let img = &Self::pool_set(&self.data, p.domain).samples[p.index].image;
                    for s in make_pretext_samples(img, p.domain, &pc, &mut rng)? {
                        labels.push(s.label);
                        patches.push(s.patch);
                    }
                }
                let refs: Vec<_> = patches.iter().collect();
                Some(PretextBatch { patches: images_to_tensor(&refs)?, labels })
            }
            _ => None,
        };

        let adv_target_images = match &mut self.adv_iter {
            Some(it) => {
                let idx = it.next().expect("cycling iterator");
                let imgs: Vec<_> = idx.iter().map(|&i| &self.data.target_train.samples[i].image).collect();
                Some(images_to_tensor(&imgs)?)
            }
            None => None,
        };
        Ok(StepBatch { main_images, main_targets, pretext, adv_target_images })
    }
}

/// Where `train` writes its checkpoints and metrics.
#[derive(Debug, Clone, Copy)]
pub struct TrainArtifacts<'a> {
    pub dir: &'a Path,
    pub config_hash: &'a str,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub domain: Domain,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct LogLine<'a> {
    iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    losses: Option<&'a StepReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    eval: Vec<EvalEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accumulation_rel_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final networks.
    pub nets: Networks<f32>,
    pub last_report: Option<StepReport>,
    /// Held-out evaluations by iteration.
    pub evals: Vec<(usize, Vec<MetricsRecord>)>,
    /// Iteration and metric of the best held-out target evaluation.
    pub best: Option<(usize, f64)>,
}

fn eval_all(nets: &mut Networks<f32>, data: &TrainData<'_>, bs: usize) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for d in [data.source_test, data.target_test].into_iter().flatten() {
        out.extend(evaluate(nets, d, bs)?);
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Runs `cfg.max_iters` iterations, evaluating every `cfg.eval_every`
/// iterations and at the end. With `artifacts`, writes `metrics.jsonl`,
/// `last.ckpt` (at every evaluation) and `best.ckpt` (best target metric).
/// On divergence the last checkpoint written stays untouched and
/// [`Error::Diverged`] is returned.
pub fn train(nets: Networks<f32>, data: TrainData<'_>, cfg: &TrainConfig, artifacts: Option<TrainArtifacts<'_>>) -> Result<TrainOutcome> {
    data.validate(&nets.arch)?;
    let task = nets.arch.task;
    let mut trainer = Trainer::new(nets, cfg.clone())?;
    let mut batches = BatchSource::new(data, cfg, task)?;
    let mut log = match artifacts {
        Some(a) => {
            std::fs::create_dir_all(a.dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(a.dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let verify_every = if cfg!(debug_assertions) { cfg.verify_accumulation_every } else { 0 };
    let mut outcome = TrainOutcome { nets: trainer.nets.clone(), last_report: None, evals: Vec::new(), best: None };

    let checkpoint_eval = |trainer: &mut Trainer<f32>,
                               outcome: &mut TrainOutcome,
                               log: &mut Option<std::io::BufWriter<std::fs::File>>,
                               report: Option<&StepReport>|
     -> Result<()> {
        let it = trainer.iter;
        let records = eval_all(&mut trainer.nets, &data, cfg.eval_batch_size)?;
        let entries: Vec<EvalEntry> = records
            .iter()
            .map(|r| EvalEntry { domain: r.domain, metric: r.metric_name().into(), value: r.headline() })
            .collect();
        if let Some(w) = log.as_mut() {
            let line = LogLine { iter: it, losses: report, eval: entries.clone(), accumulation_rel_error: None };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
            w.flush()?;
        }
        let target_metric = records.iter().find(|r| r.domain == Domain::Target).map(MetricsRecord::headline);
        if let Some(a) = artifacts {
            let meta = CheckpointMeta { config_hash: a.config_hash.to_string(), iter: it, bn_calibrated: false };
            let bytes = encode_checkpoint(&trainer.nets, &meta)?;
            write_atomic(&a.dir.join("last.ckpt"), &bytes)?;
            if let Some(m) = target_metric {
                if outcome.best.is_none_or(|(_, b)| m > b) {
                    write_atomic(&a.dir.join("best.ckpt"), &bytes)?;
                }
            }
        }
        if let Some(m) = target_metric {
            if outcome.best.is_none_or(|(_, b)| m > b) {
                outcome.best = Some((it, m));
            }
        }
        outcome.evals.push((it, records));
        Ok(())
    };

    if cfg.max_iters == 0 {
        checkpoint_eval(&mut trainer, &mut outcome, &mut log, None)?;
    }
    while trainer.iter < cfg.max_iters {
        let batch = batches.next_batch::<f32>(trainer.iter)?;
        let verify = verify_every > 0 && trainer.iter % verify_every == 0;
        let (report, check) = if verify {
            let (r, c) = trainer.step_verified(&batch)?;
            if c.max_rel_error > 1e-6 {
                return Err(Error::Diverged {
                    iter: r.iter,
                    reason: format!("encoder gradient accumulation off by {:.3e}", c.max_rel_error),
                });
            }
            (r, Some(c.max_rel_error))
        } else {
            (trainer.step(&batch)?, None)
        };
        let at_eval = trainer.iter == cfg.max_iters || (cfg.eval_every > 0 && trainer.iter % cfg.eval_every == 0);
        if at_eval {
            checkpoint_eval(&mut trainer, &mut outcome, &mut log, Some(&report))?;
        } else if let Some(w) = log.as_mut() {
            let line = LogLine { iter: trainer.iter, losses: Some(&report), eval: Vec::new(), accumulation_rel_error: check };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        outcome.last_report = Some(report);
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    outcome.nets = trainer.nets;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pair, SyntheticShiftSpec};
    use crate::model::build_networks;

    fn tiny_pair() -> crate::data::SyntheticPair {
        let spec = SyntheticShiftSpec { samples_per_class: 6, test_samples_per_class: 2, ..SyntheticShiftSpec::classification() };
        generate_synthetic_pair(&spec).unwrap()
    }

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            encoder_channels: [4, 8, 8, 8],
            discriminator_channels: [4, 4],
            ..ArchitectureSpec::new(Task::Classification, 4, 4)
        }
    }

    #[test]
    fn supervision_refuses_target_labels_outside_reference_mode() {
        let pair = tiny_pair();
        let t = &pair.target_train.samples[0];
        assert!(matches!(supervision(t, Supervision::Source), Err(Error::TaintViolation)));
        let before = target_label_reads();
        assert!(supervision(t, Supervision::Target).is_ok());
        assert_eq!(target_label_reads(), before + 1);
        assert!(supervision(&pair.source_train.samples[0], Supervision::Source).is_ok());
    }

    #[test]
    fn pretext_setting_serde() {
        let cfg = TrainConfig { pretext_mode: Some(PretextMode::SpRot), ..TrainConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("pretext_mode = \"sprot\""), "{text}");
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let none: TrainConfig = toml::from_str("pretext_mode = \"none\"").unwrap();
        assert_eq!(none.pretext_mode, None);
        assert!(toml::from_str::<TrainConfig>("pretext_mode = \"jigsaw\"").is_err());
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let arch = tiny_arch();
        let tar_rot = TrainConfig { supervision: Supervision::Target, pretext_mode: Some(PretextMode::Rot), ..TrainConfig::default() };
        assert!(tar_rot.validate(&arch).is_err());
        let sprot = TrainConfig { pretext_mode: Some(PretextMode::SpRot), ..TrainConfig::default() };
        assert!(sprot.validate(&arch).is_err());
        let neg = TrainConfig { weights: LossWeights { lambda_p: -1.0, ..LossWeights::default() }, ..TrainConfig::default() };
        assert!(neg.validate(&arch).is_err());
    }

    #[test]
    fn phase_ordering_contract() {
        let pair = tiny_pair();
        let cfg = TrainConfig { pretext_mode: Some(PretextMode::Rot), adversarial: true, batch_size_source: 4, batch_size_target: 4, ..TrainConfig::default() };
        let nets = build_networks::<f64>(&tiny_arch(), 1).unwrap();
        let mut tr = Trainer::new(nets, cfg.clone()).unwrap();
        let data = TrainData { source_train: &pair.source_train, target_train: &pair.target_train, source_test: None, target_test: None };
        let mut bs = BatchSource::new(data, &cfg, Task::Classification).unwrap();
        let b = bs.next_batch::<f64>(0).unwrap();
        let s0 = tr.nets.param_hash(NetSet::MAIN_HEAD);
        let p0 = tr.nets.param_hash(NetSet::PRETEXT_HEAD);
        tr.nets.zero_grad(NetSet::ALL);
        tr.pretext_phase(b.pretext.as_ref().unwrap()).unwrap();
        tr.update_pretext_head();
        assert_ne!(tr.nets.param_hash(NetSet::PRETEXT_HEAD), p0);
        assert_eq!(tr.nets.param_hash(NetSet::MAIN_HEAD), s0);
        tr.main_phase(&b.main_images, &b.main_targets).unwrap();
        assert_eq!(tr.nets.param_hash(NetSet::MAIN_HEAD), s0);

        // generator phase: D accumulates nothing, S accumulates nothing new
        let s_grad: Vec<_> = tr.nets.params(NetSet::MAIN_HEAD).iter().map(|p| p.grad.clone()).collect();
        let e_grad = tr.encoder_grads();
        tr.generator_phase(&b.main_images, b.adv_target_images.as_ref().unwrap()).unwrap();
        assert!(tr.nets.grads_are_zero(NetSet::DISCRIMINATOR));
        let s_after: Vec<_> = tr.nets.params(NetSet::MAIN_HEAD).iter().map(|p| p.grad.clone()).collect();
        assert_eq!(s_grad, s_after);
        assert_ne!(e_grad, tr.encoder_grads());
        tr.update_main_model();
        assert_ne!(tr.nets.param_hash(NetSet::MAIN_HEAD), s0);

        // discriminator phase: E receives nothing
        tr.nets.zero_grad(NetSet::ALL);
        tr.discriminator_phase(&b.main_images, b.adv_target_images.as_ref().unwrap()).unwrap();
        assert!(tr.nets.grads_are_zero(NetSet::MAIN_MODEL));
        assert!(tr.nets.grads_are_zero(NetSet::PRETEXT_HEAD));
        assert!(!tr.nets.grads_are_zero(NetSet::DISCRIMINATOR));
    }

    #[test]
    fn accumulation_matches_separate_passes() {
        let pair = tiny_pair();
        let cfg = TrainConfig { pretext_mode: Some(PretextMode::Rot), batch_size_source: 4, batch_size_target: 4, ..TrainConfig::default() };
        let nets = build_networks::<f32>(&tiny_arch(), 2).unwrap();
        let mut tr = Trainer::new(nets, cfg.clone()).unwrap();
        let data = TrainData { source_train: &pair.source_train, target_train: &pair.target_train, source_test: None, target_test: None };
        let mut bs = BatchSource::new(data, &cfg, Task::Classification).unwrap();
        for i in 0..3 {
            let b = bs.next_batch::<f32>(i).unwrap();
            let (_, c) = tr.step_verified(&b).unwrap();
            assert!(c.max_rel_error <= 1e-6, "{c:?}");
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let pair = tiny_pair();
        let nets = build_networks::<f32>(&tiny_arch(), 3).unwrap();
        let h = nets.param_hash(NetSet::ALL);
        let cfg = TrainConfig { max_iters: 0, ..TrainConfig::default() };
        let data = TrainData { source_train: &pair.source_train, target_train: &pair.target_train, source_test: None, target_test: Some(&pair.target_test) };
        let out = train(nets, data, &cfg, None).unwrap();
        assert_eq!(out.nets.param_hash(NetSet::ALL), h);
        assert_eq!(out.evals.len(), 1);
    }

    #[test]
    fn swapped_domains_are_rejected() {
        let pair = tiny_pair();
        let nets = build_networks::<f32>(&tiny_arch(), 3).unwrap();
        let data = TrainData { source_train: &pair.target_train, target_train: &pair.source_train, source_test: None, target_test: None };
        assert!(train(nets, data, &TrainConfig { max_iters: 1, ..TrainConfig::default() }, None).is_err());
    }
}
