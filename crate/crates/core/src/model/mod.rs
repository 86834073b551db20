//! The four networks: shared encoder `E`, main-task head `S`, pretext head
//! `P` and domain discriminator `D`.

mod gradcheck;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, TensorCheck};

use crate::data::Task;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    softmax_channels, BatchNorm2d, BilinearUpsample, Conv2d, GlobalAvgPool, GradFlags, MaxPool2,
    Mode, Param, Real, Relu, Tensor,
};
use crate::seed::rng_for;

/// Encoder layer whose features feed the pretext head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTap {
    /// After the second block and its downsampling.
    Middle,
    /// The encoder output (for segmentation: the prediction map before upsampling).
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub task: Task,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Pretext label count `K` (4 or 16).
    pub pretext_labels: usize,
    pub encoder_channels: [usize; 4],
    /// Hidden widths of the discriminator; its last layer always has 2 channels.
    pub discriminator_channels: [usize; 2],
    pub feature_tap: FeatureTap,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ArchitectureSpec {
    pub fn new(task: Task, num_classes: usize, pretext_labels: usize) -> Self {
        Self {
            task,
            in_channels: 3,
            num_classes,
            pretext_labels,
            encoder_channels: [32, 64, 128, 128],
            discriminator_channels: [64, 128],
            feature_tap: FeatureTap::Middle,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretext_labels != 4 && self.pretext_labels != 16 {
            return Err(config_err(format!("pretext label count must be 4 or 16, got {}", self.pretext_labels)));
        }
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if self.in_channels == 0 || self.encoder_channels.contains(&0) || self.discriminator_channels.contains(&0) {
            return Err(config_err("layer widths must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(config_err("bn_eps must be positive and bn_momentum within [0, 1]"));
        }
        Ok(())
    }

    /// Channel count of the features the pretext head consumes.
    pub fn tap_channels(&self) -> usize {
        match (self.feature_tap, self.task) {
            (FeatureTap::Middle, _) => self.encoder_channels[1],
            (FeatureTap::Final, Task::Classification) => self.encoder_channels[3],
            (FeatureTap::Final, Task::Segmentation) => self.num_classes,
        }
    }
}

/// Selects a subset of the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetSet {
    pub encoder: bool,
    pub main_head: bool,
    pub pretext_head: bool,
    pub discriminator: bool,
}

impl NetSet {
    pub const ALL: NetSet = NetSet { encoder: true, main_head: true, pretext_head: true, discriminator: true };
    pub const NONE: NetSet = NetSet { encoder: false, main_head: false, pretext_head: false, discriminator: false };
    pub const ENCODER: NetSet = NetSet { encoder: true, ..NetSet::NONE };
    pub const MAIN_HEAD: NetSet = NetSet { main_head: true, ..NetSet::NONE };
    pub const PRETEXT_HEAD: NetSet = NetSet { pretext_head: true, ..NetSet::NONE };
    pub const DISCRIMINATOR: NetSet = NetSet { discriminator: true, ..NetSet::NONE };
    /// Encoder and main head: the model used at test time.
    pub const MAIN_MODEL: NetSet = NetSet { encoder: true, main_head: true, ..NetSet::NONE };

    pub fn union(self, o: NetSet) -> NetSet {
        NetSet {
            encoder: self.encoder || o.encoder,
            main_head: self.main_head || o.main_head,
            pretext_head: self.pretext_head || o.pretext_head,
            discriminator: self.discriminator || o.discriminator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Real> ConvBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, keep)?;
        let y = self.bn.forward(&y, mode, keep)?;
        Ok(self.relu.forward(&y, keep))
    }

    fn backward(&mut self, dy: &Tensor<T>, params: bool, input: bool) -> Result<Option<Tensor<T>>> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d, GradFlags { params, input: true })?.expect("input grad");
        self.conv.backward(&d, GradFlags { params, input })
    }

    fn clear(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
    }
}

/// Four `conv3x3 -> BN -> ReLU` blocks with 2x2 downsampling after the first two.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pools: [MaxPool2; 2],
    reached: Option<FeatureTap>,
}

impl<T: Real> Encoder<T> {
    fn new(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xe0]);
        let mut in_c = arch.in_channels;
        let blocks = arch
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &out_c)| {
                let name = format!("encoder.block{i}");
                let block = ConvBlock {
                    conv: Conv2d::new(&format!("{name}.conv"), in_c, out_c, 3, 1, 1, &mut rng),
                    bn: BatchNorm2d::new(&format!("{name}.bn"), out_c, arch.bn_eps, arch.bn_momentum),
                    relu: Relu::default(),
                };
                in_c = out_c;
                block
            })
            .collect();
        Self { blocks, pools: Default::default(), reached: None }
    }

    /// Runs the encoder up to `until`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, until: FeatureTap, keep: bool) -> Result<Tensor<T>> {
        let mut h = self.blocks[0].forward(x, mode, keep)?;
        h = self.pools[0].forward(&h, keep)?;
        h = self.blocks[1].forward(&h, mode, keep)?;
        h = self.pools[1].forward(&h, keep)?;
        if until == FeatureTap::Final {
            h = self.blocks[2].forward(&h, mode, keep)?;
            h = self.blocks[3].forward(&h, mode, keep)?;
        }
        self.reached = keep.then_some(until);
        Ok(h)
    }

    /// Backpropagates from the depth reached by the last cached forward. The
    /// gradient with respect to the image is not computed.
    pub fn backward(&mut self, dy: &Tensor<T>, params: bool) -> Result<()> {
        let reached = self.reached.ok_or_else(|| shape_err("encoder backward without forward"))?;
        let mut d = dy.clone();
        if reached == FeatureTap::Final {
            d = self.blocks[3].backward(&d, params, true)?.expect("input grad");
            d = self.blocks[2].backward(&d, params, true)?.expect("input grad");
        }
        d = self.pools[1].backward(&d)?;
        d = self.blocks[1].backward(&d, params, true)?.expect("input grad");
        d = self.pools[0].backward(&d)?;
        self.blocks[0].backward(&d, params, false)?;
        Ok(())
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm2d<T>> {
        self.blocks.iter().map(|b| &b.bn).collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.blocks.iter_mut().map(|b| &mut b.bn).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| b.conv.params().into_iter().chain(b.bn.params())).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let ConvBlock { conv, bn, .. } = b;
                conv.params_mut().into_iter().chain(bn.params_mut())
            })
            .collect()
    }

    fn clear(&mut self) {
        self.blocks.iter_mut().for_each(ConvBlock::clear);
        self.pools.iter_mut().for_each(MaxPool2::clear_cache);
        self.reached = None;
    }

    fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock { conv: b.conv.cast(), bn: b.bn.cast(), relu: Relu::default() })
                .collect(),
            pools: Default::default(),
            reached: None,
        }
    }
}

/// Main-task head: pooled affine classifier, or a 1x1 convolution followed by
/// a parameter-free bilinear upsampling to the input resolution.
#[derive(Debug, Clone)]
pub struct MainHead<T> {
    pub task: Task,
    pub classifier: Conv2d<T>,
    gap: GlobalAvgPool,
    upsample: Option<BilinearUpsample>,
}

impl<T: Real> MainHead<T> {
    fn new(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x5e]);
        Self {
            task: arch.task,
            classifier: Conv2d::new("main_head.classifier", arch.encoder_channels[3], arch.num_classes, 1, 1, 0, &mut rng),
            gap: GlobalAvgPool::default(),
            upsample: None,
        }
    }

    /// Logits: `C x N x 1 x 1` for classification, `C x N x H x W` for segmentation.
    pub fn forward(&mut self, feats: &Tensor<T>, out_hw: (usize, usize), keep: bool) -> Result<Tensor<T>> {
        match self.task {
            Task::Classification => {
                let pooled = self.gap.forward(feats, keep);
                self.upsample = None;
                self.classifier.forward(&pooled, keep)
            }
            Task::Segmentation => {
                let coarse = self.classifier.forward(feats, keep)?;
                let mut up = BilinearUpsample::new(out_hw.0, out_hw.1);
                let out = up.forward(&coarse, keep);
                self.upsample = keep.then_some(up);
                Ok(out)
            }
        }
    }

    /// The segmentation prediction map before upsampling.
    pub fn forward_coarse(&mut self, feats: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        self.upsample = None;
        self.classifier.forward(feats, keep)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let flags = GradFlags { params, input: true };
        match (self.task, self.upsample.as_ref()) {
            (Task::Classification, _) => {
                let d = self.classifier.backward(dy, flags)?.expect("input grad");
                self.gap.backward(&d)
            }
            (Task::Segmentation, Some(up)) => {
                let d = up.backward(dy)?;
                Ok(self.classifier.backward(&d, flags)?.expect("input grad"))
            }
            (Task::Segmentation, None) => Ok(self.classifier.backward(dy, flags)?.expect("input grad")),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.classifier.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.classifier.params_mut()
    }

    fn clear(&mut self) {
        self.classifier.clear_cache();
        self.gap.clear_cache();
        self.upsample = None;
    }

    fn cast<U: Real>(&self) -> MainHead<U> {
        MainHead { task: self.task, classifier: self.classifier.cast(), gap: GlobalAvgPool::default(), upsample: None }
    }
}

/// Global average pooling followed by an affine map to `K` logits.
#[derive(Debug, Clone)]
pub struct PretextHead<T> {
    pub fc: Conv2d<T>,
    gap: GlobalAvgPool,
}

impl<T: Real> PretextHead<T> {
    fn new(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x9e]);
        Self {
            fc: Conv2d::new("pretext_head.fc", arch.tap_channels(), arch.pretext_labels, 1, 1, 0, &mut rng),
            gap: GlobalAvgPool::default(),
        }
    }

    pub fn forward(&mut self, feats: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let pooled = self.gap.forward(feats, keep);
        self.fc.forward(&pooled, keep)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let d = self.fc.backward(dy, GradFlags { params, input: true })?.expect("input grad");
        self.gap.backward(&d)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.fc.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.fc.params_mut()
    }

    fn clear(&mut self) {
        self.fc.clear_cache();
        self.gap.clear_cache();
    }

    fn cast<U: Real>(&self) -> PretextHead<U> {
        PretextHead { fc: self.fc.cast(), gap: GlobalAvgPool::default() }
    }
}

/// Three stride-2 3x3 convolutions ending in a 2-channel (target, source) map.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub convs: Vec<Conv2d<T>>,
    relus: [Relu; 2],
}

impl<T: Real> Discriminator<T> {
    fn new(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xd1]);
        let widths = [arch.num_classes, arch.discriminator_channels[0], arch.discriminator_channels[1], 2];
        let convs = (0..3)
            .map(|i| Conv2d::new(&format!("discriminator.conv{i}"), widths[i], widths[i + 1], 3, 2, 1, &mut rng))
            .collect();
        Self { convs, relus: Default::default() }
    }

    pub fn forward(&mut self, probs: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let mut h = self.convs[0].forward(probs, keep)?;
        h = self.relus[0].forward(&h, keep);
        h = self.convs[1].forward(&h, keep)?;
        h = self.relus[1].forward(&h, keep);
        self.convs[2].forward(&h, keep)
    }

    pub fn backward(&mut self, dz: &Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let flags = GradFlags { params, input: true };
        let mut d = self.convs[2].backward(dz, flags)?.expect("input grad");
        d = self.relus[1].backward(&d)?;
        d = self.convs[1].backward(&d, flags)?.expect("input grad");
        d = self.relus[0].backward(&d)?;
        Ok(self.convs[0].backward(&d, flags)?.expect("input grad"))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    fn clear(&mut self) {
        self.convs.iter_mut().for_each(Conv2d::clear_cache);
        self.relus.iter_mut().for_each(Relu::clear_cache);
    }

    fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { convs: self.convs.iter().map(Conv2d::cast).collect(), relus: Default::default() }
    }
}

/// `E`, `S`, `P` and `D` with their architecture.
#[derive(Debug, Clone)]
pub struct Networks<T> {
    pub arch: ArchitectureSpec,
    pub encoder: Encoder<T>,
    pub main_head: MainHead<T>,
    pub pretext_head: PretextHead<T>,
    pub discriminator: Discriminator<T>,
}

/// Builds all four networks with He-scaled weights drawn from `seed`; biases
/// and BN shifts start at zero, BN scales at one.
pub fn build_networks<T: Real>(arch: &ArchitectureSpec, seed: u64) -> Result<Networks<T>> {
    arch.validate()?;
    Ok(Networks {
        arch: arch.clone(),
        encoder: Encoder::new(arch, seed),
        main_head: MainHead::new(arch, seed),
        pretext_head: PretextHead::new(arch, seed),
        discriminator: Discriminator::new(arch, seed),
    })
}

impl<T: Real> Networks<T> {
    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != self.arch.in_channels {
            return Err(shape_err(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels, x.channels
            )));
        }
        if x.height < 4 || x.width < 4 {
            return Err(shape_err(format!("input {}x{} smaller than 4x4", x.height, x.width)));
        }
        Ok(())
    }

    /// `S(E(x))` logits.
    pub fn forward_main(&mut self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let feats = self.encoder.forward(x, mode, FeatureTap::Final, keep)?;
        self.main_head.forward(&feats, (x.height, x.width), keep)
    }

    pub fn backward_main(&mut self, dlogits: &Tensor<T>, grads: NetSet) -> Result<()> {
        let d = self.main_head.backward(dlogits, grads.main_head)?;
        if grads.encoder {
            self.encoder.backward(&d, true)?;
        } else {
            self.encoder.backward(&d, false)?;
        }
        Ok(())
    }

    /// Features at the configured tap, as the pretext head sees them.
    pub fn tap_features(&mut self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match (self.arch.feature_tap, self.arch.task) {
            (FeatureTap::Middle, _) => self.encoder.forward(x, mode, FeatureTap::Middle, keep),
            (FeatureTap::Final, Task::Classification) => self.encoder.forward(x, mode, FeatureTap::Final, keep),
            (FeatureTap::Final, Task::Segmentation) => {
                let feats = self.encoder.forward(x, mode, FeatureTap::Final, keep)?;
                self.main_head.forward_coarse(&feats, keep)
            }
        }
    }

    /// `P(E(x))` logits, `K x N x 1 x 1`.
    pub fn forward_pretext(&mut self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<Tensor<T>> {
        let feats = self.tap_features(x, mode, keep)?;
        self.pretext_head.forward(&feats, keep)
    }

    /// Backward through `P` and `E`. With the final tap on segmentation the
    /// gradient also passes the 1x1 prediction layer, which then accumulates
    /// the pretext gradient into the main head when `grads.main_head` is set.
    pub fn backward_pretext(&mut self, dlogits: &Tensor<T>, grads: NetSet) -> Result<()> {
        let mut d = self.pretext_head.backward(dlogits, grads.pretext_head)?;
        if self.arch.feature_tap == FeatureTap::Final && self.arch.task == Task::Segmentation {
            d = self.main_head.backward(&d, grads.main_head)?;
        }
        self.encoder.backward(&d, grads.encoder)
    }

    /// Raw discriminator scores `Z`, 2 channels; channel 0 = target, 1 = source.
    pub fn forward_discriminator(&mut self, probs: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        if probs.channels != self.arch.num_classes {
            return Err(shape_err(format!(
                "discriminator expects {} channels, got {}",
                self.arch.num_classes, probs.channels
            )));
        }
        self.discriminator.forward(probs, keep)
    }

    /// Returns the gradient with respect to the discriminator input.
    pub fn backward_discriminator(&mut self, dz: &Tensor<T>, params: bool) -> Result<Tensor<T>> {
        self.discriminator.backward(dz, params)
    }

    /// Softmax of the main-task logits, the discriminator's input.
    pub fn main_probabilities(logits: &Tensor<T>) -> Tensor<T> {
        softmax_channels(logits)
    }

    pub fn params(&self, set: NetSet) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        if set.encoder {
            out.extend(self.encoder.params());
        }
        if set.main_head {
            out.extend(self.main_head.params());
        }
        if set.pretext_head {
            out.extend(self.pretext_head.params());
        }
        if set.discriminator {
            out.extend(self.discriminator.params());
        }
        out
    }

    pub fn params_mut(&mut self, set: NetSet) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        if set.encoder {
            out.extend(self.encoder.params_mut());
        }
        if set.main_head {
            out.extend(self.main_head.params_mut());
        }
        if set.pretext_head {
            out.extend(self.pretext_head.params_mut());
        }
        if set.discriminator {
            out.extend(self.discriminator.params_mut());
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params_mut(NetSet::ALL).into_iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self, set: NetSet) {
        self.params_mut(set).into_iter().for_each(Param::zero_grad);
    }

    pub fn grads_are_zero(&self, set: NetSet) -> bool {
        self.params(set).iter().all(|p| p.grad_is_zero())
    }

    /// BN layers of the test-time model (`E`; `S` has none).
    pub fn bn_layers(&self) -> Vec<&BatchNorm2d<T>> {
        self.encoder.bn_layers()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.encoder.bn_layers_mut()
    }

    pub fn clear_caches(&mut self) {
        self.encoder.clear();
        self.main_head.clear();
        self.pretext_head.clear();
        self.discriminator.clear();
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            arch: self.arch.clone(),
            encoder: self.encoder.cast(),
            main_head: self.main_head.cast(),
            pretext_head: self.pretext_head.cast(),
            discriminator: self.discriminator.cast(),
        }
    }

    /// SHA-256 over the names and values of the learnable parameters in `set`.
    pub fn param_hash(&self, set: NetSet) -> String {
        let mut h = Sha256::new();
        for p in self.params(set) {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over the BN running statistics.
    pub fn bn_stats_hash(&self) -> String {
        let mut h = Sha256::new();
        for bn in self.bn_layers() {
            for v in bn.running_mean.iter().chain(&bn.running_var) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
