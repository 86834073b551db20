#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

use ssda_core::data::{LabelMap, Task};
use ssda_core::losses::{adversarial_loss, classification_loss, pretext_loss, segmentation_loss, DomainLabel, Reduction};
use ssda_core::model::{build_networks, gradient_check, ArchitectureSpec, FeatureTap, GradCheckOptions, GradCheckReport, NetSet, Networks};
use ssda_core::nn::{softmax_backward, softmax_channels, Mode, Tensor};
use ssda_core::seed::rng_for;

pub fn small_arch(task: Task, k: usize, tap: FeatureTap) -> ArchitectureSpec {
    ArchitectureSpec {
        encoder_channels: [4, 6, 8, 8],
        discriminator_channels: [4, 6],
        feature_tap: tap,
        ..ArchitectureSpec::new(task, 3, k)
    }
}

pub fn random_tensor(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0x7e57]);
    let data = (0..c * n * h * w).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    Tensor::from_vec(c, n, h, w, data).unwrap()
}

/// Nets whose BN running statistics are something other than the identity,
/// so eval-mode checks exercise the affine normalization.
pub fn nets_with_stats(arch: &ArchitectureSpec, seed: u64) -> Networks<f64> {
    let mut nets = build_networks::<f64>(arch, seed).unwrap();
    let mut rng = rng_for(seed, &[0xb5]);
    for bn in nets.bn_layers_mut() {
        for c in 0..bn.channels {
            bn.running_mean[c] = rng.gen_range(-0.3..0.3);
            bn.running_var[c] = rng.gen_range(0.5..2.0);
            bn.gamma.value[c] = rng.gen_range(0.5..1.5);
            bn.beta.value[c] = rng.gen_range(-0.2..0.2);
        }
    }
    // Zero biases behind dead units put ReLUs exactly on their kink.
    for p in nets.params_mut(NetSet::ALL) {
        if p.name.ends_with(".bias") {
            p.value.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    nets
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..GradCheckOptions::default() }
}

/// Finite-difference check of the pretext loss over `E + P`.
pub fn check_pretext(task: Task, tap: FeatureTap, k: usize, mode: Mode, seed: u64) -> GradCheckReport {
    let arch = small_arch(task, k, tap);
    let mut nets = nets_with_stats(&arch, seed);
    let x = random_tensor(3, 2 * k.min(4), 8, 8, seed);
    let labels: Vec<usize> = (0..x.batch).map(|i| (i * 5 + seed as usize) % k).collect();
    let mut set = NetSet::ENCODER.union(NetSet::PRETEXT_HEAD);
    if task == Task::Segmentation && tap == FeatureTap::Final {
        set = set.union(NetSet::MAIN_HEAD);
    }
    gradient_check(
        &mut nets,
        set,
        |n, backward| {
            let logits = n.forward_pretext(&x, mode, backward)?;
            let (l, g) = pretext_loss(&logits, &labels, k)?;
            if backward {
                n.backward_pretext(&g, set)?;
            }
            n.clear_caches();
            Ok(l)
        },
        &opts(seed),
    )
    .unwrap()
}

fn label_maps(n: usize, h: usize, w: usize, classes: usize, seed: u64) -> Vec<LabelMap> {
    let mut rng = rng_for(seed, &[0x1ab]);
    (0..n)
        .map(|_| LabelMap {
            height: h,
            width: w,
            data: (0..h * w).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..classes as u8) }).collect(),
        })
        .collect()
}

/// Finite-difference check of the main-task loss over `E + S`.
pub fn check_main(task: Task, mode: Mode, seed: u64) -> GradCheckReport {
    let arch = small_arch(task, 4, FeatureTap::Middle);
    let mut nets = nets_with_stats(&arch, seed);
    let x = random_tensor(3, 4, 12, 12, seed);
    let classes: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
    let maps = label_maps(4, 12, 12, 3, seed);
    gradient_check(
        &mut nets,
        NetSet::MAIN_MODEL,
        |n, backward| {
            let logits = n.forward_main(&x, mode, backward)?;
            let (l, g) = match task {
                Task::Classification => classification_loss(&logits, &classes)?,
                Task::Segmentation => segmentation_loss(&logits, &maps.iter().collect::<Vec<_>>(), Reduction::Mean)?,
            };
            if backward {
                n.backward_main(&g, NetSet::MAIN_MODEL)?;
            }
            n.clear_caches();
            Ok(l)
        },
        &opts(seed),
    )
    .unwrap()
}

/// Finite-difference check of the summed two-domain adversarial loss over
/// `E + S + D`.
pub fn check_adversarial(task: Task, mode: Mode, seed: u64) -> GradCheckReport {
    check_adversarial_opts(task, mode, seed, GradCheckOptions::default().rel_step)
}

pub fn check_adversarial_opts(task: Task, mode: Mode, seed: u64, step: f64) -> GradCheckReport {
    let arch = small_arch(task, 4, FeatureTap::Middle);
    let mut nets = nets_with_stats(&arch, seed);
    let xs = random_tensor(3, 3, 16, 16, seed);
    let xt = random_tensor(3, 3, 16, 16, seed + 1000).map(|v| v * 1.5 + 0.2);
    let set = NetSet::MAIN_MODEL.union(NetSet::DISCRIMINATOR);
    gradient_check(
        &mut nets,
        set,
        |n, backward| {
            let mut total = 0.0;
            for (x, z) in [(&xs, DomainLabel::SOURCE), (&xt, DomainLabel::TARGET)] {
                let logits = n.forward_main(x, mode, backward)?;
                let probs = softmax_channels(&logits);
                let zmap = n.forward_discriminator(&probs, backward)?;
                let (l, dz) = adversarial_loss(&zmap, z, Reduction::Mean)?;
                total += l;
                if backward {
                    let dprobs = n.backward_discriminator(&dz, true)?;
                    n.backward_main(&softmax_backward(&probs, &dprobs), NetSet::MAIN_MODEL)?;
                }
            }
            n.clear_caches();
            Ok(total)
        },
        &GradCheckOptions { rel_step: step, ..opts(seed) },
    )
    .unwrap()
}
