//! Cross-entropy family losses. Every loss returns its value together with
//! the gradient with respect to the logits it was given.

use serde::{Deserialize, Serialize};

use crate::data::{Domain, LabelMap, IGNORE_LABEL};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Real, Tensor};

/// How per-cell losses of one image are combined. Images are always
/// averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_adv: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 1.0, lambda_adv: 0.01, lambda_d: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_adv", self.lambda_adv), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Discriminator target: 0 = target domain, 1 = source domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DomainLabel(u8);

impl DomainLabel {
    pub const TARGET: DomainLabel = DomainLabel(0);
    pub const SOURCE: DomainLabel = DomainLabel(1);

    pub fn new(z: u8) -> Result<Self> {
        if z > 1 {
            return Err(Error::InvalidInput(format!("domain label must be 0 or 1, got {z}")));
        }
        Ok(Self(z))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn flip(self) -> Self {
        Self(1 - self.0)
    }
}

impl From<Domain> for DomainLabel {
    fn from(d: Domain) -> Self {
        Self(d.disc_label())
    }
}

/// Softmax cross-entropy over the channel axis. `targets[cell]` is indexed
/// like a channel plane; `weights[cell]` scales each cell's contribution.
fn weighted_ce<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>], weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let plane = logits.plane();
    debug_assert_eq!(targets.len(), plane);
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let c = logits.channels;
    let mut grad = Tensor::zeros(c, logits.batch, logits.height, logits.width);
    let mut total = 0.0;
    let mut z = vec![0.0f64; c];
    for cell in 0..plane {
        let Some(t) = targets[cell] else { continue };
        let w = weights[cell];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = logits.data[k * plane + cell].as_f64();
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += w * (lse - z[t]);
        for (k, zk) in z.iter().enumerate() {
            let p = (zk - lse).exp();
            let g = if k == t { p - 1.0 } else { p };
            grad.data[k * plane + cell] = T::lit(w * g);
        }
    }
    Ok((total, grad))
}

fn check_class_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes: k }),
        None => Ok(()),
    }
}

fn check_pooled<T>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if logits.height != 1 || logits.width != 1 || logits.batch != labels.len() {
        return Err(shape_err(format!(
            "expected {} pooled logits, got {:?}",
            labels.len(),
            [logits.channels, logits.batch, logits.height, logits.width]
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Rotation pretext loss over `K x N x 1 x 1` logits for `N` copies.
///
/// Copies come in groups of four (the rotations of one image, or of one
/// region for the spatial variant); the loss is the per-copy cross-entropy
/// averaged inside each group and then over groups.
pub fn pretext_loss<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<(f64, Tensor<T>)> {
    check_pooled(logits, labels)?;
    if logits.channels != k {
        return Err(shape_err(format!("expected {k} pretext logits, got {}", logits.channels)));
    }
    check_class_labels(labels, k)?;
    // Equal group sizes make the mean of group means the plain mean, which
    // also covers batches of single random rotations.
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    let targets: Vec<_> = labels.iter().map(|&l| Some(l)).collect();
    weighted_ce(logits, &targets, &w)
}

/// Mean cross-entropy over `C x B x 1 x 1` logits.
pub fn classification_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    check_pooled(logits, labels)?;
    check_class_labels(labels, logits.channels)?;
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    let targets: Vec<_> = labels.iter().map(|&l| Some(l)).collect();
    weighted_ce(logits, &targets, &w)
}

/// Per-pixel cross-entropy on `C x N x H x W` logits, skipping
/// [`IGNORE_LABEL`] pixels. Each image's pixel losses are reduced with
/// `reduction` over its supervised pixels, then images are averaged; images
/// without supervised pixels do not count towards the average.
pub fn segmentation_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[&LabelMap],
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    if labels.len() != logits.batch {
        return Err(shape_err(format!("{} label maps for a batch of {}", labels.len(), logits.batch)));
    }
    let spatial = logits.spatial();
    let c = logits.channels;
    let mut targets = Vec::with_capacity(logits.plane());
    let mut counts = Vec::with_capacity(labels.len());
    for m in labels {
        if m.height != logits.height || m.width != logits.width {
            return Err(shape_err(format!(
                "label map {}x{} for logits {}x{}",
                m.height, m.width, logits.height, logits.width
            )));
        }
        let mut count = 0usize;
        for &v in &m.data {
            if v == IGNORE_LABEL {
                targets.push(None);
            } else if (v as usize) < c {
                count += 1;
                targets.push(Some(v as usize));
            } else {
                return Err(Error::LabelOutOfRange { label: v as usize, num_classes: c });
            }
        }
        counts.push(count);
    }
    let images = counts.iter().filter(|&&k| k > 0).count();
    if images == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let mut weights = vec![0.0; logits.plane()];
    for (n, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let per_image = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        weights[n * spatial..(n + 1) * spatial].fill(per_image / images as f64);
    }
    weighted_ce(logits, &targets, &weights)
}

/// Two-way cross-entropy of discriminator scores `Z` (`2 x N x H' x W'`)
/// against domain label `z`, reduced per image with `reduction` and averaged
/// over the batch.
pub fn discriminator_loss<T: Real>(z_map: &Tensor<T>, z: DomainLabel, reduction: Reduction) -> Result<(f64, Tensor<T>)> {
    if z_map.channels != 2 {
        return Err(shape_err(format!("discriminator output must have 2 channels, got {}", z_map.channels)));
    }
    if z_map.batch == 0 || z_map.spatial() == 0 {
        return Err(Error::InvalidInput("empty discriminator output".into()));
    }
    let per_image = match reduction {
        Reduction::Mean => 1.0 / z_map.spatial() as f64,
        Reduction::Sum => 1.0,
    };
    let w = vec![per_image / z_map.batch as f64; z_map.plane()];
    let targets = vec![Some(z.get() as usize); z_map.plane()];
    weighted_ce(z_map, &targets, &w)
}

/// The generator's confusion loss: the discriminator loss with the domain
/// label flipped.
pub fn adversarial_loss<T: Real>(z_map: &Tensor<T>, z: DomainLabel, reduction: Reduction) -> Result<(f64, Tensor<T>)> {
    discriminator_loss(z_map, z.flip(), reduction)
}

/// Main-task loss plus the weighted pretext loss.
pub fn joint_objective(main: f64, pretext: f64, w: &LossWeights) -> f64 {
    main + w.lambda_p * pretext
}

/// Joint objective plus the weighted adversarial and discriminator losses.
pub fn full_objective(main: f64, pretext: f64, adversarial: f64, discriminator: f64, w: &LossWeights) -> f64 {
    joint_objective(main, pretext, w) + w.lambda_adv * adversarial + w.lambda_d * discriminator
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn pooled<R: AsRef<[f64]>>(c: usize, rows: &[R]) -> Tensor<f64> {
        let n = rows.len();
        let mut t = Tensor::zeros(c, n, 1, 1);
        for (i, r) in rows.iter().enumerate() {
            for k in 0..c {
                t.data[k * n + i] = r.as_ref()[k];
            }
        }
        t
    }

    #[test]
    fn uniform_values() {
        let l = pooled(4, &[&[0.0; 4]; 4]);
        assert_abs_diff_eq!(pretext_loss(&l, &[0, 1, 2, 3], 4).unwrap().0, 4f64.ln(), epsilon = 1e-12);
        let l = pooled(16, &[&[0.3; 16]; 8]);
        assert_abs_diff_eq!(pretext_loss(&l, &[0, 5, 10, 15, 1, 2, 3, 4], 16).unwrap().0, 16f64.ln(), epsilon = 1e-12);
        let l = pooled(31, &[&[1.0; 31]; 3]);
        assert_abs_diff_eq!(classification_loss(&l, &[0, 7, 30]).unwrap().0, 31f64.ln(), epsilon = 1e-12);
        let z = Tensor::<f64>::zeros(2, 2, 3, 3);
        for d in [DomainLabel::TARGET, DomainLabel::SOURCE] {
            assert_abs_diff_eq!(discriminator_loss(&z, d, Reduction::Mean).unwrap().0, 2f64.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(adversarial_loss(&z, d, Reduction::Mean).unwrap().0, 2f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let l = pooled(4, &[&[800.0, 0.0, 0.0, 0.0], &[0.0, 800.0, 0.0, 0.0], &[0.0, 0.0, 800.0, 0.0], &[0.0, 0.0, 0.0, 800.0]]);
        let (v, g) = pretext_loss(&l, &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
        let z = Tensor::from_vec(2, 1, 1, 1, vec![900.0, 0.0]).unwrap();
        assert_eq!(discriminator_loss(&z, DomainLabel::TARGET, Reduction::Mean).unwrap().0, 0.0);
    }

    #[test]
    fn hand_computed_values() {
        // Column logits chosen so that the correct class gets probability
        // 0.5 and 0.25: log-probabilities are set directly.
        let mut l = Tensor::<f64>::zeros(2, 1, 2, 1);
        l.data = vec![0.5f64.ln(), 0.25f64.ln(), 0.5f64.ln(), 0.75f64.ln()];
        let map = LabelMap { height: 2, width: 1, data: vec![0, 0] };
        let (v, _) = segmentation_loss(&l, &[&map], Reduction::Mean).unwrap();
        assert_abs_diff_eq!(v, 1.0397207708399179, epsilon = 1e-12);

        let l = pooled(3, &[&[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]);
        assert_abs_diff_eq!(classification_loss(&l, &[0]).unwrap().0, 0.35667494393873245, epsilon = 1e-12);

        let z = Tensor::from_vec(2, 1, 1, 1, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        assert_abs_diff_eq!(
            discriminator_loss(&z, DomainLabel::SOURCE, Reduction::Mean).unwrap().0,
            2.3025850929940455,
            epsilon = 1e-12
        );

        let z = Tensor::from_vec(2, 1, 2, 2, vec![0.2f64.ln(); 4].into_iter().chain(vec![0.8f64.ln(); 4]).collect()).unwrap();
        assert_abs_diff_eq!(
            adversarial_loss(&z, DomainLabel::TARGET, Reduction::Mean).unwrap().0,
            0.2231435513142097,
            epsilon = 1e-12
        );
    }

    #[test]
    fn objectives() {
        let w = LossWeights::default();
        assert_eq!(joint_objective(1.0, 2.0, &w), 3.0);
        assert_eq!(joint_objective(1.5, 2.0, &LossWeights { lambda_p: 0.0, ..w }), 1.5);
        assert_abs_diff_eq!(full_objective(1.0, 2.0, 0.5, 0.7, &w), 3.705, epsilon = 1e-12);
    }

    #[test]
    fn errors() {
        let l = pooled(4, &[&[0.0; 4]; 4]);
        assert!(matches!(pretext_loss(&l, &[0, 1, 2, 4], 4), Err(Error::LabelOutOfRange { label: 4, .. })));
        let bad = pooled(4, &[&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4], &[0.0; 4], &[0.0; 4]]);
        assert!(matches!(pretext_loss(&bad, &[0, 1, 2, 3], 4), Err(Error::NonFinite(_))));
        let l = Tensor::<f64>::zeros(3, 1, 2, 2);
        let m = LabelMap { height: 2, width: 2, data: vec![IGNORE_LABEL; 4] };
        assert!(matches!(segmentation_loss(&l, &[&m], Reduction::Mean), Err(Error::NoSupervisedPixels)));
        let m = LabelMap { height: 2, width: 2, data: vec![0, 1, 3, 0] };
        assert!(matches!(segmentation_loss(&l, &[&m], Reduction::Mean), Err(Error::LabelOutOfRange { .. })));
        assert!(DomainLabel::new(2).is_err());
        assert!(discriminator_loss(&l, DomainLabel::TARGET, Reduction::Mean).is_err());
    }

    #[test]
    fn ignore_pixels_do_not_contribute() {
        let mut l = Tensor::<f64>::zeros(2, 1, 1, 2);
        l.data = vec![1.0, 5.0, 0.0, -3.0];
        let m = LabelMap { height: 1, width: 2, data: vec![1, IGNORE_LABEL] };
        let (v, g) = segmentation_loss(&l, &[&m], Reduction::Mean).unwrap();
        assert_abs_diff_eq!(v, (1f64.exp() + 1.0).ln(), epsilon = 1e-12);
        assert_eq!(g.data[1], 0.0);
        assert_eq!(g.data[3], 0.0);
    }

    #[test]
    fn sum_reduction_scales_by_supervised_pixels() {
        let l = Tensor::<f64>::zeros(4, 2, 3, 3);
        let a = LabelMap { height: 3, width: 3, data: vec![1; 9] };
        let b = LabelMap { height: 3, width: 3, data: vec![2; 9] };
        let mean = segmentation_loss(&l, &[&a, &b], Reduction::Mean).unwrap().0;
        let sum = segmentation_loss(&l, &[&a, &b], Reduction::Sum).unwrap().0;
        assert_abs_diff_eq!(sum, 9.0 * mean, epsilon = 1e-12);
    }

    fn finite_difference<F: Fn(&Tensor<f64>) -> f64>(t: &Tensor<f64>, f: F) -> Vec<f64> {
        let h = 1e-6;
        (0..t.data.len())
            .map(|i| {
                let mut p = t.clone();
                p.data[i] += h;
                let mut m = t.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = crate::seed::rng_for(seed, &[]);
        Tensor::from_vec(c, n, h, w, (0..c * n * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let l = random_tensor(3, 2, 2, 3, 1);
        let a = LabelMap { height: 2, width: 3, data: vec![0, 1, 2, IGNORE_LABEL, 1, 0] };
        let b = LabelMap { height: 2, width: 3, data: vec![2, 2, 1, 0, IGNORE_LABEL, IGNORE_LABEL] };
        for red in [Reduction::Mean, Reduction::Sum] {
            let (_, g) = segmentation_loss(&l, &[&a, &b], red).unwrap();
            let fd = finite_difference(&l, |t| segmentation_loss(t, &[&a, &b], red).unwrap().0);
            for (x, y) in g.data.iter().zip(&fd) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-7);
            }
        }
        let z = random_tensor(2, 3, 2, 2, 2);
        let (_, g) = adversarial_loss(&z, DomainLabel::SOURCE, Reduction::Mean).unwrap();
        let fd = finite_difference(&z, |t| adversarial_loss(t, DomainLabel::SOURCE, Reduction::Mean).unwrap().0);
        for (x, y) in g.data.iter().zip(&fd) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-7);
        }
        let p = random_tensor(16, 8, 1, 1, 3);
        let labels = [3, 7, 11, 15, 0, 4, 8, 12];
        let (_, g) = pretext_loss(&p, &labels, 16).unwrap();
        let fd = finite_difference(&p, |t| pretext_loss(t, &labels, 16).unwrap().0);
        for (x, y) in g.data.iter().zip(&fd) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn label_flip_identity(seed in any::<u64>(), n in 1usize..4, h in 1usize..4, z in 0u8..2) {
            let t = random_tensor(2, n, h, h, seed);
            let z = DomainLabel::new(z).unwrap();
            let (a, ga) = adversarial_loss(&t, z, Reduction::Mean).unwrap();
            let (b, gb) = discriminator_loss(&t, z.flip(), Reduction::Mean).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(ga, gb);
        }

        #[test]
        fn batch_permutation_invariance(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let t = random_tensor(5, 6, 1, 1, seed);
            let labels = [0, 1, 2, 3, 4, 0];
            let base = classification_loss(&t, &labels).unwrap().0;
            let perm = [5, 3, 1, 0, 4, 2];
            let mut p = t.clone();
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..5 {
                    p.data[c * 6 + dst] = t.data[c * 6 + src] + shift;
                }
            }
            let pl: Vec<usize> = perm.iter().map(|&s| labels[s]).collect();
            let permuted = classification_loss(&p, &pl).unwrap().0;
            prop_assert!((base - permuted).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }
}
