use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::write_manifest;
use super::{Dataset, Domain, Image, Label, LabelMap, LabeledSample, Split, Task};
use crate::error::{config_err, Result};
use crate::seed::rng_for;

/// Glyph shapes in class order. Classification uses the first `C`; segmentation
/// uses the first `C - 1` as classes `1..C` with class 0 the background.
pub const GLYPH_NAMES: [&str; 6] = ["triangle", "ell", "tee", "dome", "ring", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundTexture {
    Plain,
    Stripes,
    Checker,
    Blobs,
}

/// Style changes applied to the target domain only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Rotation of every pixel's hue, in degrees.
    pub hue_rotation: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f32,
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur_radius: f32,
    pub background_texture: BackgroundTexture,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            hue_rotation: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0.0,
            background_texture: BackgroundTexture::Plain,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            hue_rotation: 0.0,
            noise_sigma: 0.1,
            blur_radius: 0.0,
            background_texture: BackgroundTexture::Blobs,
        }
    }
}

/// Parameters of the procedural source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShiftSpec {
    pub task: Task,
    pub image_size: usize,
    pub num_classes: usize,
    /// Training images per class and domain.
    pub samples_per_class: usize,
    /// Held-out images per class and domain.
    pub test_samples_per_class: usize,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self::classification()
    }
}

impl SyntheticShiftSpec {
    pub fn classification() -> Self {
        Self {
            task: Task::Classification,
            image_size: 32,
            num_classes: 4,
            samples_per_class: 125,
            test_samples_per_class: 50,
            shift: DomainShift::default(),
            seed: 0,
        }
    }

    pub fn segmentation() -> Self {
        Self { task: Task::Segmentation, image_size: 48, ..Self::classification() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        let glyphs = match self.task {
            Task::Classification => self.num_classes,
            Task::Segmentation => self.num_classes - 1,
        };
        if glyphs > GLYPH_NAMES.len() {
            return Err(config_err(format!(
                "at most {} glyph classes are available",
                GLYPH_NAMES.len()
            )));
        }
        if self.image_size < 8 {
            return Err(config_err("image_size must be at least 8"));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == 0 {
            return Err(config_err("sample counts must be positive"));
        }
        let s = &self.shift;
        if !s.hue_rotation.is_finite() {
            return Err(config_err("hue_rotation must be finite"));
        }
        if !(s.noise_sigma.is_finite() && s.noise_sigma >= 0.0) {
            return Err(config_err("noise_sigma must be non-negative"));
        }
        if !(s.blur_radius.is_finite() && s.blur_radius >= 0.0) {
            return Err(config_err("blur_radius must be non-negative"));
        }
        Ok(())
    }
}

/// Generated source and target domains with train/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub spec: SyntheticShiftSpec,
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl SyntheticPair {
    pub fn get(&self, domain: Domain, split: Split) -> &Dataset {
        match (domain, split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Test) => &self.source_test,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Test) => &self.target_test,
        }
    }

    /// Writes images, label maps and one manifest per (domain, split) under
    /// `root`; returns the manifest paths in (source-train, source-test,
    /// target-train, target-test) order.
    pub fn write(&self, root: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        let mut out = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for split in [Split::Train, Split::Test] {
                out.push(write_manifest(self.get(domain, split), root, domain, split)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct Glyph {
    class: usize,
    shape: usize,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    color: [f32; 3],
}

#[derive(Debug, Clone)]
struct Scene {
    background: [f32; 3],
    glyphs: Vec<Glyph>,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn inside_triangle(u: f32, v: f32) -> bool {
    let pts = [(0.0, -0.95), (0.9, 0.8), (-0.9, 0.8)];
    let mut sign = 0i32;
    for i in 0..3 {
        let (x1, y1) = pts[i];
        let (x2, y2) = pts[(i + 1) % 3];
        let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
        let s = if cross >= 0.0 { 1 } else { -1 };
        if sign == 0 {
            sign = s;
        } else if s != sign {
            return false;
        }
    }
    true
}

/// Membership test in the glyph's canonical frame (`u` right, `v` down, extent ±1).
fn glyph_contains(shape: usize, u: f32, v: f32) -> bool {
    let within = |a: f32, lo: f32, hi: f32| a >= lo && a <= hi;
    match shape {
        0 => inside_triangle(u, v),
        1 => {
            (within(u, -0.75, -0.25) && within(v, -0.95, 0.95))
                || (within(u, -0.75, 0.8) && within(v, 0.45, 0.95))
        }
        2 => {
            (within(u, -0.9, 0.9) && within(v, -0.95, -0.45))
                || (within(u, -0.25, 0.25) && within(v, -0.95, 0.95))
        }
        3 => {
            let vv = v - 0.35;
            u * u + vv * vv <= 0.9 * 0.9 && vv <= 0.0
        }
        4 => {
            let r2 = u * u + v * v;
            (0.5 * 0.5..=0.9 * 0.9).contains(&r2)
        }
        _ => {
            (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9)
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Fractional coverage of pixel `(y, x)` by a glyph.
fn coverage(g: &Glyph, y: usize, x: usize) -> f32 {
    let (sin, cos) = g.angle.sin_cos();
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
            let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
            let dx = (px - g.cx) / g.radius;
            let dy = (py - g.cy) / g.radius;
            // inverse rotation into the canonical frame
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if glyph_contains(g.shape, u, v) {
                hits += 1;
            }
        }
    }
    hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

fn random_glyph_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv_to_rgb(rng.gen_range(0.0..50.0), rng.gen_range(0.6..0.9), rng.gen_range(0.75..0.95))
}

fn random_background(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv_to_rgb(rng.gen_range(190.0..250.0), rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.45))
}

fn classification_scene(size: usize, class: usize, rng: &mut ChaCha8Rng) -> Scene {
    let s = size as f32;
    let background = random_background(rng);
    let glyph = Glyph {
        class,
        shape: class,
        cx: s / 2.0 + rng.gen_range(-0.12..0.12) * s,
        cy: s / 2.0 + rng.gen_range(-0.12..0.12) * s,
        radius: s * rng.gen_range(0.28..0.38),
        angle: rng.gen_range(-15.0f32..15.0).to_radians(),
        color: random_glyph_color(rng),
    };
    Scene { background, glyphs: vec![glyph] }
}

fn segmentation_scene(size: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Scene {
    let s = size as f32;
    let background = random_background(rng);
    let count = rng.gen_range(1..=3usize);
    let mut glyphs: Vec<Glyph> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = s * rng.gen_range(0.14..0.22);
        let class = rng.gen_range(1..num_classes);
        let mut cx = 0.0;
        let mut cy = 0.0;
        for _ in 0..8 {
            cx = rng.gen_range(radius..s - radius);
            cy = rng.gen_range(radius..s - radius);
            if glyphs.iter().all(|g| ((g.cx - cx).powi(2) + (g.cy - cy).powi(2)).sqrt() > g.radius + radius * 0.8) {
                break;
            }
        }
        glyphs.push(Glyph {
            class,
            shape: class - 1,
            cx,
            cy,
            radius,
            angle: rng.gen_range(-15.0f32..15.0).to_radians(),
            color: random_glyph_color(rng),
        });
    }
    Scene { background, glyphs }
}

fn texture(kind: BackgroundTexture, base: [f32; 3], size: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let n = size * size;
    match kind {
        BackgroundTexture::Plain => vec![base; n],
        BackgroundTexture::Stripes => {
            let other = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.8));
            let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let period: f32 = rng.gen_range(4.0..9.0);
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / size) as f32, (i % size) as f32);
                    let t = (x * theta.cos() + y * theta.sin()) * std::f32::consts::TAU / period + phase;
                    let a = 0.5 + 0.5 * t.sin();
                    mix(base, other, a)
                })
                .collect()
        }
        BackgroundTexture::Checker => {
            let other = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.8));
            let cell = rng.gen_range(3..7usize);
            let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            (0..n)
                .map(|i| {
                    let (y, x) = (i / size + oy, i % size + ox);
                    if (y / cell + x / cell) % 2 == 0 {
                        base
                    } else {
                        other
                    }
                })
                .collect()
        }
        BackgroundTexture::Blobs => {
            let s = size as f32;
            let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(3..7))
                .map(|_| {
                    (
                        rng.gen_range(0.0..s),
                        rng.gen_range(0.0..s),
                        s * rng.gen_range(0.1..0.3),
                        hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9)),
                    )
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                    let mut px = base;
                    for &(by, bx, r, col) in &blobs {
                        let d2 = (y - by).powi(2) + (x - bx).powi(2);
                        let w = (-d2 / (2.0 * r * r)).exp();
                        px = mix(px, col, w);
                    }
                    px
                })
                .collect()
        }
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = (img.height as isize, img.width as isize, img.channels);
    for horizontal in [true, false] {
        let src = img.clone();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let d = ki as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += k * src.get(yy as usize, xx as usize, ch);
                    }
                    img.set(y as usize, x as usize, ch, acc);
                }
            }
        }
    }
}

/// Renders a scene; `shift = None` gives the canonical source style.
fn render(scene: &Scene, size: usize, shift: &DomainShift, style_rng: &mut ChaCha8Rng) -> Image {
    let background = texture(shift.background_texture, scene.background, size, style_rng);
    let mut img = Image::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let mut px = background[y * size + x];
            for g in &scene.glyphs {
                let a = coverage(g, y, x);
                if a > 0.0 {
                    px = mix(px, g.color, a);
                }
            }
            if shift.hue_rotation != 0.0 {
                let (h, s, v) = rgb_to_hsv(px);
                px = hsv_to_rgb(h + shift.hue_rotation, s, v);
            }
            for (c, v) in px.iter().enumerate() {
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    gaussian_blur(&mut img, shift.blur_radius);
    if shift.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, shift.noise_sigma).expect("valid sigma");
        for v in &mut img.pixels {
            *v = (*v + noise.sample(style_rng)).clamp(0.0, 1.0);
        }
    }
    img.quantize();
    img
}

fn label_for(scene: &Scene, task: Task, size: usize) -> Label {
    match task {
        Task::Classification => Label::Class(scene.glyphs[0].class),
        Task::Segmentation => {
            let mut data = vec![0u8; size * size];
            for g in &scene.glyphs {
                for y in 0..size {
                    for x in 0..size {
                        if coverage(g, y, x) >= 0.5 {
                            data[y * size + x] = g.class as u8;
                        }
                    }
                }
            }
            Label::Map(LabelMap { height: size, width: size, data })
        }
    }
}

fn generate_split(spec: &SyntheticShiftSpec, split: Split) -> (Dataset, Dataset) {
    let per_class = match split {
        Split::Train => spec.samples_per_class,
        Split::Test => spec.test_samples_per_class,
    };
    let total = per_class * spec.num_classes;
    let split_id = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let canonical = DomainShift::none();
    let mut source = Vec::with_capacity(total);
    let mut target = Vec::with_capacity(total);
    for i in 0..total {
        let mut geom = rng_for(spec.seed, &[0x5e7, split_id, i as u64]);
        let scene = match spec.task {
            Task::Classification => classification_scene(spec.image_size, i % spec.num_classes, &mut geom),
            Task::Segmentation => segmentation_scene(spec.image_size, spec.num_classes, &mut geom),
        };
        let label = label_for(&scene, spec.task, spec.image_size);
        // Both domains draw style randomness from the same stream so that an
        // identity shift reproduces the source pixels exactly.
        let style_stream = [0x57e, split_id, i as u64];
        let src = render(&scene, spec.image_size, &canonical, &mut rng_for(spec.seed, &style_stream));
        let tgt = render(&scene, spec.image_size, &spec.shift, &mut rng_for(spec.seed, &style_stream));
        source.push(LabeledSample::new(src, label.clone(), Domain::Source));
        target.push(LabeledSample::new(tgt, label, Domain::Target));
    }
    let wrap = |samples| Dataset { task: spec.task, num_classes: spec.num_classes, split, samples };
    (wrap(source), wrap(target))
}

/// Renders the paired source/target domains described by `spec`.
///
/// Scene geometry and base colors are shared between the two domains; only
/// the [`DomainShift`] differs. Target labels are generated for evaluation and
/// stay tainted for training.
pub fn generate_synthetic_pair(spec: &SyntheticShiftSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let (source_train, target_train) = generate_split(spec, Split::Train);
    let (source_test, target_test) = generate_split(spec, Split::Test);
    Ok(SyntheticPair { spec: spec.clone(), source_train, source_test, target_train, target_test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            samples_per_class: 3,
            test_samples_per_class: 2,
            ..match task {
                Task::Classification => SyntheticShiftSpec::classification(),
                Task::Segmentation => SyntheticShiftSpec::segmentation(),
            }
        }
    }

    #[test]
    fn zero_shift_reproduces_source_pixels() {
        let mut spec = small(Task::Classification);
        spec.shift = DomainShift::none();
        let pair = generate_synthetic_pair(&spec).unwrap();
        for (s, t) in pair.source_train.samples.iter().zip(&pair.target_train.samples) {
            assert_eq!(s.image, t.image);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = small(Task::Segmentation);
        spec.seed = 7;
        assert_eq!(generate_synthetic_pair(&spec).unwrap(), generate_synthetic_pair(&spec).unwrap());
    }

    #[test]
    fn noise_shift_changes_pixels() {
        let mut spec = small(Task::Classification);
        spec.shift = DomainShift { noise_sigma: 0.1, ..DomainShift::none() };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for (s, t) in pair.source_train.samples.iter().zip(&pair.target_train.samples) {
            for (a, b) in s.image.pixels.iter().zip(&t.image.pixels) {
                total += (a - b).abs() as f64;
                count += 1;
            }
        }
        let mean = total / count as f64;
        // clamped N(0, 0.1) noise has E|n| close to 0.08
        assert!(mean > 0.05 && mean < 0.1, "mean abs diff {mean}");
    }

    #[test]
    fn classes_are_balanced_and_labels_valid() {
        let pair = generate_synthetic_pair(&small(Task::Classification)).unwrap();
        assert_eq!(pair.source_train.len(), 12);
        assert_eq!(pair.target_test.len(), 8);
        for c in 0..4 {
            let n = pair
                .source_train
                .samples
                .iter()
                .filter(|s| s.eval_label() == &Label::Class(c))
                .count();
            assert_eq!(n, 3);
        }
        pair.source_train.validate().unwrap();
        assert!(pair.target_train.samples.iter().all(|s| s.label_is_tainted()));
    }

    #[test]
    fn segmentation_maps_mark_shapes_over_background() {
        let pair = generate_synthetic_pair(&small(Task::Segmentation)).unwrap();
        pair.source_train.validate().unwrap();
        for s in &pair.source_train.samples {
            let Label::Map(m) = s.eval_label() else { panic!("expected map") };
            assert_eq!((m.height, m.width), (48, 48));
            let bg = m.data.iter().filter(|&&v| v == 0).count();
            assert!(bg > 0 && bg < m.data.len(), "both background and shape pixels present");
            assert!(m.data.iter().all(|&v| (v as usize) < 4));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small(Task::Classification);
        spec.num_classes = 1;
        assert!(generate_synthetic_pair(&spec).is_err());
        let mut spec = small(Task::Classification);
        spec.image_size = 0;
        assert!(generate_synthetic_pair(&spec).is_err());
        let mut spec = small(Task::Classification);
        spec.num_classes = 7;
        assert!(generate_synthetic_pair(&spec).is_err());
    }

    #[test]
    fn hsv_roundtrip() {
        for &rgb in &[[0.2f32, 0.4, 0.9], [0.9, 0.1, 0.1], [0.5, 0.5, 0.5], [0.0, 0.8, 0.3]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for i in 0..3 {
                assert!((back[i] - rgb[i]).abs() < 1e-5);
            }
        }
    }
}
