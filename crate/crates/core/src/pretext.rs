//! Self-supervised rotation samples: crop-then-rotate (4 labels), the
//! quadrant-aware variant (16 labels) and pools mixing source images in.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, Image};
use crate::error::{config_err, shape_err, Error, Result};
use crate::seed::rng_for;

/// Counter-clockwise rotation by `r * 90` degrees, `r` in `0..4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationId(u8);

impl RotationId {
    pub const ALL: [RotationId; 4] = [RotationId(0), RotationId(1), RotationId(2), RotationId(3)];

    pub fn new(r: u8) -> Result<Self> {
        if r < 4 {
            Ok(Self(r))
        } else {
            Err(Error::InvalidInput(format!("rotation id {r} outside 0..4")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn inverse(self) -> Self {
        Self((4 - self.0) % 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretextMode {
    /// Rotation prediction on target crops.
    #[serde(rename = "rot")]
    Rot,
    /// Rotation prediction on crops pooled from both domains.
    #[serde(rename = "mixrot")]
    MixRot,
    /// Quadrant-aware rotation prediction, 16 classes.
    #[serde(rename = "sprot")]
    SpRot,
}

impl PretextMode {
    /// Size of the pretext label space.
    pub fn num_labels(self) -> usize {
        match self {
            PretextMode::Rot | PretextMode::MixRot => 4,
            PretextMode::SpRot => 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub mode: PretextMode,
    pub crop_size: usize,
    /// Emit all four rotations of every crop instead of one random rotation.
    pub expand_all_rotations: bool,
}

impl PretextConfig {
    pub fn new(mode: PretextMode, crop_size: usize) -> Self {
        Self { mode, crop_size, expand_all_rotations: true }
    }

    /// Checks the crop against an image of the given size.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        if self.crop_size < 8 {
            return Err(config_err(format!("crop_size {} below the minimum of 8", self.crop_size)));
        }
        let (h, w) = match self.mode {
            PretextMode::SpRot => (height / 2, width / 2),
            _ => (height, width),
        };
        if self.crop_size > h.min(w) {
            return Err(config_err(format!(
                "crop_size {} exceeds the {} of {}x{}",
                self.crop_size,
                if self.mode == PretextMode::SpRot { "quadrant" } else { "image" },
                h,
                w
            )));
        }
        if self.mode != PretextMode::SpRot && self.crop_size == height.min(width) {
            log::warn!(
                "pretext crop covers the full {height}x{width} image; rotation prediction may collapse to a trivial solution"
            );
        }
        Ok(())
    }
}

/// One self-supervised training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextSample {
    pub patch: Image,
    /// `r` for the 4-way modes, `4 * region + r` for the quadrant mode.
    pub label: usize,
    pub region: Option<u8>,
    pub rotation: RotationId,
    pub domain: Domain,
}

/// Splits a quadrant-aware label into `(region, rotation)`.
pub fn decode_spatial_label(label: usize) -> Result<(u8, RotationId)> {
    if label >= 16 {
        return Err(Error::InvalidInput(format!("spatial rotation label {label} outside 0..16")));
    }
    Ok(((label / 4) as u8, RotationId((label % 4) as u8)))
}

pub fn encode_spatial_label(region: u8, rotation: RotationId) -> usize {
    4 * region as usize + rotation.get() as usize
}

/// Exact rotation by a multiple of 90 degrees (a pixel permutation).
pub fn rotate90(img: &Image, r: RotationId) -> Result<Image> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if r.0 % 2 == 1 && h != w {
        return Err(shape_err(format!("cannot rotate non-square {h}x{w} image by {} degrees", 90 * r.0 as u32)));
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match r.0 {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    Ok(out)
}

/// A `size x size` window with its top-left corner drawn uniformly.
pub fn crop_random<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Result<Image> {
    let (top, left) = crop_origin(img, size, rng)?;
    img.window(top, left, size, size)
}

fn crop_origin<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(shape_err(format!("crop {size} does not fit {}x{}", img.height, img.width)));
    }
    let top = rng.gen_range(0..=img.height - size);
    let left = rng.gen_range(0..=img.width - size);
    Ok((top, left))
}

/// Regions in order top-left, top-right, bottom-left, bottom-right. Odd
/// dimensions put the extra row/column in the lower/right regions.
pub fn split_quadrants(img: &Image) -> Result<[Image; 4]> {
    if img.height < 2 || img.width < 2 {
        return Err(shape_err("quadrant split needs at least 2x2 pixels"));
    }
    let (hh, hw) = (img.height / 2, img.width / 2);
    let (bh, bw) = (img.height - hh, img.width - hw);
    Ok([
        img.window(0, 0, hh, hw)?,
        img.window(0, hw, hh, bw)?,
        img.window(hh, 0, bh, hw)?,
        img.window(hh, hw, bh, bw)?,
    ])
}

fn expand<R: Rng + ?Sized>(
    crop: &Image,
    region: Option<u8>,
    domain: Domain,
    all: bool,
    rng: &mut R,
    out: &mut Vec<PretextSample>,
) -> Result<()> {
    let rotations: Vec<RotationId> =
        if all { RotationId::ALL.to_vec() } else { vec![RotationId(rng.gen_range(0..4))] };
    for r in rotations {
        let label = match region {
            Some(q) => encode_spatial_label(q, r),
            None => r.0 as usize,
        };
        out.push(PretextSample { patch: rotate90(crop, r)?, label, region, rotation: r, domain });
    }
    Ok(())
}

/// Builds the pretext samples contributed by one image.
pub fn make_pretext_samples<R: Rng + ?Sized>(
    img: &Image,
    domain: Domain,
    cfg: &PretextConfig,
    rng: &mut R,
) -> Result<Vec<PretextSample>> {
    cfg.validate_for(img.height, img.width)?;
    let mut out = Vec::with_capacity(if cfg.mode == PretextMode::SpRot { 16 } else { 4 });
    match cfg.mode {
        PretextMode::Rot | PretextMode::MixRot => {
            let crop = crop_random(img, cfg.crop_size, rng)?;
            expand(&crop, None, domain, cfg.expand_all_rotations, rng, &mut out)?;
        }
        PretextMode::SpRot => {
            for (q, region) in split_quadrants(img)?.iter().enumerate() {
                let crop = crop_random(region, cfg.crop_size, rng)?;
                expand(&crop, Some(q as u8), domain, cfg.expand_all_rotations, rng, &mut out)?;
            }
        }
    }
    Ok(out)
}

/// Reference to an image feeding the pretext task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub domain: Domain,
    pub index: usize,
}

/// Images eligible for the pretext task: target images, plus source images
/// interleaved with them for MixRot.
pub fn pretext_image_list(
    target: &Dataset,
    source: Option<&Dataset>,
    mode: PretextMode,
) -> Result<Vec<PoolImage>> {
    let tgt = (0..target.len()).map(|index| PoolImage { domain: Domain::Target, index });
    if mode != PretextMode::MixRot {
        return Ok(tgt.collect());
    }
    let source = source.ok_or_else(|| config_err("MixRot needs a source dataset"))?;
    let mut src = (0..source.len()).map(|index| PoolImage { domain: Domain::Source, index });
    let mut out = Vec::with_capacity(target.len() + source.len());
    for t in tgt {
        out.push(t);
        out.extend(src.next());
    }
    out.extend(src);
    Ok(out)
}

/// A materialized pretext pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextDataset {
    pub config: PretextConfig,
    pub images: Vec<PoolImage>,
    pub samples: Vec<PretextSample>,
}

impl PretextDataset {
    pub fn num_labels(&self) -> usize {
        self.config.mode.num_labels()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_labels()];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Writes patches as PNGs and a `patch_path,label,domain` manifest.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("patches"))?;
        let mut text = format!("pretext,{}\n", self.num_labels());
        for (i, s) in self.samples.iter().enumerate() {
            let rel = PathBuf::from("patches").join(format!("{i:06}.png"));
            s.patch.save_png(&dir.join(&rel))?;
            let _ = writeln!(text, "{},{},{}", rel.to_string_lossy(), s.label, s.domain.as_str());
        }
        let path = dir.join("pretext.csv");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Builds the pretext pool. Only images are read; no label of either dataset
/// is consulted.
pub fn build_pretext_pool(
    target: &Dataset,
    source: Option<&Dataset>,
    cfg: &PretextConfig,
    seed: u64,
) -> Result<PretextDataset> {
    let images = pretext_image_list(target, source, cfg.mode)?;
    let mut samples = Vec::new();
    for (k, pi) in images.iter().enumerate() {
        let ds = match pi.domain {
            Domain::Target => target,
            Domain::Source => source.expect("source present for MixRot"),
        };
        let mut rng = rng_for(seed, &[0x9001, k as u64]);
        samples.extend(make_pretext_samples(&ds.samples[pi.index].image, pi.domain, cfg, &mut rng)?);
    }
    Ok(PretextDataset { config: *cfg, images, samples })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_synthetic_pair, SyntheticShiftSpec};

    fn img_from(h: usize, w: usize, vals: &[f32]) -> Image {
        Image::new(h, w, 1, vals.to_vec()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Image {
        img_from(h, w, &(0..h * w).map(|i| i as f32 / (h * w) as f32).collect::<Vec<_>>())
    }

    fn rot(r: u8) -> RotationId {
        RotationId::new(r).unwrap()
    }

    #[test]
    fn rotation_identity_inverse_and_half_turn() {
        let img = ramp(5, 5);
        assert_eq!(rotate90(&img, rot(0)).unwrap(), img);
        assert_eq!(rotate90(&rotate90(&img, rot(1)).unwrap(), rot(3)).unwrap(), img);
        // [[a,b],[c,d]] turned by 180 degrees
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let m = img_from(2, 2, &[a, b, c, d]);
        assert_eq!(rotate90(&m, rot(2)).unwrap(), img_from(2, 2, &[d, c, b, a]));
        // counter-clockwise quarter turn
        assert_eq!(rotate90(&m, rot(1)).unwrap(), img_from(2, 2, &[b, d, a, c]));
    }

    #[test]
    fn odd_rotation_of_non_square_is_rejected() {
        let img = ramp(2, 3);
        assert!(rotate90(&img, rot(1)).is_err());
        assert!(rotate90(&img, rot(3)).is_err());
        assert!(rotate90(&img, rot(2)).is_ok());
        assert!(RotationId::new(4).is_err());
    }

    #[test]
    fn full_size_crop_is_whole_image() {
        let img = ramp(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            assert_eq!(crop_random(&img, 6, &mut rng).unwrap(), img);
        }
        assert!(crop_random(&img, 7, &mut rng).is_err());
    }

    #[test]
    fn crop_is_deterministic_under_seed() {
        let img = ramp(10, 10);
        let a = crop_random(&img, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = crop_random(&img, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_positions_are_uniform() {
        // 25 valid top-left cells for a 4x4 window in an 8x8 image
        let img = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 25];
        let draws = 1000;
        for _ in 0..draws {
            let (t, l) = crop_origin(&img, 4, &mut rng).unwrap();
            counts[t * 5 + l] += 1;
        }
        let expected = draws as f64 / 25.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value for 24 dof at p = 0.01
        assert!(chi2 < 42.98, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn quadrants_tile_the_image() {
        let img = ramp(4, 4);
        let q = split_quadrants(&img).unwrap();
        let mut union: Vec<f32> = q.iter().flat_map(|r| r.pixels.clone()).collect();
        let mut all = img.pixels.clone();
        union.sort_by(f32::total_cmp);
        all.sort_by(f32::total_cmp);
        assert_eq!(union, all);
        assert!(q.iter().all(|r| r.height == 2 && r.width == 2));

        let m = img_from(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(split_quadrants(&m).unwrap()[0], img_from(1, 1, &[0.1]));

        let shapes: Vec<_> = split_quadrants(&ramp(5, 6)).unwrap().iter().map(|r| (r.height, r.width)).collect();
        assert_eq!(shapes, vec![(2, 3), (2, 3), (3, 3), (3, 3)]);
        assert!(split_quadrants(&ramp(1, 4)).is_err());
    }

    #[test]
    fn rot_expansion_covers_four_labels_of_one_crop() {
        let img = ramp(16, 16);
        let cfg = PretextConfig::new(PretextMode::Rot, 8);
        let s = make_pretext_samples(&img, Domain::Target, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().map(|x| x.label).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        for x in &s {
            assert_eq!(rotate90(&x.patch, x.rotation.inverse()).unwrap(), s[0].patch);
        }
    }

    #[test]
    fn rot_patch_matches_recomputed_crop() {
        let img = ramp(16, 16);
        let cfg = PretextConfig::new(PretextMode::Rot, 8);
        let s = make_pretext_samples(&img, Domain::Target, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let crop = crop_random(&img, 8, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let two = s.iter().find(|x| x.label == 2).unwrap();
        assert_eq!(two.patch, rotate90(&crop, rot(2)).unwrap());
    }

    #[test]
    fn single_rotation_mode_emits_one_sample() {
        let img = ramp(16, 16);
        let cfg = PretextConfig { expand_all_rotations: false, ..PretextConfig::new(PretextMode::Rot, 8) };
        let s = make_pretext_samples(&img, Domain::Target, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, s[0].rotation.get() as usize);
    }

    #[test]
    fn sprot_labels_are_a_permutation_of_sixteen() {
        let img = ramp(32, 32);
        let cfg = PretextConfig::new(PretextMode::SpRot, 8);
        let s = make_pretext_samples(&img, Domain::Target, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut labels: Vec<usize> = s.iter().map(|x| x.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..16).collect::<Vec<_>>());
        for x in &s {
            assert_eq!(decode_spatial_label(x.label).unwrap(), (x.region.unwrap(), x.rotation));
        }
        let too_big = PretextConfig::new(PretextMode::SpRot, 17);
        assert!(make_pretext_samples(&img, Domain::Target, &too_big, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    fn datasets(n: usize) -> (Dataset, Dataset) {
        let spec = SyntheticShiftSpec { samples_per_class: n, test_samples_per_class: 1, num_classes: 2, ..SyntheticShiftSpec::classification() };
        let pair = generate_synthetic_pair(&spec).unwrap();
        (pair.target_train, pair.source_train)
    }

    #[test]
    fn pool_sizes_per_mode() {
        let (target, source) = datasets(5);
        let rot = build_pretext_pool(&target, None, &PretextConfig::new(PretextMode::Rot, 16), 0).unwrap();
        assert_eq!(rot.samples.len(), 40);
        assert!(rot.samples.iter().all(|s| s.domain == Domain::Target));

        let mix = build_pretext_pool(&target, Some(&source), &PretextConfig::new(PretextMode::MixRot, 16), 0).unwrap();
        assert_eq!(mix.images.len(), 20);
        assert_eq!(mix.images.iter().filter(|p| p.domain == Domain::Source).count(), 10);
        assert_eq!(mix.samples.len(), 80);

        let (five, _) = datasets(3);
        let five = Dataset { samples: five.samples[..5].to_vec(), ..five };
        let sp = build_pretext_pool(&five, None, &PretextConfig::new(PretextMode::SpRot, 12), 0).unwrap();
        assert_eq!(sp.samples.len(), 80);
        assert_eq!(sp.label_histogram(), vec![5; 16]);
    }

    #[test]
    fn mixrot_without_source_is_a_config_error() {
        let (target, _) = datasets(1);
        let r = build_pretext_pool(&target, None, &PretextConfig::new(PretextMode::MixRot, 16), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn pool_is_deterministic_and_label_free() {
        let (target, _) = datasets(2);
        let cfg = PretextConfig::new(PretextMode::Rot, 16);
        let a = build_pretext_pool(&target, None, &cfg, 5).unwrap();
        assert_eq!(a, build_pretext_pool(&target, None, &cfg, 5).unwrap());
        // relabelling the images does not change the pool
        let mut relabelled = target.clone();
        for s in &mut relabelled.samples {
            *s.label_mut_for_tests() = crate::data::Label::Class(0);
        }
        assert_eq!(a, build_pretext_pool(&relabelled, None, &cfg, 5).unwrap());
    }

    #[test]
    fn pool_materializes_to_manifest() {
        let (target, _) = datasets(1);
        let pool = build_pretext_pool(&target, None, &PretextConfig::new(PretextMode::Rot, 16), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = pool.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1 + pool.samples.len());
        assert!(text.lines().nth(1).unwrap().ends_with(",0,target"));
    }

    proptest! {
        #[test]
        fn rotation_is_a_pixel_permutation(side in 1usize..9, seed in any::<u64>(), r in 0u8..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = Image::new(side, side, 3, vals).unwrap();
            let out = rotate90(&img, rot(r)).unwrap();
            let mut a = img.pixels.clone();
            let mut b = out.pixels.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
            let mut four = img.clone();
            for _ in 0..4 {
                four = rotate90(&four, rot(1)).unwrap();
            }
            prop_assert_eq!(four, img);
        }

        #[test]
        fn spatial_label_roundtrip(label in 0usize..16) {
            let (q, r) = decode_spatial_label(label).unwrap();
            prop_assert_eq!(encode_spatial_label(q, r), label);
        }
    }
}
