//! Reproducible synthetic line-space SEM-like datasets.
//!
//! Images are vertical line/space patterns with additive Gaussian noise and
//! per-image contrast jitter; stochastic defect instances are injected with
//! exact bounding-box annotations. Every image is a pure function of
//! `(config, split, image index, master seed)`: per-image RNG substreams are
//! derived by counter-based stream splitting, so generation order does not
//! matter.

mod defects;
mod manifest;

pub use defects::inject_defect;
pub use manifest::{
    load_dataset_info, load_manifest, DatasetInfo, DatasetManifest, ManifestEntry, Split,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::geometry::Annotation;
use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no valid site for class {class} after {attempts} attempts (config too dense)")]
    PlacementFailure { class: usize, attempts: usize },
    #[error("{path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: parse failure: {msg}")]
    ParseFailure {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: invalid annotation {index}: {msg}")]
    ValidationFailure {
        file: String,
        line: usize,
        index: usize,
        msg: String,
    },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

/// Lithography stage the dataset mimics; decides the defect taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Adi,
    Aei,
}

impl Family {
    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            Family::Adi => &["gap", "p_gap", "microbridge", "bridge", "line_collapse"],
            Family::Aei => &[
                "thin_bridge",
                "single_bridge",
                "multi_bridge_non_horizontal",
                "multi_bridge_horizontal",
                "line_collapse",
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names().len()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Adi => "adi",
            Family::Aei => "aei",
        }
    }
}

/// Number of defects injected per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountDist {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

impl CountDist {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match *self {
            CountDist::Fixed(n) => n,
            CountDist::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

/// Per-split image counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Generator configuration.
///
/// Defect geometry is drawn uniformly from per-class ranges sized relative to
/// `pitch`; see the renderers in [`inject_defect`] for the exact ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub family: Family,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Line/space period in pixels.
    pub pitch: usize,
    /// Line width in pixels (< pitch).
    pub line_width: usize,
    /// Std-dev of additive Gaussian pixel noise, in intensity units.
    pub noise_sigma: f32,
    /// Per-image linear contrast scale is drawn from `1 ± contrast_jitter`.
    pub contrast_jitter: f32,
    pub defects_per_image: CountDist,
    /// Per-class sampling probabilities; must sum to 1.
    pub class_mix: Vec<f32>,
    pub seed: u64,
    /// Base intensity of lines before jitter.
    pub line_level: u8,
    /// Base intensity of spaces before jitter.
    pub space_level: u8,
    /// Minimum gap in pixels kept between defect bounding boxes.
    pub min_separation: f32,
}

impl SynthConfig {
    /// AEI-like defaults: 480x480 images, class mix matching the AEI split
    /// instance proportions.
    pub fn aei_default(seed: u64) -> Self {
        Self {
            family: Family::Aei,
            image_size: 480,
            pitch: 24,
            line_width: 12,
            noise_sigma: 6.0,
            contrast_jitter: 0.08,
            defects_per_image: CountDist::Fixed(1),
            // thin_bridge, single_bridge, mb_non_horizontal, mb_horizontal, line_collapse
            class_mix: vec![0.261, 0.260, 0.173, 0.087, 0.219],
            seed,
            line_level: 180,
            space_level: 60,
            min_separation: 12.0,
        }
    }

    /// ADI-like defaults: 1024x1024 images, class mix matching the ADI split
    /// instance proportions and ~2.5 defects per image.
    pub fn adi_default(seed: u64) -> Self {
        Self {
            family: Family::Adi,
            image_size: 1024,
            pitch: 32,
            line_width: 16,
            noise_sigma: 8.0,
            contrast_jitter: 0.10,
            defects_per_image: CountDist::Uniform { min: 1, max: 4 },
            // gap, p_gap, microbridge, bridge, line_collapse
            class_mix: vec![0.414, 0.125, 0.150, 0.094, 0.217],
            seed,
            line_level: 180,
            space_level: 60,
            min_separation: 12.0,
        }
    }

    /// Small, low-noise sanity dataset: 64x64 images, one defect each,
    /// only two populated classes (single_bridge and line_collapse). Meant
    /// for fast end-to-end training checks, not realism.
    pub fn easy_sanity(seed: u64) -> Self {
        Self {
            family: Family::Aei,
            image_size: 64,
            pitch: 16,
            line_width: 8,
            noise_sigma: 2.0,
            contrast_jitter: 0.04,
            defects_per_image: CountDist::Fixed(1),
            class_mix: vec![0.0, 0.5, 0.0, 0.0, 0.5],
            seed,
            line_level: 180,
            space_level: 60,
            min_separation: 8.0,
        }
    }

    /// Split sizes for the sanity dataset.
    pub fn easy_sanity_counts() -> SplitCounts {
        SplitCounts {
            train: 200,
            val: 50,
            test: 50,
        }
    }

    /// Desk-scale split sizes: 10% of the full dataset image counts.
    pub fn desk_counts(family: Family) -> SplitCounts {
        match family {
            Family::Aei => SplitCounts {
                train: 92,
                val: 12,
                test: 12,
            },
            Family::Adi => SplitCounts {
                train: 105,
                val: 12,
                test: 15,
            },
        }
    }

    /// Full-scale split sizes matching the source dataset image counts.
    pub fn full_counts(family: Family) -> SplitCounts {
        match family {
            Family::Aei => SplitCounts {
                train: 920,
                val: 120,
                test: 120,
            },
            Family::Adi => SplitCounts {
                train: 1053,
                val: 117,
                test: 154,
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.image_size == 0 {
            return err("image_size must be positive".into());
        }
        if !(self.pitch > self.line_width && self.line_width > 0) {
            return err(format!(
                "pitch > line_width > 0 required, got pitch={} line_width={}",
                self.pitch, self.line_width
            ));
        }
        if self.image_size < 2 * self.pitch {
            return err("image must span at least two pitches".into());
        }
        if self.class_mix.len() != self.family.num_classes() {
            return err(format!(
                "class_mix must have {} entries",
                self.family.num_classes()
            ));
        }
        let sum: f32 = self.class_mix.iter().sum();
        if self.class_mix.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-4 {
            return err(format!("class_mix must be non-negative and sum to 1 (sum={sum})"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return err("contrast_jitter must be in [0,1)".into());
        }
        if self.line_level == self.space_level {
            return err("line_level and space_level must differ".into());
        }
        Ok(())
    }
}

/// Line positions and post-jitter intensity levels of one rendered image.
#[derive(Debug, Clone, Copy)]
pub struct PatternLayout {
    pub pitch: usize,
    pub line_width: usize,
    /// x of the first (possibly clipped) line start in `[0, pitch)`.
    pub origin: usize,
    pub line_level: u8,
    pub space_level: u8,
    pub width: usize,
    pub height: usize,
}

impl PatternLayout {
    /// Left edge of full line `k` (0-based over fully visible lines).
    pub fn line_x(&self, k: usize) -> usize {
        self.origin + k * self.pitch
    }

    /// Number of lines that fit entirely inside the image.
    pub fn num_full_lines(&self) -> usize {
        let mut n = 0;
        while self.line_x(n) + self.line_width <= self.width {
            n += 1;
        }
        n
    }
}

/// Per-image RNG substream: counter-based split off the master seed.
pub fn image_rng(master_seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    rng.set_stream((split_tag << 32) | index as u64);
    rng
}

/// Render the defect-free line/space pattern with per-image contrast jitter
/// and additive Gaussian noise. Deterministic given `(cfg, rng)` state.
pub fn render_pattern(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GrayImage {
    render_with_layout(cfg, rng).0
}

/// As [`render_pattern`], also returning the pattern layout needed to place
/// defects on the rendered lines.
pub fn render_with_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (GrayImage, PatternLayout) {
    let n = cfg.image_size;
    let phase = rng.gen_range(0..cfg.pitch);
    let jitter_u: f32 = rng.gen_range(-1.0f32..=1.0);
    let scale = 1.0 + jitter_u * cfg.contrast_jitter;
    let apply = |level: u8| -> u8 {
        let v = 128.0 + scale * (level as f32 - 128.0);
        v.round().clamp(0.0, 255.0) as u8
    };
    let line_level = apply(cfg.line_level);
    let space_level = apply(cfg.space_level);

    let mut column = vec![0u8; n];
    for (x, c) in column.iter_mut().enumerate() {
        let in_line = (x + phase) % cfg.pitch < cfg.line_width;
        *c = if in_line { line_level } else { space_level };
    }
    let mut img = GrayImage::new(n, n, 0).expect("validated size");
    for y in 0..n {
        let row = &mut img.pixels_mut()[y * n..(y + 1) * n];
        row.copy_from_slice(&column);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0f32, cfg.noise_sigma).expect("validated sigma");
        for p in img.pixels_mut() {
            let noisy = *p as f32 + normal.sample(rng);
            *p = noisy.round().clamp(0.0, 255.0) as u8;
        }
    }
    let origin = (cfg.pitch - phase % cfg.pitch) % cfg.pitch;
    (
        img,
        PatternLayout {
            pitch: cfg.pitch,
            line_width: cfg.line_width,
            origin,
            line_level,
            space_level,
            width: n,
            height: n,
        },
    )
}

/// Render one dataset image with its annotations. Pure function of
/// `(cfg, split, index)`; used by [`generate_dataset`] and directly by tests.
pub fn generate_image(
    cfg: &SynthConfig,
    split: Split,
    index: usize,
) -> Result<(GrayImage, Vec<Annotation>), SynthError> {
    let mut rng = image_rng(cfg.seed, split, index);
    let (mut img, layout) = render_with_layout(cfg, &mut rng);
    let n_defects = cfg.defects_per_image.sample(&mut rng);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n_defects as usize);
    for _ in 0..n_defects {
        let class = sample_class(&cfg.class_mix, &mut rng);
        let occupied: Vec<_> = annotations.iter().map(|a| a.bbox).collect();
        let ann = inject_defect(
            &mut img,
            &layout,
            cfg.family,
            class,
            &occupied,
            cfg.min_separation,
            &mut rng,
        )?;
        annotations.push(ann);
    }
    Ok((img, annotations))
}

fn sample_class(mix: &[f32], rng: &mut impl Rng) -> usize {
    let u: f32 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    mix.len() - 1
}

/// Generate all three splits under `root` and write the dataset layout:
/// `<root>/<split>/images/<idx>.pgm`, `<root>/<split>/annotations.jsonl`
/// and `<root>/dataset.json`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    root: &Path,
    counts: SplitCounts,
) -> Result<Vec<DatasetManifest>, SynthError> {
    cfg.validate()?;
    let mut manifests = Vec::with_capacity(3);
    let mut train_sum = 0.0f64;
    let mut train_sumsq = 0.0f64;
    let mut train_pixels = 0u64;
    for split in [Split::Train, Split::Val, Split::Test] {
        let count = counts.get(split);
        let rendered: Vec<(GrayImage, Vec<Annotation>)> = (0..count)
            .into_par_iter()
            .map(|idx| generate_image(cfg, split, idx))
            .collect::<Result<_, _>>()?;
        let images_dir = root.join(split.as_str()).join("images");
        std::fs::create_dir_all(&images_dir).map_err(|source| SynthError::IoFailure {
            path: images_dir.display().to_string(),
            source,
        })?;
        let mut entries = Vec::with_capacity(count);
        for (idx, (img, annotations)) in rendered.iter().enumerate() {
            let name = format!("{idx}.pgm");
            img.save_pgm(&images_dir.join(&name))?;
            if split == Split::Train {
                for &p in img.pixels() {
                    let v = p as f64 / 255.0;
                    train_sum += v;
                    train_sumsq += v * v;
                }
                train_pixels += img.pixels().len() as u64;
            }
            entries.push(ManifestEntry {
                image: name,
                boxes: annotations.clone(),
            });
        }
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            split,
            entries,
        };
        manifest.save_annotations()?;
        manifests.push(manifest);
    }
    let (pixel_mean, pixel_std) = if train_pixels > 0 {
        let mean = train_sum / train_pixels as f64;
        let var = (train_sumsq / train_pixels as f64 - mean * mean).max(0.0);
        (mean, var.sqrt().max(1e-6))
    } else {
        (0.5, 0.25)
    };
    let info = DatasetInfo {
        format_version: 1,
        family: cfg.family,
        classes: cfg
            .family
            .class_names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        image_size: cfg.image_size,
        seed: cfg.seed,
        pixel_mean,
        pixel_std,
        counts,
        config: cfg.clone(),
    };
    info.save(root)?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            image_size: 96,
            pitch: 12,
            line_width: 6,
            ..SynthConfig::aei_default(seed)
        }
    }

    #[test]
    fn noiseless_profile_is_periodic() {
        let mut cfg = small_cfg(3);
        cfg.noise_sigma = 0.0;
        cfg.contrast_jitter = 0.0;
        let mut rng = image_rng(cfg.seed, Split::Train, 0);
        let img = render_pattern(&cfg, &mut rng);
        let levels: std::collections::BTreeSet<u8> = img.pixels().iter().copied().collect();
        assert_eq!(levels.len(), 2, "two-level image");
        for y in 0..img.height() {
            for x in 0..img.width() - cfg.pitch {
                assert_eq!(img.get(x, y), img.get(x + cfg.pitch, y));
            }
        }
        // Columns are constant.
        for x in 0..img.width() {
            for y in 1..img.height() {
                assert_eq!(img.get(x, 0), img.get(x, y));
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = small_cfg(9);
        let a = render_pattern(&cfg, &mut image_rng(cfg.seed, Split::Train, 4));
        let b = render_pattern(&cfg, &mut image_rng(cfg.seed, Split::Train, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let mut cfg = SynthConfig::aei_default(11);
        cfg.contrast_jitter = 0.0;
        cfg.noise_sigma = 8.0;
        let noisy = render_pattern(&cfg, &mut image_rng(cfg.seed, Split::Train, 0));
        cfg.noise_sigma = 0.0;
        let clean = render_pattern(&cfg, &mut image_rng(cfg.seed, Split::Train, 0));
        let n = noisy.pixels().len() as f64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (a, b) in noisy.pixels().iter().zip(clean.pixels()) {
            let d = *a as f64 - *b as f64;
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / n;
        let std = (sumsq / n - mean * mean).sqrt();
        assert!(mean.abs() < 0.5, "noise mean {mean}");
        assert!((std - 8.0).abs() < 0.8, "noise std {std}");
    }

    #[test]
    fn layout_lines_are_lines() {
        let mut cfg = small_cfg(5);
        cfg.noise_sigma = 0.0;
        let mut rng = image_rng(cfg.seed, Split::Val, 2);
        let (img, layout) = render_with_layout(&cfg, &mut rng);
        assert!(layout.num_full_lines() >= 6);
        for k in 0..layout.num_full_lines() {
            let x = layout.line_x(k);
            assert_eq!(img.get(x, 0), layout.line_level, "line {k} at x={x}");
            assert_eq!(img.get(x + layout.line_width - 1, 7), layout.line_level);
            if x + layout.line_width < img.width() {
                assert_eq!(img.get(x + layout.line_width, 0), layout.space_level);
            }
            if x > 0 {
                assert_eq!(img.get(x - 1, 0), layout.space_level);
            }
        }
    }

    #[test]
    fn class_mix_frequencies_within_multinomial_bounds() {
        let mut cfg = small_cfg(21);
        cfg.noise_sigma = 2.0;
        cfg.defects_per_image = CountDist::Fixed(1);
        cfg.class_mix = vec![0.261, 0.260, 0.173, 0.087, 0.219];
        let mut counts = [0usize; 5];
        let total = 600;
        for idx in 0..total {
            let (_, anns) = generate_image(&cfg, Split::Train, idx).unwrap();
            for a in &anns {
                counts[a.class_id] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        assert!(n >= 500);
        for (c, &count) in counts.iter().enumerate() {
            let p = cfg.class_mix[c] as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (count as f64 - n as f64 * p).abs();
            assert!(
                dev <= 3.0 * sigma,
                "class {c}: count {count}, expected {:.1} +- {:.1}",
                n as f64 * p,
                sigma
            );
        }
    }
}
