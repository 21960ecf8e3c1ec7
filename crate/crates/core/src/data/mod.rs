//! Synthetic multi-rater segmentation data.
//!
//! Each sample is a grayscale image containing a core disk plus an
//! "annex" disk attached to its boundary. Raters disagree in two ways,
//! both driven by one probability `p`: a rater annotates the object at all
//! with probability `p`, and an annotating rater includes the annex with
//! probability `p`. The core is always included by annotating raters, so
//! low `p` yields high inter-rater disagreement and `p = 1` perfect
//! agreement. Samples where no rater annotates anything are rejected at
//! assembly, mirroring corpora that keep only slices with at least one
//! non-empty segmentation.

pub mod pgm;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Square image edge in pixels.
    pub size: usize,
    /// Raters per sample.
    pub raters: usize,
    /// Core disk radius range (inclusive).
    pub core_radius: (f64, f64),
    /// Annex disk radius range (inclusive); the annex is centered on the
    /// core boundary at a random angle.
    pub annex_radius: (f64, f64),
    /// Probability that a rater annotates at all, and independently that an
    /// annotating rater includes the annex.
    pub inclusion_prob: f64,
    /// Standard deviation of per-pixel Gaussian noise added to the image.
    pub noise: f64,
    /// Probability that an image contains an object at all.
    pub presence_prob: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 32,
            raters: 4,
            core_radius: (4.0, 6.0),
            annex_radius: (3.5, 5.0),
            inclusion_prob: 0.5,
            noise: 0.03,
            presence_prob: 0.9,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config(format!("image size must be at least 8, got {}", self.size)));
        }
        if self.raters == 0 {
            return Err(Error::config("rater count must be positive".to_string()));
        }
        for (name, p) in [
            ("inclusion_prob", self.inclusion_prob),
            ("presence_prob", self.presence_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [
            ("core_radius", self.core_radius),
            ("annex_radius", self.annex_radius),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::config(format!(
                    "{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        let reach = self.core_radius.1 + self.annex_radius.1;
        if 2.0 * reach >= self.size as f64 {
            return Err(Error::config(format!(
                "object with reach {reach} cannot fit a {0}x{0} image",
                self.size
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("every split needs at least one sample".to_string()));
        }
        Ok(())
    }
}

/// One image with all rater masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRaterSample {
    pub id: String,
    /// Edge length; images are square.
    pub size: usize,
    /// Row-major pixels in [0, 1], quantized to the 16-bit storage grid.
    pub image: Vec<f64>,
    /// One binary mask per rater.
    pub masks: Vec<Vec<bool>>,
}

impl MultiRaterSample {
    /// Number of raters whose mask is non-empty (the agreement bucket).
    pub fn agreement_bucket(&self) -> usize {
        self.masks.iter().filter(|m| m.iter().any(|&b| b)).count()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub train: Vec<MultiRaterSample>,
    pub val: Vec<MultiRaterSample>,
    pub test: Vec<MultiRaterSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[MultiRaterSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split {other}"))),
        }
    }
}

/// Deterministically generates a dataset; each split draws from its own
/// seed stream, so split sizes can change independently.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let make = |split: &str, n: usize| -> Vec<MultiRaterSample> {
        let mut rng = rng::stream(config.seed, &format!("data/{split}"));
        let mut samples = Vec::with_capacity(n);
        while samples.len() < n {
            let id = format!("{split}_{:04}", samples.len());
            if let Some(parts) = draw_sample(config, &mut rng) {
                samples.push(parts.into_sample(id));
            }
        }
        samples
    };
    Ok(Dataset {
        config: config.clone(),
        train: make("train", config.n_train),
        val: make("val", config.n_val),
        test: make("test", config.n_test),
    })
}

/// A drawn sample with its construction details kept visible for tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SampleParts {
    pub size: usize,
    pub image: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
    pub core: Vec<bool>,
    pub annex: Vec<bool>,
    pub annotated: Vec<bool>,
    pub annex_included: Vec<bool>,
}

impl SampleParts {
    fn into_sample(self, id: String) -> MultiRaterSample {
        MultiRaterSample {
            id,
            size: self.size,
            image: self.image,
            masks: self.masks,
        }
    }
}

/// One rejection-sampling attempt: `None` when the image has no object or no
/// rater annotated anything.
pub(crate) fn draw_sample<R: Rng>(config: &SyntheticConfig, rng: &mut R) -> Option<SampleParts> {
    let size = config.size;
    if rng.random::<f64>() >= config.presence_prob {
        return None;
    }
    // placement always succeeds: validate() guarantees the reach fits
    let reach = config.core_radius.1 + config.annex_radius.1;
    let lo = reach;
    let hi = size as f64 - reach;
    let cx = lo + rng.random::<f64>() * (hi - lo);
    let cy = lo + rng.random::<f64>() * (hi - lo);
    let core_r = sample_range(rng, config.core_radius);
    let annex_r = sample_range(rng, config.annex_radius);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let ax = cx + core_r * angle.cos();
    let ay = cy + core_r * angle.sin();

    let core = disk_mask(size, cx, cy, core_r);
    let annex = disk_mask(size, ax, ay, annex_r);

    let mut masks = Vec::with_capacity(config.raters);
    let mut annotated = Vec::with_capacity(config.raters);
    let mut annex_included = Vec::with_capacity(config.raters);
    for _ in 0..config.raters {
        // both coins are always drawn to keep the stream layout fixed
        let annotates = rng.random::<f64>() < config.inclusion_prob;
        let with_annex = rng.random::<f64>() < config.inclusion_prob;
        annotated.push(annotates);
        annex_included.push(annotates && with_annex);
        let mask = if annotates {
            core.iter()
                .zip(&annex)
                .map(|(&c, &a)| c || (with_annex && a))
                .collect()
        } else {
            vec![false; size * size]
        };
        masks.push(mask);
    }
    if !annotated.iter().any(|&a| a) {
        return None;
    }

    // image shows the full object regardless of what raters marked
    let indicator: Vec<f64> = core
        .iter()
        .zip(&annex)
        .map(|(&c, &a)| if c || a { 1.0 } else { 0.0 })
        .collect();
    let blurred = box_blur(&box_blur(&indicator, size), size);
    let image: Vec<f64> = blurred
        .iter()
        .map(|&v| {
            let noisy = 0.2 + 0.6 * v + config.noise * rng::standard_normal(rng);
            quantize(noisy.clamp(0.0, 1.0))
        })
        .collect();

    Some(SampleParts {
        size,
        image,
        masks,
        core,
        annex,
        annotated,
        annex_included,
    })
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn disk_mask(size: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            mask[i * size + j] = dx * dx + dy * dy <= r * r;
        }
    }
    mask
}

/// 3x3 box blur with edge replication.
fn box_blur(values: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    for i in 0..size {
        for j in 0..size {
            let mut sum = 0.0;
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    sum += values[clamp(i as isize + di) * size + clamp(j as isize + dj)];
                }
            }
            out[i * size + j] = sum / 9.0;
        }
    }
    out
}

/// Snaps to the 16-bit storage grid so save/load round-trips exactly.
fn quantize(v: f64) -> f64 {
    (v * 65535.0).round() / 65535.0
}

// ----- augmentation -----

/// A spatial + photometric transform applied identically to an image and all
/// of its masks (spatial part only for masks).
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    /// Quarter-turns counterclockwise, 0..=3.
    pub rot_quarter: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Added to every pixel after contrast.
    pub brightness: f64,
    /// Multiplies the deviation from mid-gray.
    pub contrast: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            rot_quarter: 0,
            flip_h: false,
            flip_v: false,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Augmentation {
            rot_quarter: (rng.random::<u32>() % 4) as u8,
            flip_h: rng.random::<f64>() < 0.5,
            flip_v: rng.random::<f64>() < 0.5,
            brightness: (rng.random::<f64>() - 0.5) * 0.2,
            contrast: 0.9 + rng.random::<f64>() * 0.2,
        }
    }

    pub fn apply(&self, sample: &MultiRaterSample) -> MultiRaterSample {
        let size = sample.size;
        let spatial = |flat: usize| -> usize {
            let (mut i, mut j) = (flat / size, flat % size);
            for _ in 0..self.rot_quarter {
                // counterclockwise quarter turn: (i, j) <- (j, size-1-i)
                let (ni, nj) = (size - 1 - j, i);
                i = ni;
                j = nj;
            }
            if self.flip_h {
                j = size - 1 - j;
            }
            if self.flip_v {
                i = size - 1 - i;
            }
            i * size + j
        };
        // v*c + offset == (v - 0.5)*c + 0.5 + brightness, but stays bit-exact
        // when c = 1 and brightness = 0
        let offset = self.brightness + 0.5 * (1.0 - self.contrast);
        let mut image = vec![0.0; sample.image.len()];
        for (src, &v) in sample.image.iter().enumerate() {
            image[spatial(src)] = (v * self.contrast + offset).clamp(0.0, 1.0);
        }
        let masks = sample
            .masks
            .iter()
            .map(|m| {
                let mut out = vec![false; m.len()];
                for (src, &b) in m.iter().enumerate() {
                    out[spatial(src)] = b;
                }
                out
            })
            .collect();
        MultiRaterSample {
            id: sample.id.clone(),
            size,
            image,
            masks,
        }
    }
}

pub fn augment<R: Rng>(sample: &MultiRaterSample, rng: &mut R) -> MultiRaterSample {
    Augmentation::sample(rng).apply(sample)
}

// ----- normalization -----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Pixel mean and standard deviation over a sample set (the training split).
pub fn compute_norm_stats(samples: &[MultiRaterSample]) -> Result<NormStats> {
    let n: usize = samples.iter().map(|s| s.image.len()).sum();
    if n == 0 {
        return Err(Error::data("cannot compute statistics of an empty corpus".to_string()));
    }
    let mean = samples
        .iter()
        .flat_map(|s| s.image.iter())
        .sum::<f64>()
        / n as f64;
    let var = samples
        .iter()
        .flat_map(|s| s.image.iter())
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(Error::data(
            "corpus is constant; cannot normalize with zero standard deviation".to_string(),
        ));
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(image: &[f64], stats: &NormStats) -> Vec<f64> {
    image.iter().map(|&v| (v - stats.mean) / stats.std).collect()
}

// ----- persistence -----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SyntheticConfig,
    pub splits: SplitLists,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                    self.version
                ),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if !seen.insert(id) {
                return Err(Error::format(
                    path,
                    format!("sample {id} appears in more than one split"),
                ));
            }
        }
        Ok(())
    }
}

/// Writes `manifest.toml`, `images/<id>.pgm`, and `masks/rater_<k>/<id>.pgm`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for k in 0..dataset.config.raters {
        let d = dir.join(format!("masks/rater_{k}"));
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for sample in dataset
        .train
        .iter()
        .chain(&dataset.val)
        .chain(&dataset.test)
    {
        let img_path = images.join(format!("{}.pgm", sample.id));
        pgm::write_image(&img_path, sample.size, sample.size, &sample.image)?;
        for (k, mask) in sample.masks.iter().enumerate() {
            let mask_path = dir.join(format!("masks/rater_{k}/{}.pgm", sample.id));
            pgm::write_mask(&mask_path, sample.size, sample.size, mask)?;
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: dataset.config.clone(),
        splits: SplitLists {
            train: dataset.train.iter().map(|s| s.id.clone()).collect(),
            val: dataset.val.iter().map(|s| s.id.clone()).collect(),
            test: dataset.test.iter().map(|s| s.id.clone()).collect(),
        },
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&manifest_path, format!("manifest does not serialize: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("bad manifest: {e}")))?;
    manifest.validate(&manifest_path)?;
    let load_split = |ids: &[String]| -> Result<Vec<MultiRaterSample>> {
        ids.iter().map(|id| load_sample(dir, id, &manifest.config)).collect()
    };
    Ok(Dataset {
        train: load_split(&manifest.splits.train)?,
        val: load_split(&manifest.splits.val)?,
        test: load_split(&manifest.splits.test)?,
        config: manifest.config,
    })
}

fn load_sample(dir: &Path, id: &str, config: &SyntheticConfig) -> Result<MultiRaterSample> {
    let img_path = dir.join(format!("images/{id}.pgm"));
    let (w, h, image) = pgm::read_image(&img_path)?;
    if w != config.size || h != config.size {
        return Err(Error::format(
            &img_path,
            format!("expected {0}x{0} image, found {w}x{h}", config.size),
        ));
    }
    let mut masks = Vec::with_capacity(config.raters);
    for k in 0..config.raters {
        let mask_path = dir.join(format!("masks/rater_{k}/{id}.pgm"));
        let (mw, mh, mask) = pgm::read_mask(&mask_path)?;
        if mw != w || mh != h {
            return Err(Error::format(
                &mask_path,
                format!("mask is {mw}x{mh} but image is {w}x{h}"),
            ));
        }
        masks.push(mask);
    }
    Ok(MultiRaterSample {
        id: id.to_string(),
        size: config.size,
        image,
        masks,
    })
}
