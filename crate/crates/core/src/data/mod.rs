//! Synthetic small-lesion images and on-disk image/mask pairs.
//!
//! A directory dataset is flat: `<id>.pgm` holds the grayscale image and
//! `<id>_mask.pgm` the binary mask stored as bytes 0/255.

pub mod pgm;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use pgm::{read_pgm, write_pgm};

pub const BACKGROUND_LEVEL: f64 = 0.2;
pub const LESION_LEVEL: f64 = 0.8;
pub const OCCLUDER_CONTRAST: f64 = 0.15;
const OCCLUDER_CAP: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `1×H×W`, values exactly 0 or 1.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub lesion_radius_range: [f64; 2],
    pub lesion_count_range: [usize; 2],
    pub noise_sigma: f64,
    pub occluder_count: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            size,
            lesion_radius_range: [2.0, (size as f64 / 4.0 - 1.0).min(6.0)],
            lesion_count_range: [1, 2],
            noise_sigma: 0.05,
            occluder_count: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [r_min, r_max] = self.lesion_radius_range;
        let [n_min, n_max] = self.lesion_count_range;
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.size < 16 {
            return bad(format!("size {} is below 16", self.size));
        }
        if !(r_min > 0.0 && r_min <= r_max) {
            return bad(format!("lesion radius range [{r_min}, {r_max}] is empty"));
        }
        if r_max >= self.size as f64 / 4.0 {
            return bad(format!("r_max {r_max} must be below size/4"));
        }
        if n_min < 1 || n_min > n_max {
            return bad(format!("lesion count range [{n_min}, {n_max}] is invalid"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be nonnegative", self.noise_sigma));
        }
        Ok(())
    }

    /// Upper bound on the mask's area fraction.
    pub fn area_fraction_bound(&self) -> f64 {
        let r = self.lesion_radius_range[1];
        PI * r * r * self.lesion_count_range[1] as f64 / (self.size * self.size) as f64
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn pixel_count(&self, size: usize) -> usize {
        (0..size)
            .flat_map(|y| (0..size).map(move |x| (y, x)))
            .filter(|&(y, x)| self.contains(y, x))
            .count()
    }
}

fn sample_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let mut image = vec![BACKGROUND_LEVEL; n * n];
    let mut occ = vec![0.0f64; n * n];
    for _ in 0..cfg.occluder_count {
        let anti = rng.random_bool(0.5);
        let offset = rng.random_range(0.0..(2 * n) as f64) - if anti { 0.0 } else { n as f64 };
        let half_width = rng.random_range(1.0..2.5);
        for y in 0..n {
            for x in 0..n {
                let t = if anti { (x + y) as f64 } else { x as f64 - y as f64 };
                if (t - offset).abs() < half_width {
                    occ[y * n + x] = (occ[y * n + x] + OCCLUDER_CONTRAST).min(OCCLUDER_CAP);
                }
            }
        }
    }
    image.iter_mut().zip(&occ).for_each(|(v, o)| *v += o);

    let [r_min, r_max] = cfg.lesion_radius_range;
    let [n_min, n_max] = cfg.lesion_count_range;
    let per_lesion_cap = (PI * r_max * r_max).floor() as usize;
    let mut mask = vec![0.0; n * n];
    let lesions = rng.random_range(n_min..=n_max);
    for _ in 0..lesions {
        let mut e = Ellipse {
            cy: rng.random_range(r_max..=n as f64 - 1.0 - r_max),
            cx: rng.random_range(r_max..=n as f64 - 1.0 - r_max),
            a: rng.random_range(r_min..=r_max),
            b: rng.random_range(r_min..=r_max),
            theta: rng.random_range(0.0..PI),
        };
        // lattice counts can exceed the continuous area; shrink until within
        while e.pixel_count(n) > per_lesion_cap {
            e.a *= 0.95;
            e.b *= 0.95;
        }
        for y in 0..n {
            for x in 0..n {
                if e.contains(y, x) {
                    mask[y * n + x] = 1.0;
                    image[y * n + x] = LESION_LEVEL;
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Sample {
        id: format!("synth_{index:04}"),
        image: Tensor::new(vec![1, n, n], image)?,
        mask: Tensor::new(vec![1, n, n], mask)?,
    })
}

/// Deterministic under `config.seed`; sample `i` draws from its own stream.
pub fn generate(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.count).map(|i| sample_one(config, i)).collect()
}

/// Writes `<id>.pgm` and `<id>_mask.pgm` per sample.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_pgm(&s.image, &dir.join(format!("{}.pgm", s.id)))?;
        write_pgm(&s.mask, &dir.join(format!("{}_mask.pgm", s.id)))?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<Tensor> {
    let (w, h, payload) = pgm::read_raw(path)?;
    let data = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            255 => Ok(1.0),
            value => Err(Error::NonBinaryMask {
                path: path.to_path_buf(),
                value,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![1, h, w], data)
}

/// Loads every image/mask pair in `dir`, ordered by id. Non-PGM files are
/// ignored.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix("_mask.pgm") {
            masks.insert(id.to_string(), path.clone());
        } else if let Some(id) = name.strip_suffix(".pgm") {
            images.insert(id.to_string(), path.clone());
        }
    }
    if let Some((_, p)) = masks.iter().find(|(id, _)| !images.contains_key(*id)) {
        return Err(Error::Orphan(p.clone()));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, img_path) in images {
        let mask_path = masks.remove(&id).ok_or_else(|| Error::Orphan(img_path.clone()))?;
        let image = read_pgm(&img_path)?;
        let mask = read_mask(&mask_path)?;
        if image.shape() != mask.shape() {
            return Err(Error::Malformed {
                path: mask_path,
                reason: format!("mask shape {:?} differs from image {:?}", mask.dims(), image.dims()),
            });
        }
        samples.push(Sample { id, image, mask });
    }
    Ok(samples)
}

/// Seeded shuffle, then the first `round(n · train_fraction)` samples train.
pub fn split(samples: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (samples.len() as f64 * train_fraction).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}
