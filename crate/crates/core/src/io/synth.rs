//! Desk-scale synthetic radiographs: two dark elliptical lobes on a noisy
//! body background, with bright infection blobs for the covid class.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{write_image, write_manifest, write_mask, Class, DatasetRecord, GrayImage};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::stream;

const BODY: f64 = 165.0;
const LUNG_DEPTH: f64 = 105.0;
const INFECTION_GAIN: f64 = 125.0;
const NOISE_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub class: Class,
    pub image: GrayImage,
    pub lung: BinaryMask,
    pub infection: BinaryMask,
}

impl SynthSample {
    /// Ground-truth infected share of the lung, in percent.
    pub fn infection_pct(&self) -> f64 {
        100.0 * self.infection.count() as f64 / self.lung.count().max(1) as f64
    }
}

struct Lobe {
    cy: f64,
    cx: f64,
    /// Vertical semi-axis.
    b: f64,
    /// Horizontal semi-axis.
    a: f64,
}

impl Lobe {
    fn radius(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.b).powi(2) + ((x - self.cx) / self.a).powi(2)).sqrt()
    }

    /// Anti-aliased coverage; crosses 0.5 at the mask boundary.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        (0.5 + (1.0 - self.radius(y, x)) * self.a.min(self.b)).clamp(0.0, 1.0)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.radius(y, x) <= 1.0
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
}

impl Blob {
    fn dist(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt()
    }
}

/// Draws one sample of `class` at `size`×`size` from `rng`.
pub fn synth_sample<R: Rng + ?Sized>(class: Class, size: usize, rng: &mut R) -> SynthSample {
    let s = size as f64;
    let lobes: Vec<Lobe> = [0.30, 0.70]
        .iter()
        .map(|&fx| Lobe {
            cx: s * (fx + rng.random_range(-0.03..0.03)),
            cy: s * (0.5 + rng.random_range(-0.04..0.04)),
            a: s * rng.random_range(0.11..0.15),
            b: s * rng.random_range(0.25..0.32),
        })
        .collect();

    let mut blobs = Vec::new();
    if class == Class::Covid {
        let count = rng.random_range(1..=3);
        while blobs.len() < count {
            let lobe = &lobes[rng.random_range(0..2)];
            let mut r = (s * rng.random_range(0.05..0.085)).max(2.0);
            let mut placed = None;
            for attempt in 0..200 {
                if attempt > 0 && attempt % 50 == 0 {
                    r = (r * 0.8).max(1.5);
                }
                let cy = lobe.cy + lobe.b * rng.random_range(-1.0..1.0);
                let cx = lobe.cx + lobe.a * rng.random_range(-1.0..1.0);
                let margin = r + 1.5;
                let inside = (0..16).all(|k| {
                    let t = k as f64 * std::f64::consts::TAU / 16.0;
                    lobe.contains(cy + margin * t.sin(), cx + margin * t.cos())
                });
                if inside {
                    placed = Some(Blob { cy, cx, r });
                    break;
                }
            }
            match placed {
                Some(b) => blobs.push(b),
                None => break,
            }
        }
    }

    let phase: (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let mut pixels = Vec::with_capacity(size * size);
    let mut lung = BinaryMask::zeros(size, size);
    let mut infection = BinaryMask::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut v = BODY + 12.0 * (y / s - 0.5);
            let cover = lobes.iter().map(|l| l.coverage(y, x)).fold(0.0, f64::max);
            v -= LUNG_DEPTH * cover;
            if lobes.iter().any(|l| l.contains(y, x)) {
                lung.set(r, c, true);
            }
            if class == Class::NonCovid && cover > 0.0 {
                let tex = (std::f64::consts::TAU * x / (s / 8.0) + phase.0).sin()
                    * (std::f64::consts::TAU * y / (s / 6.0) + phase.1).sin();
                v += 16.0 * cover * tex;
            }
            let blob_cover = blobs.iter().map(|b| (b.r + 0.5 - b.dist(y, x)).clamp(0.0, 1.0)).fold(0.0, f64::max);
            v += INFECTION_GAIN * blob_cover;
            if blobs.iter().any(|b| b.dist(y, x) <= b.r) {
                infection.set(r, c, true);
            }
            v += noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    // Blob rims can graze the lobe edge after rasterization.
    let infection = crate::maskops::intersect_masks(&infection, &lung).expect("same dims");
    SynthSample { class, image: GrayImage::new(size, size, pixels).expect("size > 0"), lung, infection }
}

fn class_index(c: Class) -> u64 {
    Class::ALL.iter().position(|&k| k == c).expect("listed") as u64
}

/// Writes `n_per_class` samples per class under `out_dir` (images/, lung/,
/// infection/ and manifest.jsonl) and returns the manifest records with
/// paths relative to `out_dir`.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    if size < 8 || !size.is_multiple_of(4) {
        return Err(Error::Config(format!("synthetic size {size} must be a multiple of 4 and at least 8")));
    }
    let out = out_dir.as_ref();
    for sub in ["images", "lung", "infection"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(3 * n_per_class);
    for class in Class::ALL {
        for i in 0..n_per_class {
            let mut rng = stream(seed, &[class_index(class), i as u64]);
            let sample = synth_sample(class, size, &mut rng);
            let id = format!("{}_{i:05}", class.as_str());
            let rel_img = format!("images/{id}.pgm");
            let rel_lung = format!("lung/{id}.pgm");
            let rel_inf = format!("infection/{id}.pgm");
            write_image(out.join(&rel_img), &sample.image)?;
            write_mask(out.join(&rel_lung), &sample.lung)?;
            write_mask(out.join(&rel_inf), &sample.infection)?;
            let mut rec = DatasetRecord::new(id, rel_img, class);
            rec.lung_mask = Some(rel_lung.into());
            rec.infection_mask = Some(rel_inf.into());
            records.push(rec);
        }
    }
    write_manifest(out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// In-memory counterpart of [`synth_generate`] with identical sample streams.
pub fn synth_dataset(n_per_class: usize, size: usize, seed: u64) -> Vec<(String, SynthSample)> {
    let mut out = Vec::with_capacity(3 * n_per_class);
    for class in Class::ALL {
        for i in 0..n_per_class {
            let mut rng = stream(seed, &[class_index(class), i as u64]);
            out.push((format!("{}_{i:05}", class.as_str()), synth_sample(class, size, &mut rng)));
        }
    }
    out
}
