//! Binary-mask post-processing: thresholding, connected components, hole
//! filling, small-region removal and intersection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMap};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMALL_REGION_FRACTION: f64 = 0.05;

/// One 8-connected foreground region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub pixel_count: usize,
    /// Inclusive `(min_row, min_col, max_row, max_col)`.
    pub bbox: (usize, usize, usize, usize),
    /// `(row, col)` mean of member pixels.
    pub centroid: (f64, f64),
}

/// Per-pixel region ids (0 = background) plus a region table. Ids are
/// contiguous from 1 in order of each region's first pixel in row-major scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegions {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl LabeledRegions {
    pub fn region_mask(&self, id: u32) -> BinaryMask {
        BinaryMask::new(self.height, self.width, self.labels.iter().map(|&l| (l == id) as u8).collect())
            .expect("labels sized to the mask")
    }
}

/// Foreground iff the foreground-channel probability strictly exceeds `t`.
pub fn threshold<T: Scalar>(probs: &ProbMap<T>, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold {t} outside [0,1]")));
    }
    let t = T::from_f64_lossy(t);
    let (h, w) = probs.dims();
    BinaryMask::new(h, w, probs.foreground().iter().map(|&p| (p > t) as u8).collect())
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let up = parent[parent[x as usize] as usize];
        parent[x as usize] = up;
        x = up;
    }
    x
}

/// Two-pass 8-connected labeling with union-find.
pub fn connected_components(mask: &BinaryMask) -> LabeledRegions {
    let (h, w) = mask.dims();
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];

    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            if c > 0 {
                neighbours[k] = provisional[r * w + c - 1];
                k += 1;
            }
            if r > 0 {
                for dc in [-1isize, 0, 1] {
                    let cc = c as isize + dc;
                    if cc >= 0 && (cc as usize) < w {
                        neighbours[k] = provisional[(r - 1) * w + cc as usize];
                        k += 1;
                    }
                }
            }
            let labelled: Vec<u32> = neighbours[..k].iter().copied().filter(|&l| l != 0).collect();
            let label = match labelled.iter().map(|&l| find(&mut parent, l)).min() {
                Some(root) => {
                    for &l in &labelled {
                        let other = find(&mut parent, l);
                        if other != root {
                            let (lo, hi) = (root.min(other), root.max(other));
                            parent[hi as usize] = lo;
                        }
                    }
                    root
                }
                None => {
                    let fresh = parent.len() as u32;
                    parent.push(fresh);
                    fresh
                }
            };
            provisional[r * w + c] = label;
        }
    }

    // Final ids follow first appearance of each root in scan order.
    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; h * w];
    let mut regions: Vec<Region> = Vec::new();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = provisional[r * w + c];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if remap[root] == 0 {
                regions.push(Region { id: regions.len() as u32 + 1, pixel_count: 0, bbox: (r, c, r, c), centroid: (0.0, 0.0) });
                sums.push((0.0, 0.0));
                remap[root] = regions.len() as u32;
            }
            let id = remap[root];
            labels[r * w + c] = id;
            let reg = &mut regions[id as usize - 1];
            reg.pixel_count += 1;
            reg.bbox = (reg.bbox.0.min(r), reg.bbox.1.min(c), reg.bbox.2.max(r), reg.bbox.3.max(c));
            let s = &mut sums[id as usize - 1];
            s.0 += r as f64;
            s.1 += c as f64;
        }
    }
    for (reg, (sr, sc)) in regions.iter_mut().zip(sums) {
        reg.centroid = (sr / reg.pixel_count as f64, sc / reg.pixel_count as f64);
    }
    LabeledRegions { height: h, width: w, labels, regions }
}

/// Sets every background pixel that is not 4-connected to the image border
/// to foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    if h == 0 || w == 0 {
        return mask.clone();
    }
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed = |r: usize, c: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        if !mask.get(r, c) && !outside[r * w + c] {
            outside[r * w + c] = true;
            queue.push_back((r, c));
        }
    };
    for c in 0..w {
        seed(0, c, &mut outside, &mut queue);
        seed(h - 1, c, &mut outside, &mut queue);
    }
    for r in 0..h {
        seed(r, 0, &mut outside, &mut queue);
        seed(r, w - 1, &mut outside, &mut queue);
    }
    while let Some((r, c)) = queue.pop_front() {
        if r > 0 {
            seed(r - 1, c, &mut outside, &mut queue);
        }
        if r + 1 < h {
            seed(r + 1, c, &mut outside, &mut queue);
        }
        if c > 0 {
            seed(r, c - 1, &mut outside, &mut queue);
        }
        if c + 1 < w {
            seed(r, c + 1, &mut outside, &mut queue);
        }
    }
    BinaryMask::new(h, w, outside.iter().map(|&o| (!o) as u8).collect()).expect("same dims")
}

/// Erases every 8-connected region whose size is strictly below
/// `fraction` of the input's total foreground. The cutoff is computed once.
pub fn remove_small_regions(mask: &BinaryMask, fraction: f64) -> Result<BinaryMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("small-region fraction {fraction} outside (0,1)")));
    }
    let labeled = connected_components(mask);
    let total: usize = labeled.regions.iter().map(|r| r.pixel_count).sum();
    let cutoff = fraction * total as f64;
    let keep: Vec<bool> = std::iter::once(false)
        .chain(labeled.regions.iter().map(|r| (r.pixel_count as f64) >= cutoff))
        .collect();
    let (h, w) = mask.dims();
    BinaryMask::new(h, w, labeled.labels.iter().map(|&l| keep[l as usize] as u8).collect())
}

/// Pixelwise AND.
pub fn intersect_masks(infection: &BinaryMask, lung: &BinaryMask) -> Result<BinaryMask> {
    infection.zip_with("intersect_masks", lung, |a, b| a & b)
}

/// Knobs for the two post-processing chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub threshold: f64,
    pub small_region_fraction: f64,
    /// Also apply hole filling and small-region removal to infection masks.
    pub clean_infection: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, small_region_fraction: DEFAULT_SMALL_REGION_FRACTION, clean_infection: false }
    }
}

/// `remove_small_regions(fill_holes(threshold(probs)))`.
pub fn postprocess_lung<T: Scalar>(probs: &ProbMap<T>) -> Result<BinaryMask> {
    postprocess_lung_with(probs, &PostprocessConfig::default())
}

pub fn postprocess_lung_with<T: Scalar>(probs: &ProbMap<T>, cfg: &PostprocessConfig) -> Result<BinaryMask> {
    clean_mask(&threshold(probs, cfg.threshold)?, cfg)
}

pub fn clean_mask(mask: &BinaryMask, cfg: &PostprocessConfig) -> Result<BinaryMask> {
    remove_small_regions(&fill_holes(mask), cfg.small_region_fraction)
}

/// Thresholds infection probabilities and ANDs with the post-processed lung.
pub fn postprocess_infection<T: Scalar>(probs: &ProbMap<T>, lung: &BinaryMask) -> Result<BinaryMask> {
    postprocess_infection_with(probs, lung, &PostprocessConfig::default())
}

pub fn postprocess_infection_with<T: Scalar>(
    probs: &ProbMap<T>,
    lung: &BinaryMask,
    cfg: &PostprocessConfig,
) -> Result<BinaryMask> {
    let mut raw = threshold(probs, cfg.threshold)?;
    if cfg.clean_infection {
        raw = clean_mask(&raw, cfg)?;
    }
    intersect_masks(&raw, lung)
}
