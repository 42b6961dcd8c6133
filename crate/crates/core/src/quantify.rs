//! Detection from the infection mask and infection-percentage
//! quantification, overall and per lung; the two-model pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::GrayImage;
use crate::mask::{BinaryMask, ProbMap};
use crate::maskops::{connected_components, postprocess_infection_with, postprocess_lung_with, PostprocessConfig};
use crate::models::SegModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detection {
    Positive,
    Negative,
}

/// Positive iff at least one infection pixel is set.
pub fn detect(infection: &BinaryMask) -> Detection {
    if infection.data().contains(&1) {
        Detection::Positive
    } else {
        Detection::Negative
    }
}

/// `100 · |infection| / |lung|`.
pub fn infection_percentage(infection: &BinaryMask, lung: &BinaryMask) -> Result<f64> {
    if infection.dims() != lung.dims() {
        return Err(Error::dim("infection_percentage", format!("{:?} vs {:?}", infection.dims(), lung.dims())));
    }
    let lung_px = lung.count();
    if lung_px == 0 {
        return Err(Error::NoLung);
    }
    if !infection.is_subset_of(lung) {
        return Err(Error::Usage("infection mask extends outside the lung".into()));
    }
    Ok(100.0 * infection.count() as f64 / lung_px as f64)
}

/// Image-left / image-right halves of a lung mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LungSides {
    pub left: BinaryMask,
    pub right: BinaryMask,
}

/// Splits a lung mask into image-left and image-right sides.
///
/// With two or more regions the two largest are ordered by centroid column
/// and every other region joins the side whose main-region centroid is
/// nearer. A single region is cut at the vertical midline of its bounding box.
pub fn split_lungs(lung: &BinaryMask) -> Result<LungSides> {
    let labeled = connected_components(lung);
    let (h, w) = lung.dims();
    let mut left = BinaryMask::zeros(h, w);
    let mut right = BinaryMask::zeros(h, w);
    match labeled.regions.len() {
        0 => return Err(Error::NoLung),
        1 => {
            let (_, c0, _, c1) = labeled.regions[0].bbox;
            let cut = c0 + (c1 - c0).div_ceil(2);
            for r in 0..h {
                for c in 0..w {
                    if lung.get(r, c) {
                        if c < cut {
                            left.set(r, c, true);
                        } else {
                            right.set(r, c, true);
                        }
                    }
                }
            }
        }
        _ => {
            let mut by_size: Vec<&_> = labeled.regions.iter().collect();
            by_size.sort_by(|a, b| b.pixel_count.cmp(&a.pixel_count).then(a.id.cmp(&b.id)));
            let (a, b) = (by_size[0], by_size[1]);
            let (lobe_l, lobe_r) = if a.centroid.1 <= b.centroid.1 { (a, b) } else { (b, a) };
            let dist = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            let mut goes_left = vec![false; labeled.regions.len() + 1];
            for reg in &labeled.regions {
                goes_left[reg.id as usize] = if reg.id == lobe_l.id {
                    true
                } else if reg.id == lobe_r.id {
                    false
                } else {
                    dist(reg.centroid, lobe_l.centroid) <= dist(reg.centroid, lobe_r.centroid)
                };
            }
            for r in 0..h {
                for c in 0..w {
                    let l = labeled.labels[r * w + c];
                    if l != 0 {
                        if goes_left[l as usize] {
                            left.set(r, c, true);
                        } else {
                            right.set(r, c, true);
                        }
                    }
                }
            }
        }
    }
    Ok(LungSides { left, right })
}

/// Per-side infection shares. A side without lung pixels reports 0 and
/// raises its `absent` flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidePercentages {
    pub left_pct: f64,
    pub right_pct: f64,
    pub left_absent: bool,
    pub right_absent: bool,
    pub left_lung_pixels: usize,
    pub right_lung_pixels: usize,
    pub left_infection_pixels: usize,
    pub right_infection_pixels: usize,
}

pub fn per_lung_percentages(infection: &BinaryMask, lung: &BinaryMask) -> Result<SidePercentages> {
    if !infection.is_subset_of(lung) {
        return Err(Error::Usage("infection mask extends outside the lung".into()));
    }
    let sides = split_lungs(lung)?;
    let side = |part: &BinaryMask| -> Result<(f64, bool, usize, usize)> {
        let inf = crate::maskops::intersect_masks(infection, part)?;
        if part.count() == 0 {
            return Ok((0.0, true, 0, inf.count()));
        }
        Ok((infection_percentage(&inf, part)?, false, part.count(), inf.count()))
    };
    let (left_pct, left_absent, left_lung_pixels, left_infection_pixels) = side(&sides.left)?;
    let (right_pct, right_absent, right_lung_pixels, right_infection_pixels) = side(&sides.right)?;
    Ok(SidePercentages {
        left_pct,
        right_pct,
        left_absent,
        right_absent,
        left_lung_pixels,
        right_lung_pixels,
        left_infection_pixels,
        right_infection_pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// Both networks see the raw image.
    #[default]
    Parallel,
    /// The infection network sees the image with non-lung pixels zeroed.
    Cascaded,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(PipelineMode::Parallel),
            "cascaded" => Ok(PipelineMode::Cascaded),
            other => Err(Error::Config(format!("unknown pipeline mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NoLungDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub case_id: String,
    pub status: ReportStatus,
    pub detection: Detection,
    pub overall_pct: f64,
    /// Image-left side.
    pub left_pct: f64,
    /// Image-right side.
    pub right_pct: f64,
    pub left_absent: bool,
    pub right_absent: bool,
    pub lung_pixels: usize,
    pub infection_pixels: usize,
    pub left_lung_pixels: usize,
    pub right_lung_pixels: usize,
    pub left_infection_pixels: usize,
    pub right_infection_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PipelineMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Report from already post-processed masks.
pub fn quantify_masks(case_id: &str, lung: &BinaryMask, infection: &BinaryMask) -> Result<QuantReport> {
    let detection = detect(infection);
    let mut report = QuantReport {
        case_id: case_id.to_string(),
        status: ReportStatus::Ok,
        detection,
        overall_pct: 0.0,
        left_pct: 0.0,
        right_pct: 0.0,
        left_absent: true,
        right_absent: true,
        lung_pixels: lung.count(),
        infection_pixels: infection.count(),
        left_lung_pixels: 0,
        right_lung_pixels: 0,
        left_infection_pixels: 0,
        right_infection_pixels: 0,
        mode: None,
        timestamp: None,
    };
    match infection_percentage(infection, lung) {
        Err(Error::NoLung) => {
            report.status = ReportStatus::NoLungDetected;
            return Ok(report);
        }
        Err(e) => return Err(e),
        Ok(pct) => report.overall_pct = pct,
    }
    let sides = per_lung_percentages(infection, lung)?;
    report.left_pct = sides.left_pct;
    report.right_pct = sides.right_pct;
    report.left_absent = sides.left_absent;
    report.right_absent = sides.right_absent;
    report.left_lung_pixels = sides.left_lung_pixels;
    report.right_lung_pixels = sides.right_lung_pixels;
    report.left_infection_pixels = sides.left_infection_pixels;
    report.right_infection_pixels = sides.right_infection_pixels;
    Ok(report)
}

/// Masks and report produced by one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub lung_mask: BinaryMask,
    pub infection_mask: BinaryMask,
    pub report: QuantReport,
}

fn predict<T: Scalar>(model: &SegModel<T>, image: &GrayImage) -> Result<ProbMap<T>> {
    let probs = model.forward(&image.to_tensor())?;
    ProbMap::from_batch(&probs, 0)
}

/// Lung and infection segmentation, post-processing, detection and
/// quantification for one image.
pub fn run_pipeline<T: Scalar>(
    case_id: &str,
    image: &GrayImage,
    lung_model: &SegModel<T>,
    inf_model: &SegModel<T>,
    mode: PipelineMode,
    cfg: &PostprocessConfig,
) -> Result<PipelineOutput> {
    let lung_probs = predict(lung_model, image)?;
    let lung = postprocess_lung_with(&lung_probs, cfg)?;
    let inf_input = match mode {
        PipelineMode::Parallel => image.clone(),
        PipelineMode::Cascaded => image.masked(&lung)?,
    };
    let inf_probs = predict(inf_model, &inf_input)?;
    let infection = postprocess_infection_with(&inf_probs, &lung, cfg)?;
    let mut report = quantify_masks(case_id, &lung, &infection)?;
    report.mode = Some(mode);
    Ok(PipelineOutput { lung_mask: lung, infection_mask: infection, report })
}
