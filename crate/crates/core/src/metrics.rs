//! Confusion counting, segmentation/detection metrics and their 95%
//! confidence radii.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

/// Counts over two aligned label sequences; any nonzero value is positive.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::dim("confusion", format!("{} predictions vs {} labels", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::dim("confusion", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    confusion(pred.data(), gt.data())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub iou: f64,
    pub dsc: f64,
}

/// Pixel accuracy, IoU and DSC. IoU and DSC are 1 when prediction and
/// ground truth are both empty.
pub fn seg_metrics(c: &ConfusionCounts) -> Result<SegMetrics> {
    let all = c.total();
    if all == 0 {
        return Err(Error::Usage("segmentation metrics over an empty population".into()));
    }
    let union = c.tp + c.fp + c.fn_;
    let (iou, dsc) = if union == 0 {
        (1.0, 1.0)
    } else {
        (c.tp as f64 / union as f64, 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
    };
    Ok(SegMetrics { accuracy: (c.tp + c.tn) as f64 / all as f64, iou, dsc })
}

/// Detection metrics; `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn det_metrics(c: &ConfusionCounts) -> DetMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    DetMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        sensitivity,
        f1,
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Population size and z-score for a confidence radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CIParams {
    pub n: u64,
    pub z: f64,
}

impl CIParams {
    pub const Z95: f64 = 1.96;

    pub fn new(n: u64) -> Result<Self> {
        Self::with_z(n, Self::Z95)
    }

    pub fn with_z(n: u64, z: f64) -> Result<Self> {
        if n == 0 || z.is_nan() || z <= 0.0 {
            return Err(Error::Config(format!("invalid CI parameters n={n}, z={z}")));
        }
        Ok(Self { n, z })
    }
}

/// `r = z * sqrt(metric * (1 - metric) / n)`.
pub fn confidence_radius(metric: f64, p: &CIParams) -> f64 {
    p.z * (metric * (1.0 - metric) / p.n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LungSegmentation,
    InfectionSegmentation,
    Detection,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::LungSegmentation => "Lung Segmentation",
            Task::InfectionSegmentation => "Infection Segmentation",
            Task::Detection => "COVID-19 Detection",
        }
    }
}

/// How pixel confusion is aggregated over images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Accumulate counts over all pixels of all samples, then compute.
    #[default]
    Micro,
    /// Compute per image, then average.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: Option<f64>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub model: String,
    pub encoder: String,
    /// Number of test samples, the CI population.
    pub n: u64,
    pub averaging: Averaging,
    pub counts: ConfusionCounts,
    pub metrics: Vec<MetricValue>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|m| m.value)
    }

    pub fn with_labels(mut self, model: impl Into<String>, encoder: impl Into<String>) -> Self {
        self.model = model.into();
        self.encoder = encoder.into();
        self
    }
}

fn metric(name: &str, value: Option<f64>, ci: &CIParams) -> MetricValue {
    MetricValue { name: name.to_string(), value, radius: value.map(|v| confidence_radius(v, ci)) }
}

fn align<'a, V>(preds: &'a [(String, V)], gts: &'a [(String, V)]) -> Result<Vec<(&'a V, &'a V)>> {
    let p: BTreeMap<&str, &V> = preds.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let g: BTreeMap<&str, &V> = gts.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let mut unmatched: Vec<String> = p.keys().filter(|k| !g.contains_key(*k)).map(|k| k.to_string()).collect();
    unmatched.extend(g.keys().filter(|k| !p.contains_key(*k)).map(|k| k.to_string()));
    if !unmatched.is_empty() || p.len() != preds.len() || g.len() != gts.len() {
        unmatched.sort();
        unmatched.dedup();
        return Err(Error::Alignment(unmatched));
    }
    Ok(p.iter().map(|(k, v)| (*v, g[k])).collect())
}

/// Pixel-level evaluation of aligned prediction/ground-truth mask sets.
pub fn evaluate_segmentation(
    preds: &[(String, BinaryMask)],
    gts: &[(String, BinaryMask)],
    task: Task,
    averaging: Averaging,
) -> Result<MetricsReport> {
    let pairs = align(preds, gts)?;
    if pairs.is_empty() {
        return Err(Error::Usage("no samples to evaluate".into()));
    }
    let per_image: Vec<ConfusionCounts> =
        pairs.iter().map(|(p, g)| confusion_masks(p, g)).collect::<Result<_>>()?;
    let counts = per_image.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
    let values = match averaging {
        Averaging::Micro => seg_metrics(&counts)?,
        Averaging::Macro => {
            let all: Vec<SegMetrics> = per_image.iter().map(seg_metrics).collect::<Result<_>>()?;
            let n = all.len() as f64;
            SegMetrics {
                accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / n,
                iou: all.iter().map(|m| m.iou).sum::<f64>() / n,
                dsc: all.iter().map(|m| m.dsc).sum::<f64>() / n,
            }
        }
    };
    let ci = CIParams::new(pairs.len() as u64)?;
    Ok(MetricsReport {
        task,
        model: String::new(),
        encoder: String::new(),
        n: pairs.len() as u64,
        averaging,
        counts,
        metrics: vec![
            metric("accuracy", Some(values.accuracy), &ci),
            metric("iou", Some(values.iou), &ci),
            metric("dsc", Some(values.dsc), &ci),
        ],
    })
}

/// Sample-level evaluation of positive/negative calls.
pub fn evaluate_detection(preds: &[(String, bool)], gts: &[(String, bool)]) -> Result<MetricsReport> {
    let pairs = align(preds, gts)?;
    if pairs.is_empty() {
        return Err(Error::Usage("no samples to evaluate".into()));
    }
    let p: Vec<u8> = pairs.iter().map(|(p, _)| **p as u8).collect();
    let g: Vec<u8> = pairs.iter().map(|(_, g)| **g as u8).collect();
    let counts = confusion(&p, &g)?;
    let d = det_metrics(&counts);
    let ci = CIParams::new(pairs.len() as u64)?;
    Ok(MetricsReport {
        task: Task::Detection,
        model: String::new(),
        encoder: String::new(),
        n: pairs.len() as u64,
        averaging: Averaging::Micro,
        counts,
        metrics: vec![
            metric("accuracy", d.accuracy, &ci),
            metric("precision", d.precision, &ci),
            metric("sensitivity", d.sensitivity, &ci),
            metric("f1", d.f1, &ci),
            metric("specificity", d.specificity, &ci),
        ],
    })
}

/// `"96.11 ± 0.46"`: percentage and radius, both to two decimals.
pub fn format_cell(m: &MetricValue) -> String {
    match (m.value, m.radius) {
        (Some(v), Some(r)) => format!("{:.2} ± {:.2}", 100.0 * v, 100.0 * r),
        _ => "undefined".to_string(),
    }
}

/// Aligned text table, one row per report; header taken from the first.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let mut header = vec!["Task".to_string(), "Model".to_string(), "Encoder".to_string()];
    header.extend(first.metrics.iter().map(|m| pretty_name(&m.name).to_string()));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.task.label().to_string(), r.model.clone(), r.encoder.clone()];
        row.extend(r.metrics.iter().map(format_cell));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn pretty_name(name: &str) -> &str {
    match name {
        "accuracy" => "Accuracy",
        "iou" => "IoU",
        "dsc" => "DSC",
        "precision" => "Precision",
        "sensitivity" => "Sensitivity",
        "f1" => "F1-score",
        "specificity" => "Specificity",
        other => other,
    }
}
