//! Precision dispatch and dataset plumbing shared by the CLI and the service.

use std::path::Path;

use anyhow::{bail, Context};
use cxrseg_core::io::{decode_weights, encode_weights, peek_weights, read_image, read_mask, resize, resize_mask};
use cxrseg_core::maskops::{postprocess_lung_with, PostprocessConfig};
use cxrseg_core::quantify::{run_pipeline, PipelineOutput};
use cxrseg_core::trainer::{train_with_progress, EpochRecord};
use cxrseg_core::{
    build_model, BinaryMask, DatasetRecord, GrayImage, ModelConfig, PipelineMode, Precision, ProbMap, Sample, SegModel,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

/// Which ground-truth mask a model learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Lung,
    Infection,
}

/// A model in whichever precision it was built or stored in.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(SegModel<f32>),
    F64(SegModel<f64>),
}

impl AnyModel {
    pub fn build(config: ModelConfig, precision: Precision, seed: u64) -> anyhow::Result<Self> {
        Ok(match precision {
            Precision::F32 => AnyModel::F32(build_model(config, seed)?),
            Precision::F64 => AnyModel::F64(build_model(config, seed)?),
        })
    }

    /// Loads weights; without an explicit precision the stored dtype decides.
    /// An explicit precision that disagrees with the file is an error.
    pub fn load(path: &Path, precision: Option<Precision>) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
        let stored = match peek_weights(&bytes)?.dtype {
            Some(code) if code == Precision::F32.dtype_code() => Precision::F32,
            _ => Precision::F64,
        };
        let model = match precision.unwrap_or(stored) {
            Precision::F32 => AnyModel::F32(decode_weights(&bytes)?),
            Precision::F64 => AnyModel::F64(decode_weights(&bytes)?),
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let bytes = match self {
            AnyModel::F32(m) => encode_weights(m),
            AnyModel::F64(m) => encode_weights(m),
        };
        std::fs::write(path, bytes).with_context(|| format!("writing weights {}", path.display()))
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            AnyModel::F32(m) => m.param_count(),
            AnyModel::F64(m) => m.param_count(),
        }
    }

    /// Foreground/background probabilities for one image, widened to f64.
    pub fn probs(&self, image: &GrayImage) -> anyhow::Result<ProbMap<f64>> {
        let (h, w) = image.dims();
        Ok(match self {
            AnyModel::F32(m) => {
                let p = ProbMap::from_batch(&m.forward(&image.to_tensor())?, 0)?;
                ProbMap::new(h, w, p.data().iter().map(|&v| v as f64).collect())?
            }
            AnyModel::F64(m) => ProbMap::from_batch(&m.forward(&image.to_tensor())?, 0)?,
        })
    }

    /// Post-processed lung mask, as used for review proposals.
    pub fn lung_mask(&self, image: &GrayImage, cfg: &PostprocessConfig) -> anyhow::Result<BinaryMask> {
        Ok(postprocess_lung_with(&self.probs(image)?, cfg)?)
    }

    pub fn train(
        self,
        train_set: &[Sample],
        val_set: &[Sample],
        config: &TrainConfig,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> anyhow::Result<(AnyModel, TrainSummary)> {
        Ok(match self {
            AnyModel::F32(m) => {
                let out = train_with_progress(m, train_set, val_set, config, on_epoch)?;
                (AnyModel::F32(out.model), TrainSummary::new(out.history, out.best_epoch, out.stopped_epoch, out.early_stopped))
            }
            AnyModel::F64(m) => {
                let out = train_with_progress(m, train_set, val_set, config, on_epoch)?;
                (AnyModel::F64(out.model), TrainSummary::new(out.history, out.best_epoch, out.stopped_epoch, out.early_stopped))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

impl TrainSummary {
    fn new(history: Vec<EpochRecord>, best_epoch: usize, stopped_epoch: usize, early_stopped: bool) -> Self {
        Self { history, best_epoch, stopped_epoch, early_stopped }
    }
}

/// Runs both networks on one image; the two models must share a precision.
pub fn quantify_image(
    case_id: &str,
    image: &GrayImage,
    lung: &AnyModel,
    infection: &AnyModel,
    mode: PipelineMode,
    cfg: &PostprocessConfig,
) -> anyhow::Result<PipelineOutput> {
    Ok(match (lung, infection) {
        (AnyModel::F32(l), AnyModel::F32(i)) => run_pipeline(case_id, image, l, i, mode, cfg)?,
        (AnyModel::F64(l), AnyModel::F64(i)) => run_pipeline(case_id, image, l, i, mode, cfg)?,
        _ => bail!("lung and infection weights are stored in different precisions"),
    })
}

/// Reads an image, optionally resized to `size`×`size`.
pub fn load_image(path: &Path, size: Option<usize>) -> anyhow::Result<GrayImage> {
    let img = read_image(path)?;
    Ok(match size {
        Some(s) if img.dims() != (s, s) => resize(&img, s),
        _ => img,
    })
}

pub fn load_mask(path: &Path, size: Option<usize>) -> anyhow::Result<BinaryMask> {
    let m = read_mask(path)?;
    Ok(match size {
        Some(s) if m.dims() != (s, s) => resize_mask(&m, s),
        _ => m,
    })
}

pub fn target_path(record: &DatasetRecord, target: Target) -> anyhow::Result<&Path> {
    let p = match target {
        Target::Lung => record.lung_mask.as_deref(),
        Target::Infection => record.infection_mask.as_deref(),
    };
    p.with_context(|| format!("record `{}` has no {target:?} mask", record.id))
}

pub fn load_samples<'a>(
    records: impl IntoIterator<Item = &'a DatasetRecord>,
    target: Target,
    size: Option<usize>,
) -> anyhow::Result<Vec<Sample>> {
    records
        .into_iter()
        .map(|r| {
            let image = load_image(&r.image, size)?;
            let mask = load_mask(target_path(r, target)?, size)?;
            Ok(Sample::new(r.id.clone(), image, mask)?)
        })
        .collect()
}
