//! `cxrseg` command-line entry points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cxrseg_core::io::{load_manifest, read_image, read_mask, synth_generate, write_image, write_mask, write_overlay_ppm};
use cxrseg_core::maskops::{clean_mask, intersect_masks, threshold};
use cxrseg_core::metrics::{
    confidence_radius, evaluate_detection, evaluate_segmentation, format_cell, format_table, Averaging, MetricValue,
};
use cxrseg_core::models::model_summary;
use cxrseg_core::quantify::{detect, quantify_masks, Detection};
use cxrseg_core::trainer::make_fold_plan;
use cxrseg_core::workflow::{replay, simulate, NewItem, Stage};
use cxrseg_core::{Arch, CIParams, DatasetRecord, GrayImage, PipelineMode, Precision, Task, Tensor};
use serde_json::json;

use crate::api::{router, AppState, ServiceOptions};
use crate::config::RunConfig;
use crate::pipeline::{load_image, load_mask, load_samples, quantify_image, target_path, AnyModel, Target};
use crate::state_dir::StateDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cxrseg", version, about = "Chest X-ray lung and infection segmentation toolkit")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Numeric precision for training and inference.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// TOML file with [model], [train], [postprocess], [workflow], [serve] and [sim] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth masks and a manifest.
    Synth(SynthArgs),
    /// Train a lung or infection model on a manifest.
    Train(TrainArgs),
    /// Predict a thresholded mask for one image.
    Infer(InferArgs),
    /// Clean a predicted mask (hole filling, small-region removal, lung intersection).
    Postprocess(PostprocessArgs),
    /// Detection and infection percentages for one image.
    Quantify(QuantifyArgs),
    /// Metrics with confidence intervals over a manifest.
    Eval(EvalArgs),
    /// Confidence radius of a metric over n samples.
    Ci(CiArgs),
    /// Parameter counts and inference times.
    Summary(SummaryArgs),
    /// Serve the review API over a workflow state directory.
    Serve(ServeArgs),
    /// Manage the annotation workflow offline.
    #[command(subcommand)]
    Workflow(WorkflowCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Samples per class.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub target: Target,
    /// Output weights file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cross-validation fold to train (its validation part drives the schedule).
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Share of each class held out as the test set of an untagged manifest.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Resize images and masks to size×size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Machine-readable training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output mask (PGM).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the foreground probability as an 8-bit image.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Target,
    /// Post-processed lung mask; required for infection masks.
    #[arg(long)]
    pub lung: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantifyArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub lung_weights: Option<PathBuf>,
    #[arg(long)]
    pub inf_weights: Option<PathBuf>,
    /// Quantify existing masks instead of running the models.
    #[arg(long)]
    pub lung_mask: Option<PathBuf>,
    #[arg(long)]
    pub inf_mask: Option<PathBuf>,
    #[arg(long, default_value = "parallel")]
    pub mode: PipelineMode,
    #[arg(long)]
    pub size: Option<usize>,
    /// Case id recorded in the report; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Colour overlay of the predicted masks (PPM).
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Directory for the predicted lung and infection masks.
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Lung,
    Infection,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Test,
    Val,
    Train,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub task: EvalTask,
    #[arg(long)]
    pub lung_weights: Option<PathBuf>,
    #[arg(long)]
    pub inf_weights: Option<PathBuf>,
    /// Manifest of predicted masks (same ids) instead of model weights.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, value_enum, default_value = "micro")]
    pub averaging: AveragingArg,
    #[arg(long, default_value = "parallel")]
    pub mode: PipelineMode,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    /// Metric value in [0, 1].
    #[arg(long)]
    pub metric: f64,
    #[arg(long)]
    pub n: u64,
    #[arg(long, default_value_t = CIParams::Z95)]
    pub z: f64,
    /// Print the table cell ("96.11 ± 0.46") instead of the bare radius.
    #[arg(long)]
    pub cell: bool,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Architectures to summarize, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "unet,unetpp,fpn")]
    pub arch: Vec<Arch>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base: Option<usize>,
    /// Side of the square timing input.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Summarize stored weights instead of fresh models.
    #[arg(long)]
    pub weights: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub state_dir: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Weights of the proposal model.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum WorkflowCommand {
    /// Create a deployment and add the items of a manifest.
    Init {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest of pre-existing lung masks to seed the repository with.
        #[arg(long)]
        seed_manifest: Option<PathBuf>,
    },
    /// Register Stage I candidates with their validation DSC and crown the best.
    Stage1 {
        #[arg(long)]
        state_dir: PathBuf,
        /// `name=dsc`, repeatable.
        #[arg(long = "score", required = true)]
        scores: Vec<String>,
    },
    /// Move to the next stage.
    Advance {
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Register six Stage III models and attach their proposals to every unreviewed item.
    Stage3Propose {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long = "weights", required = true)]
        weights: Vec<PathBuf>,
    },
    /// Draw the Stage IV verification sample.
    Sample {
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Per-status counts, round, stage and champion.
    Progress {
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Replay the event log from scratch and check it reproduces the live state.
    Replay {
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Drive a fresh deployment through all four stages with scripted reviewers.
    Simulate {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long)]
        items: Option<usize>,
    },
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    precision: Option<Precision>,
}

impl Ctx {
    fn train_precision(&self) -> Precision {
        self.precision.unwrap_or(self.cfg.train.precision)
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx { seed: cli.seed.unwrap_or(cfg.train.seed), precision: cli.precision.map(Into::into), cfg };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Postprocess(a) => postprocess(&ctx, a),
        Command::Quantify(a) => quantify(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ci(a) => ci(a),
        Command::Summary(a) => summary(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Workflow(w) => workflow(&ctx, w),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> anyhow::Result<()> {
    let records = synth_generate(a.n, a.size, ctx.seed, &a.out)?;
    println!("wrote {} samples ({} per class, {}x{}) to {}", records.len(), a.n, a.size, a.size, a.out.display());
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> anyhow::Result<()> {
    let records = load_manifest(&a.manifest)?;
    let plan = make_fold_plan(&records, a.test_fraction, a.k, ctx.seed)?;
    plan.audit(&records)?;
    let fold = plan.folds.get(a.fold).with_context(|| format!("fold {} out of range (plan has {})", a.fold, plan.folds.len()))?;
    let by_id: BTreeMap<&str, &DatasetRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let pick = |ids: &[String]| -> Vec<&DatasetRecord> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    let train_set = load_samples(pick(&fold.train), a.target, a.size)?;
    let val_set = load_samples(pick(&fold.val), a.target, a.size)?;

    let mut tc = ctx.cfg.train.clone();
    tc.seed = ctx.seed;
    tc.precision = ctx.train_precision();
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if let Some(al) = a.alpha {
        tc.alpha = al;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    let mut section = ctx.cfg.model;
    section.arch = a.model.arch.unwrap_or(section.arch);
    section.depth = a.model.depth.unwrap_or(section.depth);
    section.base_channels = a.model.base.unwrap_or(section.base_channels);
    let model = match &a.init {
        Some(p) => AnyModel::load(p, Some(tc.precision))?,
        None => AnyModel::build(section.config(), tc.precision, ctx.seed)?,
    };
    println!(
        "training {:?} {} depth {} base {} ({:?}) on {} samples, validating on {}, {} held out",
        a.target,
        model.config().arch.label(),
        model.config().depth,
        model.config().base_channels,
        tc.precision,
        train_set.len(),
        val_set.len(),
        plan.test_ids().count()
    );
    let mut out = std::io::stdout();
    let (trained, summary) = model.train(&train_set, &val_set, &tc, |r| {
        let _ = writeln!(
            out,
            "epoch {} train_loss {:.6} val_loss {:.6} val_dsc {:.4} lr {:.3e}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_dsc,
            r.lr,
            if r.lr_reduced { " lr_reduced" } else { "" }
        );
        let _ = out.flush();
    })?;
    trained.save(&a.out)?;
    println!(
        "best epoch {} of {}{}; weights written to {}",
        summary.best_epoch,
        summary.stopped_epoch,
        if summary.early_stopped { " (early stop)" } else { "" },
        a.out.display()
    );
    if let Some(path) = &a.report {
        let report = json!({
            "target": a.target,
            "model": trained.config(),
            "precision": trained.precision(),
            "param_count": trained.param_count(),
            "train_config": tc,
            "fold": a.fold,
            "train_size": train_set.len(),
            "val_size": val_set.len(),
            "test_ids": plan.test_ids().collect::<Vec<_>>(),
            "best_epoch": summary.best_epoch,
            "stopped_epoch": summary.stopped_epoch,
            "early_stopped": summary.early_stopped,
            "history": summary.history,
            "weights": a.out,
        });
        write_json(path, &report)?;
    }
    Ok(())
}

fn infer(ctx: &Ctx, a: InferArgs) -> anyhow::Result<()> {
    let model = AnyModel::load(&a.weights, ctx.precision)?;
    let image = load_image(&a.image, a.size)?;
    let probs = model.probs(&image)?;
    let mask = threshold(&probs, ctx.cfg.postprocess.threshold)?;
    write_mask(&a.out, &mask)?;
    if let Some(p) = &a.probs {
        let (h, w) = probs.dims();
        let data = probs.foreground().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        write_image(p, &GrayImage::new(h, w, data)?)?;
    }
    println!("{} foreground pixels of {}", mask.count(), mask.len());
    Ok(())
}

fn postprocess(ctx: &Ctx, a: PostprocessArgs) -> anyhow::Result<()> {
    let raw = read_mask(&a.mask)?;
    let pp = &ctx.cfg.postprocess;
    let out = match a.kind {
        Target::Lung => clean_mask(&raw, pp)?,
        Target::Infection => {
            let lung = read_mask(a.lung.as_ref().context("--lung is required for infection masks")?)?;
            let cleaned = if pp.clean_infection { clean_mask(&raw, pp)? } else { raw.clone() };
            intersect_masks(&cleaned, &lung)?
        }
    };
    write_mask(&a.out, &out)?;
    println!("{} -> {} foreground pixels", raw.count(), out.count());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into())
}

fn quantify(ctx: &Ctx, a: QuantifyArgs) -> anyhow::Result<()> {
    let (report, lung, infection) = match (&a.lung_mask, &a.inf_mask) {
        (Some(l), Some(i)) => {
            let lung = load_mask(l, a.size)?;
            let infection = load_mask(i, a.size)?;
            let id = a.id.clone().unwrap_or_else(|| stem(l));
            (quantify_masks(&id, &lung, &infection)?, lung, infection)
        }
        (None, None) => {
            let image_path = a.image.as_ref().context("--image is required unless both masks are given")?;
            let lw = a.lung_weights.as_ref().context("--lung-weights is required")?;
            let iw = a.inf_weights.as_ref().context("--inf-weights is required")?;
            let lung_model = AnyModel::load(lw, ctx.precision)?;
            let inf_model = AnyModel::load(iw, ctx.precision)?;
            let image = load_image(image_path, a.size)?;
            let id = a.id.clone().unwrap_or_else(|| stem(image_path));
            let out = quantify_image(&id, &image, &lung_model, &inf_model, a.mode, &ctx.cfg.postprocess)?;
            if let Some(p) = &a.overlay {
                write_overlay_ppm(p, &image, &out.lung_mask, &out.infection_mask)?;
            }
            (out.report, out.lung_mask, out.infection_mask)
        }
        _ => bail!("give both --lung-mask and --inf-mask, or neither"),
    };
    if let Some(dir) = &a.masks_out {
        std::fs::create_dir_all(dir)?;
        write_mask(dir.join(format!("{}_lung.pgm", report.case_id)), &lung)?;
        write_mask(dir.join(format!("{}_infection.pgm", report.case_id)), &infection)?;
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let records = load_manifest(&a.manifest)?;
    let selected: Vec<&DatasetRecord> = match a.split {
        SplitArg::All => records.iter().collect(),
        split => {
            let plan = make_fold_plan(&records, a.test_fraction, a.k, ctx.seed)?;
            let ids: Vec<String> = match split {
                SplitArg::Test => plan.test_ids().cloned().collect(),
                SplitArg::Val => plan.folds.get(a.fold).context("fold out of range")?.val.clone(),
                _ => plan.folds.get(a.fold).context("fold out of range")?.train.clone(),
            };
            let keep: std::collections::BTreeSet<String> = ids.into_iter().collect();
            records.iter().filter(|r| keep.contains(&r.id)).collect()
        }
    };
    ensure!(!selected.is_empty(), "no records selected");
    let averaging = match a.averaging {
        AveragingArg::Micro => Averaging::Micro,
        AveragingArg::Macro => Averaging::Macro,
    };

    // Predicted (lung, infection) masks per id.
    let mut preds = Vec::with_capacity(selected.len());
    if let Some(pm) = &a.predictions {
        let pred_records = load_manifest(pm)?;
        let by_id: BTreeMap<&str, &DatasetRecord> = pred_records.iter().map(|r| (r.id.as_str(), r)).collect();
        for r in &selected {
            let p = by_id.get(r.id.as_str()).with_context(|| format!("no prediction for `{}`", r.id))?;
            let lung = p.lung_mask.as_deref().map(|m| load_mask(m, a.size)).transpose()?;
            let inf = p.infection_mask.as_deref().map(|m| load_mask(m, a.size)).transpose()?;
            preds.push((r.id.clone(), lung, inf));
        }
    } else {
        let lung_model = AnyModel::load(a.lung_weights.as_ref().context("--lung-weights is required")?, ctx.precision)?;
        let inf_model = match a.task {
            EvalTask::Lung => None,
            _ => Some(AnyModel::load(a.inf_weights.as_ref().context("--inf-weights is required")?, ctx.precision)?),
        };
        for r in &selected {
            let image = load_image(&r.image, a.size)?;
            match &inf_model {
                None => preds.push((r.id.clone(), Some(lung_model.lung_mask(&image, &ctx.cfg.postprocess)?), None)),
                Some(im) => {
                    let out = quantify_image(&r.id, &image, &lung_model, im, a.mode, &ctx.cfg.postprocess)?;
                    preds.push((r.id.clone(), Some(out.lung_mask), Some(out.infection_mask)));
                }
            }
        }
    }

    let report = match a.task {
        EvalTask::Lung | EvalTask::Infection => {
            let target = if a.task == EvalTask::Lung { Target::Lung } else { Target::Infection };
            let gts = selected
                .iter()
                .map(|r| Ok((r.id.clone(), load_mask(target_path(r, target)?, a.size)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let p = preds
                .into_iter()
                .map(|(id, l, i)| {
                    let m = if target == Target::Lung { l } else { i };
                    m.map(|m| (id.clone(), m)).with_context(|| format!("no predicted {target:?} mask for `{id}`"))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let task = if target == Target::Lung { Task::LungSegmentation } else { Task::InfectionSegmentation };
            evaluate_segmentation(&p, &gts, task, averaging)?
        }
        EvalTask::Detection => {
            let gts = selected
                .iter()
                .map(|r| Ok((r.id.clone(), detect(&load_mask(target_path(r, Target::Infection)?, a.size)?) == Detection::Positive)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let p = preds
                .into_iter()
                .map(|(id, _, i)| {
                    let m = i.with_context(|| format!("no predicted infection mask for `{id}`"))?;
                    Ok((id, detect(&m) == Detection::Positive))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            evaluate_detection(&p, &gts)?
        }
    };
    let label = a.lung_weights.as_deref().map(stem).unwrap_or_else(|| "predictions".into());
    let report = report.with_labels(label, "-");
    print!("{}", format_table(std::slice::from_ref(&report)));
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn ci(a: CiArgs) -> anyhow::Result<()> {
    ensure!((0.0..=1.0).contains(&a.metric), "metric must lie in [0, 1], got {}", a.metric);
    let p = CIParams::with_z(a.n, a.z)?;
    let r = confidence_radius(a.metric, &p);
    if a.cell {
        println!("{}", format_cell(&MetricValue { name: "metric".into(), value: Some(a.metric), radius: Some(r) }));
    } else {
        println!("{r:.4}");
    }
    Ok(())
}

fn summary(ctx: &Ctx, a: SummaryArgs) -> anyhow::Result<()> {
    let mut models = Vec::new();
    if a.weights.is_empty() {
        let precision = ctx.train_precision();
        for arch in &a.arch {
            let mut section = ctx.cfg.model;
            section.arch = *arch;
            section.depth = a.depth.unwrap_or(section.depth);
            section.base_channels = a.base.unwrap_or(section.base_channels);
            models.push((arch.label().to_string(), AnyModel::build(section.config(), precision, ctx.seed)?));
        }
    } else {
        for w in &a.weights {
            models.push((stem(w), AnyModel::load(w, ctx.precision)?));
        }
    }
    let mut rows = Vec::new();
    for (name, model) in &models {
        let n = a.size * a.size;
        let s = match model {
            AnyModel::F32(m) => model_summary(m, &Tensor::new(vec![1, 1, a.size, a.size], vec![0.5f32; n])?, a.runs)?,
            AnyModel::F64(m) => model_summary(m, &Tensor::new(vec![1, 1, a.size, a.size], vec![0.5f64; n])?, a.runs)?,
        };
        rows.push(json!({
            "model": name,
            "depth": model.config().depth,
            "base_channels": model.config().base_channels,
            "precision": model.precision(),
            "param_count": s.param_count,
            "inference_ms": s.inference_ms,
            "runs": s.runs,
            "input": [a.size, a.size],
        }));
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("{:<10} {:>12} {:>16}", "model", "parameters", "inference (ms)");
        for r in &rows {
            let (name, params, ms) = (r["model"].as_str(), r["param_count"].as_u64(), r["inference_ms"].as_f64());
            println!("{:<10} {:>12} {:>16.3}", name.unwrap_or(""), params.unwrap_or(0), ms.unwrap_or(0.0));
        }
    }
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> anyhow::Result<()> {
    let mut train = ctx.cfg.train.clone();
    train.seed = ctx.seed;
    train.precision = ctx.train_precision();
    let state = AppState::open(ServiceOptions {
        state_dir: a.state_dir.clone(),
        workflow: ctx.cfg.workflow.clone(),
        model: ctx.cfg.model.config(),
        train,
        postprocess: ctx.cfg.postprocess,
        weights: a.weights.clone(),
    })?;
    let host = a.host.clone().unwrap_or_else(|| ctx.cfg.serve.host.clone());
    let port = a.port.unwrap_or(ctx.cfg.serve.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
        println!("serving {} on http://{}", a.state_dir.display(), listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}

fn workflow(ctx: &Ctx, cmd: WorkflowCommand) -> anyhow::Result<()> {
    let mut wcfg = ctx.cfg.workflow.clone();
    wcfg.seed = ctx.seed;
    match cmd {
        WorkflowCommand::Init { state_dir, manifest, seed_manifest } => {
            let dir = StateDir::new(&state_dir);
            ensure!(!dir.events().exists(), "{} already holds a workflow", state_dir.display());
            let absolute = |p: &Path| std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()));
            let records = load_manifest(&manifest)?;
            let items = records
                .iter()
                .map(|r| Ok(NewItem { id: r.id.clone(), class: r.class, image: absolute(&r.image)?.display().to_string() }))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut wf = dir.open(&wcfg)?;
            wf.add_items(items)?;
            if let Some(sm) = seed_manifest {
                let mut seeds = load_manifest(&sm)?;
                for s in &mut seeds {
                    s.image = absolute(&s.image)?;
                    s.lung_mask = s.lung_mask.as_deref().map(absolute).transpose()?;
                    s.infection_mask = s.infection_mask.as_deref().map(absolute).transpose()?;
                }
                wf.register_seed_masks(seeds.iter().map(|s| s.id.clone()).collect())?;
                dir.write_seeds(&seeds)?;
            }
            println!("{}", serde_json::to_string_pretty(&wf.state().progress())?);
        }
        WorkflowCommand::Stage1 { state_dir, scores } => {
            let mut wf = StateDir::new(&state_dir).open(&wcfg)?;
            let mut parsed = Vec::new();
            for s in &scores {
                let (name, v) = s.split_once('=').with_context(|| format!("score `{s}` is not name=value"))?;
                let v: f64 = v.parse().with_context(|| format!("score `{s}` has a non-numeric value"))?;
                parsed.push((name.to_string(), v));
            }
            for (name, _) in &parsed {
                if !wf.state().candidates.contains(name) {
                    wf.register_candidate(name.clone())?;
                }
            }
            println!("champion: {}", wf.stage1_select(&parsed)?);
        }
        WorkflowCommand::Advance { state_dir } => {
            let stage = StateDir::new(&state_dir).open(&wcfg)?.advance_stage()?;
            println!("stage: {stage:?}");
        }
        WorkflowCommand::Stage3Propose { state_dir, weights } => {
            let mut wf = StateDir::new(&state_dir).open(&wcfg)?;
            let models = weights.iter().map(|w| AnyModel::load(w, ctx.precision)).collect::<anyhow::Result<Vec<_>>>()?;
            if wf.state().stage3_models.is_empty() {
                wf.stage3_register(weights.iter().map(|w| stem(w)).collect())?;
            }
            let ids: Vec<String> = wf.state().pool().iter().map(|it| it.id.clone()).collect();
            let pp = ctx.cfg.postprocess;
            let stored = wf.stage3_propose(&ids, |it, m| {
                let img = read_image(&it.image)?;
                models[m].lung_mask(&img, &pp).map_err(|e| cxrseg_core::Error::Format(format!("{e:#}")))
            })?;
            println!("stored {stored} proposals for {} items", ids.len());
        }
        WorkflowCommand::Sample { state_dir } => {
            let ids = StateDir::new(&state_dir).open(&wcfg)?.stage4_sample()?;
            println!("{}", serde_json::to_string_pretty(&ids)?);
        }
        WorkflowCommand::Progress { state_dir } => {
            let wf = StateDir::new(&state_dir).open(&wcfg)?;
            println!("{}", serde_json::to_string_pretty(&wf.state().progress())?);
        }
        WorkflowCommand::Replay { state_dir } => {
            let wf = StateDir::new(&state_dir).open(&wcfg)?;
            let rebuilt = replay(wf.state().config.clone(), wf.events())?;
            ensure!(&rebuilt == wf.state(), "replayed state differs from the live state");
            rebuilt.check_invariants()?;
            println!("replayed {} events: state identical", wf.events().len());
        }
        WorkflowCommand::Simulate { state_dir, items } => {
            let dir = StateDir::new(&state_dir);
            ensure!(!dir.events().exists(), "{} already holds a workflow", state_dir.display());
            let mut sim = ctx.cfg.sim.clone();
            sim.seed = ctx.seed;
            if let Some(n) = items {
                sim.items = n;
            }
            let mut wf = dir.open(&wcfg)?;
            simulate(&mut wf, &sim)?;
            debug_assert_eq!(wf.state().stage, Stage::IV);
            println!("{} events written to {}", wf.events().len(), dir.events().display());
            println!("{}", serde_json::to_string_pretty(&wf.state().progress())?);
        }
    }
    Ok(())
}
