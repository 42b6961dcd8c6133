//! Miniature U-Net, U-Net++ and FPN segmentation networks.
//!
//! Every architecture shares a plain conv-ReLU encoder whose width doubles per
//! level (`base · 2^i`). The decoders differ:
//!
//! * **U-Net**: one skip per level, concatenated with the upsampled deeper
//!   decoder output.
//! * **U-Net++**: nested dense nodes `X(i,j)` fed by every `X(i,0..j)` plus the
//!   upsampled `X(i+1,j-1)`; only `X(0,depth-1)` reaches the output.
//! * **FPN**: 1×1 lateral projections to `base` channels, top-down additions,
//!   a 3×3 two-channel head per level upsampled to full resolution, then the
//!   heads are concatenated and fused by one 3×3 convolution.
//!
//! All end in a two-class pixelwise softmax.

use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stable_hash, stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const OUT_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Unet,
    Unetpp,
    Fpn,
}

impl Arch {
    pub fn code(self) -> u8 {
        match self {
            Arch::Unet => 0,
            Arch::Unetpp => 1,
            Arch::Fpn => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Arch::Unet),
            1 => Some(Arch::Unetpp),
            2 => Some(Arch::Fpn),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arch::Unet => "U-Net",
            Arch::Unetpp => "U-Net++",
            Arch::Fpn => "FPN",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Arch::Unet),
            "unetpp" | "unet++" | "u-net++" => Ok(Arch::Unetpp),
            "fpn" => Ok(Arch::Fpn),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch, depth: usize, base_channels: usize) -> Self {
        Self { arch, depth, base_channels, in_channels: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} outside 2..=4", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} below 4", self.base_channels)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One convolution in a model's wiring description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kernel: usize, cin: usize, cout: usize) -> Self {
        Self { name: name.into(), kernel, cin, cout }
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }
}

fn block_specs(out: &mut Vec<LayerSpec>, name: &str, cin: usize, cout: usize) {
    out.push(LayerSpec::new(format!("{name}.conv1"), 3, cin, cout));
    out.push(LayerSpec::new(format!("{name}.conv2"), 3, cout, cout));
}

fn encoder_name(arch: Arch, level: usize) -> String {
    match arch {
        Arch::Unetpp => format!("x{level}_0"),
        _ => format!("enc{level}"),
    }
}

/// Ordered list of every convolution the configuration instantiates.
pub fn layer_specs(config: &ModelConfig) -> Vec<LayerSpec> {
    let d = config.depth;
    let ch = |i: usize| config.level_channels(i);
    let mut specs = Vec::new();
    for i in 0..d {
        let cin = if i == 0 { config.in_channels } else { ch(i - 1) };
        block_specs(&mut specs, &encoder_name(config.arch, i), cin, ch(i));
    }
    match config.arch {
        Arch::Unet => {
            for i in (0..d - 1).rev() {
                block_specs(&mut specs, &format!("dec{i}"), ch(i) + ch(i + 1), ch(i));
            }
            specs.push(LayerSpec::new("head", 1, ch(0), OUT_CLASSES));
        }
        Arch::Unetpp => {
            for j in 1..d {
                for i in 0..d - j {
                    block_specs(&mut specs, &format!("x{i}_{j}"), j * ch(i) + ch(i + 1), ch(i));
                }
            }
            specs.push(LayerSpec::new("head", 1, ch(0), OUT_CLASSES));
        }
        Arch::Fpn => {
            let width = config.base_channels;
            for i in 0..d {
                specs.push(LayerSpec::new(format!("lat{i}"), 1, ch(i), width));
            }
            for i in 0..d {
                specs.push(LayerSpec::new(format!("pred{i}"), 3, width, OUT_CLASSES));
            }
            specs.push(LayerSpec::new("fuse", 3, OUT_CLASSES * d, OUT_CLASSES));
        }
    }
    specs
}

/// Architecture descriptor plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    config: ModelConfig,
    params: IndexMap<String, Tensor<T>>,
}

/// Tape handles of a model's parameters, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Builds a model with seeded Glorot-uniform weights and zero biases. Each
/// parameter draws from its own stream keyed by name.
pub fn build_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<SegModel<T>> {
    config.validate()?;
    let mut params = IndexMap::new();
    for spec in layer_specs(&config) {
        let wname = format!("{}.weight", spec.name);
        let mut rng = stream(seed, &[stable_hash(&wname)]);
        let k2 = spec.kernel * spec.kernel;
        let weight =
            Tensor::glorot(&[spec.cout, spec.cin, spec.kernel, spec.kernel], spec.cin * k2, spec.cout * k2, &mut rng);
        params.insert(wname, weight);
        params.insert(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout]));
    }
    Ok(SegModel { config, params })
}

impl<T: Scalar> SegModel<T> {
    /// Assembles a model from existing tensors, checking them against the
    /// wiring the configuration implies.
    pub fn from_params(config: ModelConfig, params: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    fn expected_shapes(config: &ModelConfig) -> IndexMap<String, Vec<usize>> {
        let mut out = IndexMap::new();
        for s in layer_specs(config) {
            out.insert(format!("{}.weight", s.name), vec![s.cout, s.cin, s.kernel, s.kernel]);
            out.insert(format!("{}.bias", s.name), vec![s.cout]);
        }
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone().with_grad(requires_grad))))
            .collect();
        BoundParams { vars }
    }

    /// Pairs already-recorded tape values with parameter names, in the
    /// model's parameter order. Lets callers differentiate with respect to
    /// substitute parameter values.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::Usage(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(BoundParams { vars: self.params.keys().cloned().zip(vars.iter().copied()).collect() })
    }

    /// Records the forward pass; returns the N×2×H×W softmax output.
    pub fn forward_tape(&self, tape: &mut Tape<T>, params: &BoundParams, input: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(input).dims4("forward")?;
        if c != self.config.in_channels {
            return Err(Error::dim("forward", format!("input has {c} channels, model expects {}", self.config.in_channels)));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::dim("forward", format!("spatial dims {h}×{w} not divisible by {div}")));
        }
        let net = Wiring { tape, params };
        match self.config.arch {
            Arch::Unet => net.unet(&self.config, input),
            Arch::Unetpp => net.unetpp(&self.config, input),
            Arch::Fpn => net.fpn(&self.config, input),
        }
    }

    /// Inference without gradient bookkeeping.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.leaf(batch.clone().with_grad(false));
        let out = self.forward_tape(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }
}

struct Wiring<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a BoundParams,
}

impl<T: Scalar> Wiring<'_, T> {
    fn conv(&mut self, name: &str, x: Var, kernel: usize) -> Result<Var> {
        let w = self.params.var(&format!("{name}.weight"));
        let b = self.params.var(&format!("{name}.bias"));
        self.tape.conv2d(x, w, b, 1, kernel / 2)
    }

    fn block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv1"), x, 3)?;
        let y = self.tape.relu(y);
        let y = self.conv(&format!("{name}.conv2"), y, 3)?;
        Ok(self.tape.relu(y))
    }

    fn encoder(&mut self, cfg: &ModelConfig, input: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(cfg.depth);
        let mut x = input;
        for i in 0..cfg.depth {
            if i > 0 {
                x = self.tape.max_pool2x2(x)?;
            }
            x = self.block(&encoder_name(cfg.arch, i), x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    fn head(&mut self, x: Var) -> Result<Var> {
        let logits = self.conv("head", x, 1)?;
        self.tape.softmax2(logits)
    }

    fn unet(mut self, cfg: &ModelConfig, input: Var) -> Result<Var> {
        let skips = self.encoder(cfg, input)?;
        let mut y = skips[cfg.depth - 1];
        for i in (0..cfg.depth - 1).rev() {
            let up = self.tape.upsample2x(y)?;
            let cat = self.tape.concat_channels(skips[i], up)?;
            y = self.block(&format!("dec{i}"), cat)?;
        }
        self.head(y)
    }

    fn unetpp(mut self, cfg: &ModelConfig, input: Var) -> Result<Var> {
        let d = cfg.depth;
        let mut nodes: Vec<Vec<Var>> = self.encoder(cfg, input)?.into_iter().map(|v| vec![v]).collect();
        for j in 1..d {
            for i in 0..d - j {
                let mut cat = nodes[i][0];
                for &node in &nodes[i][1..j] {
                    cat = self.tape.concat_channels(cat, node)?;
                }
                let up = self.tape.upsample2x(nodes[i + 1][j - 1])?;
                cat = self.tape.concat_channels(cat, up)?;
                let x = self.block(&format!("x{i}_{j}"), cat)?;
                nodes[i].push(x);
            }
        }
        self.head(nodes[0][d - 1])
    }

    fn fpn(mut self, cfg: &ModelConfig, input: Var) -> Result<Var> {
        let d = cfg.depth;
        let feats = self.encoder(cfg, input)?;
        let mut pyramid = vec![feats[d - 1]; d];
        pyramid[d - 1] = self.conv(&format!("lat{}", d - 1), feats[d - 1], 1)?;
        for i in (0..d - 1).rev() {
            let lateral = self.conv(&format!("lat{i}"), feats[i], 1)?;
            let up = self.tape.upsample2x(pyramid[i + 1])?;
            pyramid[i] = self.tape.add(lateral, up)?;
        }
        let mut merged: Option<Var> = None;
        for (i, &p) in pyramid.iter().enumerate() {
            let mut head = self.conv(&format!("pred{i}"), p, 3)?;
            for _ in 0..i {
                head = self.tape.upsample2x(head)?;
            }
            merged = Some(match merged {
                None => head,
                Some(m) => self.tape.concat_channels(m, head)?,
            });
        }
        let logits = self.conv("fuse", merged.expect("depth >= 2"), 3)?;
        self.tape.softmax2(logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub param_count: usize,
    /// Median wall time of the timed forward passes.
    pub inference_ms: f64,
    pub runs: usize,
}

/// Parameter count and median forward latency over `runs` (at least 10)
/// passes on `timing_input`.
pub fn model_summary<T: Scalar>(model: &SegModel<T>, timing_input: &Tensor<T>, runs: usize) -> Result<ModelSummary> {
    let runs = runs.max(10);
    model.forward(timing_input)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = model.forward(timing_input)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let inference_ms = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
    Ok(ModelSummary { param_count: model.param_count(), inference_ms, runs })
}
