//! U-shaped assembly, checkpoint files, and the toy trainer.
//!
//! Topology: LEN lifts the input, a stem conv embeds it, each encoder level
//! runs a residual block and NeCo before a strided downsample, UaD refines
//! the bottleneck, and each decoder level upsamples, fuses the skip, and
//! applies AsC. A small head predicts a residual on top of the lifted input.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{Asc, AscConfig, Neco, NecoConfig};
use crate::error::{Error, Result};
use crate::g2af::G2afConfig;
use crate::imageio::{self, crop_flip_augment, luminance_diff_target, rgb_to_ycrcb, Degradation, Image};
use crate::len::{apply_luminance_prior, Len};
use crate::nn::{Builder, Conv2d, Mode, Padding, ResBlock, Scope};
use crate::numerics::ops::reflect_index;
use crate::numerics::{Initializer, ParamStore, Precision, Tape, Tensor, Var};
use crate::objective::{psnr, ssim_metric, LossReport, LossWeights, Objective, ObjectiveConfig};
use crate::uad::{entropy_gradient_diagnostic, EntropyGradientReport, Uad, UadConfig};

/// Which optional modules are built. A disabled module is the identity and
/// registers no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modules {
    pub len: bool,
    pub neco: bool,
    pub uad: bool,
    pub asc: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Modules::full()
    }
}

impl Modules {
    pub const ROWS: [&'static str; 6] = ["baseline", "len", "neco", "uad", "asc", "full"];

    pub fn full() -> Self {
        Modules { len: true, neco: true, uad: true, asc: true }
    }

    pub fn baseline() -> Self {
        Modules { len: false, neco: false, uad: false, asc: false }
    }

    /// Ablation row by name: `baseline`, `full`, or a single module on top
    /// of the baseline.
    pub fn row(name: &str) -> Result<Self> {
        let mut m = Modules::baseline();
        match name {
            "baseline" => {}
            "full" => m = Modules::full(),
            "len" => m.len = true,
            "neco" => m.neco = true,
            "uad" => m.uad = true,
            "asc" => m.asc = true,
            other => {
                return Err(Error::invalid(format!(
                    "unknown ablation row `{other}` (expected one of {})",
                    Modules::ROWS.join(", ")
                )))
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `c1`, before the toy reduction.
    pub base_channels: usize,
    /// Number of resolution levels; the bottleneck is `2^(depth-1)` times
    /// smaller than the input.
    pub depth: usize,
    pub multipliers: Vec<usize>,
    /// Divides every channel count by 4 (minimum 2).
    pub toy: bool,
    pub uad: UadConfig,
    pub g2af: G2afConfig,
    pub neco: NecoConfig,
    pub asc: AscConfig,
    pub modules: Modules,
    pub seed: u64,
}

/// The toy configuration; missing keys in a config file are taken from it.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    pub fn full_size() -> Self {
        ModelConfig {
            base_channels: 32,
            depth: 3,
            multipliers: vec![1, 2, 2],
            toy: false,
            uad: UadConfig::default(),
            g2af: G2afConfig::default(),
            neco: NecoConfig::default(),
            asc: AscConfig::default(),
            modules: Modules::full(),
            seed: 0,
        }
    }

    /// `c1 = 8`, two levels.
    pub fn toy() -> Self {
        ModelConfig {
            depth: 2,
            multipliers: vec![1, 2],
            toy: true,
            uad: UadConfig { d_head: 8, ..UadConfig::default() },
            ..ModelConfig::full_size()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        let c = self.base_channels * self.multipliers[level];
        if self.toy {
            (c / 4).max(2)
        } else {
            c
        }
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::invalid(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.multipliers.len() != self.depth {
            return Err(Error::invalid(format!(
                "{} channel multipliers for depth {}",
                self.multipliers.len(),
                self.depth
            )));
        }
        for level in 0..self.depth {
            if self.multipliers[level] == 0 || self.channels(level) < 2 {
                return Err(Error::invalid(format!(
                    "level {level} has {} channels; at least 2 are required",
                    self.base_channels * self.multipliers[level]
                )));
            }
        }
        if self.uad.d_head == 0 {
            return Err(Error::invalid("d_head must be positive"));
        }
        if !(0.0..1.0).contains(&self.uad.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.uad.dropout)));
        }
        if self.neco.expand == 0 {
            return Err(Error::invalid("neco.expand must be positive"));
        }
        self.asc.validate()
    }

    /// Bottom/right padding that makes `h x w` divisible by [`Self::divisor`].
    pub fn required_padding(&self, h: usize, w: usize) -> (usize, usize) {
        let d = self.divisor();
        ((d - h % d) % d, (d - w % d) % d)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    rem: ResBlock,
    neco: Option<Neco>,
    down: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    fuse: Conv2d,
    rem: ResBlock,
    asc: Option<Asc>,
}

#[derive(Clone, Debug)]
struct Layers {
    len: Option<Len>,
    stem: Conv2d,
    encoder: Vec<EncoderLevel>,
    bottleneck: ResBlock,
    uad: Option<Uad>,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

/// Intermediate results of one forward pass.
pub struct ForwardOutput<'t> {
    pub output: Var<'t>,
    /// LEN prior `[N,1,H,W]`, when LEN is enabled.
    pub prior: Option<Var<'t>>,
    /// The input after the luminance lift (the input itself without LEN).
    pub lifted: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let layers = {
            let mut b = Builder::new(&mut store, &mut init);
            build_layers(&mut b, &config)?
        };
        Ok(Model { config, store, layers })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Attention value-path parameters of the bottleneck UaD (empty when
    /// UaD is disabled).
    pub fn value_path_params(&self) -> Vec<String> {
        self.layers.uad.as_ref().map(Uad::value_path_params).unwrap_or_default()
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let (ph, pw) = self.config.required_padding(h, w);
        if ph != 0 || pw != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {}; pad by {ph} rows and {pw} columns to {}x{}",
                self.config.divisor(),
                h + ph,
                w + pw
            )));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, i_low: &Var<'t>) -> Result<ForwardOutput<'t>> {
        let [_, c, h, w] = i_low.dims();
        if c != 3 {
            return Err(Error::shape(format!("expected RGB input, got {:?}", i_low.shape())));
        }
        self.check_extents(h, w)?;
        let l = &self.layers;
        let (prior, lifted) = match &l.len {
            Some(len) => {
                let p = len.forward(s, i_low)?;
                let lifted = apply_luminance_prior(i_low, &p)?;
                (Some(p), lifted)
            }
            None => (None, i_low.clone()),
        };
        let mut x = l.stem.forward(s, &lifted)?;
        let mut skips = Vec::with_capacity(l.encoder.len());
        for (i, level) in l.encoder.iter().enumerate() {
            x = level.rem.forward(s, &x)?;
            if let Some(neco) = &level.neco {
                x = x.add(&neco.forward(s, &x)?)?;
            }
            s.tape.check_finite(&format!("encoder{i}"))?;
            skips.push(x.clone());
            x = level.down.forward(s, &x)?;
        }
        x = l.bottleneck.forward(s, &x)?;
        if let Some(uad) = &l.uad {
            x = x.add(&uad.forward(s, &x)?)?;
        }
        s.tape.check_finite("bottleneck")?;
        for (i, level) in l.decoder.iter().enumerate() {
            let skip = &skips[skips.len() - 1 - i];
            let up = level.up.forward(s, &x.upsample_nearest(2)?)?;
            x = level.fuse.forward(s, &crate::numerics::concat(&[&up, skip], 1)?)?;
            x = level.rem.forward(s, &x)?;
            if let Some(asc) = &level.asc {
                x = x.add(&asc.forward(s, &x)?)?;
            }
            s.tape.check_finite(&format!("decoder{i}"))?;
        }
        let delta = l.head.forward(s, &x)?;
        let output = lifted.add(&delta)?.clamp(0.0, 1.0);
        s.tape.check_finite("head")?;
        Ok(ForwardOutput { output, prior, lifted })
    }

    /// Forward on an input of any size: reflect-pads bottom and right to the
    /// divisor, runs, and crops output and prior back.
    pub fn forward_padded<'t>(&self, s: &Scope<'_, 't>, i_low: &Tensor) -> Result<ForwardOutput<'t>> {
        let [_, _, h, w] = i_low.dims();
        let (ph, pw) = self.config.required_padding(h, w);
        if ph == 0 && pw == 0 {
            return self.forward(s, &s.constant(i_low.clone()));
        }
        let out = self.forward(s, &s.constant(pad_bottom_right(i_low, ph, pw)))?;
        let crop = |v: &Var<'t>| -> Result<Var<'t>> { v.narrow(2, 0, h)?.narrow(3, 0, w) };
        Ok(ForwardOutput {
            output: crop(&out.output)?,
            prior: out.prior.as_ref().map(crop).transpose()?,
            lifted: crop(&out.lifted)?,
        })
    }

    /// Inference in 32-bit mode. Returns the enhanced image and, when UaD is
    /// enabled, its bottleneck entropy map (cropped to the unpadded extent).
    pub fn enhance(&self, i_low: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let tape = Tape::inference(Precision::F32);
        let s = Scope::eval(&tape, &self.store);
        let out = self.forward_padded(&s, i_low)?;
        let entropy = s.captured("uad.entropy").map(|e| {
            let d = self.config.divisor();
            let [n, _, h, w] = i_low.dims();
            let (eh, ew) = (h.div_ceil(d), w.div_ceil(d));
            Tensor::from_fn([n, 1, eh, ew], |b, _, y, x| e.at(b, 0, y, x))
        });
        Ok((out.output.value().clone(), entropy))
    }
}

/// Reflect-pads only the bottom and right edges.
pub fn pad_bottom_right(x: &Tensor, ph: usize, pw: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, h + ph, w + pw], |b, ch, y, xx| {
        x.at(b, ch, reflect_index(y as isize, h), reflect_index(xx as isize, w))
    })
}

fn build_layers(b: &mut Builder, config: &ModelConfig) -> Result<Layers> {
    let m = config.modules;
    let c0 = config.channels(0);
    let len = m.len.then(|| Len::build(b, c0));
    let stem = Conv2d::same(&mut b.sub("stem"), "conv", 3, c0, 3);
    let mut encoder = Vec::new();
    for i in 0..config.depth - 1 {
        let mut lb = b.sub(&format!("enc{i}"));
        let (ci, cn) = (config.channels(i), config.channels(i + 1));
        encoder.push(EncoderLevel {
            rem: ResBlock::build(&mut lb, "rem", ci),
            neco: m.neco.then(|| Neco::build(&mut lb, ci, config.neco)),
            down: Conv2d::build(&mut lb, "down", ci, cn, (3, 3), Padding::Reflect, 2, 1),
        });
    }
    let cb = config.channels(config.depth - 1);
    let bottleneck = ResBlock::build(&mut b.sub("bottleneck"), "rem", cb);
    let uad = m.uad.then(|| Uad::build(b, cb, config.uad, config.g2af));
    let mut decoder = Vec::new();
    for i in (0..config.depth - 1).rev() {
        let mut lb = b.sub(&format!("dec{i}"));
        let (ci, cn) = (config.channels(i), config.channels(i + 1));
        decoder.push(DecoderLevel {
            up: Conv2d::same(&mut lb, "up", cn, ci, 3),
            fuse: Conv2d::pointwise(&mut lb, "fuse", 2 * ci, ci),
            rem: ResBlock::build(&mut lb, "rem", ci),
            asc: if m.asc { Some(Asc::build(&mut lb, ci, config.asc)?) } else { None },
        });
    }
    let head = {
        let mut hb = b.sub("head");
        // a tenth of the usual bound keeps the initial output near the lifted input
        let weight = hb.uniform("weight", [3, c0, 3, 3], 0.1 / ((9 * c0) as f64).sqrt());
        let bias = hb.constant("bias", Tensor::zeros([1, 3, 1, 1]));
        Conv2d {
            weight,
            bias: Some(bias),
            opts: Default::default(),
            padding: Padding::Reflect,
            kernel: (3, 3),
        }
    };
    Ok(Layers { len, stem, encoder, bottleneck, uad, decoder, head })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"U2CW";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// In elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.store.len());
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    let mut offset = 0;
    for (name, t) in model.store.iter() {
        params.push(ManifestEntry { name: name.to_string(), shape: t.dims(), offset });
        offset += t.numel();
        for v in t.to_f32_vec() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader { config: model.config.clone(), params })?;
    let mut out = Vec::with_capacity(9 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses the header and returns it with the payload slice.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing U2CW magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_bytes =
        bytes.get(9..9 + hlen).ok_or_else(|| Error::Checkpoint("header extends past end of file".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[9 + hlen..];
    let mut expected = 0;
    for e in &header.params {
        if e.offset != expected {
            return Err(Error::Checkpoint(format!("manifest entry `{}` at offset {}, expected {expected}", e.name, e.offset)));
        }
        expected += e.shape.iter().product::<usize>();
    }
    if payload.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            expected * 4
        )));
    }
    Ok((header, payload))
}

/// Rebuilds the model described by the checkpoint header.
pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = parse_checkpoint(bytes)?;
    let mut model = Model::build(header.config).map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config builds {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let expected = model.store.get(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
        if expected.dims() != e.shape {
            return Err(Error::Checkpoint(format!("`{}` has shape {:?}, model expects {:?}", e.name, e.shape, expected.dims())));
        }
        let n: usize = e.shape.iter().product();
        let raw = &payload[e.offset * 4..(e.offset + n) * 4];
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        values.push((e.name.clone(), Tensor::from_f32(e.shape, &data)?));
    }
    for (name, t) in values {
        model.store.insert(name, t);
    }
    Ok(model)
}

pub fn load_checkpoint_any(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes)
}

/// Loads a checkpoint that must have been written for `config`; a mismatch
/// is reported before any parameter is copied.
pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_checkpoint(&bytes)?;
    if &header.config != config {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was written for {}, requested {}",
            serde_json::to_string(&header.config)?,
            serde_json::to_string(config)?
        )));
    }
    model_from_checkpoint_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fractions of `steps` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub flips: bool,
    pub seed: u64,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 2.5e-4,
            beta1: 0.95,
            beta2: 0.99,
            adam_eps: 1e-8,
            milestones: vec![0.6, 0.85],
            lr_decay: 0.5,
            batch_size: 1,
            crop: 32,
            flips: true,
            seed: 0,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| step >= (f * self.steps as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        TrainState { step: 0, m: IndexMap::new(), v: IndexMap::new(), beta1, beta2, eps }
    }

    /// One bias-corrected Adam update of every parameter that received a
    /// gradient.
    pub fn adam_step(&mut self, store: &mut ParamStore, grads: &crate::numerics::Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get(&name).expect("listed name").clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            *m = m.zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            *v = v.zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
            let (m, v) = (&self.m[&name], &self.v[&name]);
            let upd = m.zip_map(v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + self.eps))?;
            store.insert(name, p.zip_map(&upd, |p, u| p - u)?);
        }
        Ok(())
    }
}

/// One entry of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Generic optimisation loop: evaluates `step_loss` on a fresh 32-bit tape,
/// backpropagates, and applies Adam with the scheduled learning rate.
pub fn fit<F>(store: &mut ParamStore, config: &TrainConfig, mut step_loss: F) -> Result<Vec<StepRecord>>
where
    F: for<'t> FnMut(usize, &'t Tape, &ParamStore) -> Result<(Var<'t>, LossReport)>,
{
    let mut state = TrainState::new(config.beta1, config.beta2, config.adam_eps);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let tape = Tape::new(Precision::F32);
        let (loss, report) = match step_loss(step, &tape, store) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            other => other?,
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(&loss)?;
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let lr = config.lr_at(step);
        state.adam_step(store, &grads, lr)?;
        history.push(StepRecord { step, lr, loss: report });
    }
    Ok(history)
}

/// A low-light input with its reference.
#[derive(Clone, Debug)]
pub struct Pair {
    pub low: Image,
    pub high: Image,
}

/// `n` procedural scenes of `size x size` with synthetic degradations.
pub fn synthetic_dataset(n: usize, size: usize, seed: u64, degradation: Degradation) -> Result<Vec<Pair>> {
    (0..n as u64)
        .map(|i| {
            let high = imageio::procedural_scene(size, size, seed.wrapping_mul(1000).wrapping_add(i));
            let low = imageio::synth_lowlight(&high, degradation, seed.wrapping_mul(1000).wrapping_add(i) ^ 0x5EED)?;
            Ok(Pair { low, high })
        })
        .collect()
}

/// LEN target `(Y_high - Y_low) / Y_high` for a batch.
pub fn len_target(low: &Tensor, high: &Tensor) -> Result<Tensor> {
    luminance_diff_target(&rgb_to_ycrcb(high)?.y, &rgb_to_ycrcb(low)?.y)
}

/// Total loss of a model forward; a disabled LEN contributes a zero term.
pub fn model_loss<'t>(
    model: &Model,
    s: &Scope<'_, 't>,
    objective: &Objective,
    low: &Tensor,
    high: &Tensor,
) -> Result<(Var<'t>, LossReport)> {
    let out = model.forward_padded(s, low)?;
    let gt = s.constant(high.clone());
    let target = s.constant(len_target(low, high)?);
    let prior = out.prior.unwrap_or_else(|| target.clone());
    objective.total_loss(&out.output, &gt, &prior, &target)
}

/// Trains in place and returns one record per step.
pub fn train_toy(model: &mut Model, data: &[Pair], config: &TrainConfig) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    model.check_extents(config.crop, config.crop)?;
    let objective = Objective::new(config.objective)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = std::mem::take(&mut model.store);
    let layout: &Model = model;
    let result = fit(&mut store, config, |step, tape, params| {
        let mut lows = Vec::with_capacity(config.batch_size);
        let mut highs = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pair = &data[rng.random_range(0..data.len())];
            let (l, h) = crop_flip_augment(&pair.low, &pair.high, config.crop, config.flips, rng.random())?;
            lows.push(l.to_tensor());
            highs.push(h.to_tensor());
        }
        let (low, high) = (Tensor::stack(&lows)?, Tensor::stack(&highs)?);
        let mode = Mode::Train { seed: config.seed ^ (step as u64).wrapping_mul(0x2545_F491_4F6C_DD1D) };
        let s = Scope::new(tape, params, mode);
        model_loss(layout, &s, &objective, &low, &high)
    });
    model.store = store;
    result
}

/// Mean loss terms and quality metrics over a set of pairs, in eval mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: LossReport,
    pub psnr_input: f64,
    pub psnr_output: f64,
    pub ssim_output: f64,
}

pub fn evaluate(model: &Model, data: &[Pair], objective: &Objective) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut sum = EvalSummary::default();
    for pair in data {
        let (low, high) = (pair.low.to_tensor(), pair.high.to_tensor());
        let tape = Tape::inference(Precision::F32);
        let s = Scope::eval(&tape, &model.store);
        let (out, report) = {
            let fwd = model.forward_padded(&s, &low)?;
            let gt = s.constant(high.clone());
            let target = s.constant(len_target(&low, &high)?);
            let prior = fwd.prior.clone().unwrap_or_else(|| target.clone());
            let (_, report) = objective.total_loss(&fwd.output, &gt, &prior, &target)?;
            (fwd.output.value().clone(), report)
        };
        let l = &mut sum.loss;
        for (acc, v) in [
            (&mut l.mse, report.mse),
            (&mut l.ssim, report.ssim),
            (&mut l.per, report.per),
            (&mut l.global, report.global),
            (&mut l.color, report.color),
            (&mut l.grad, report.grad),
            (&mut l.len, report.len),
            (&mut l.total, report.total),
        ] {
            *acc += v;
        }
        sum.psnr_input += psnr(&low, &high)?;
        sum.psnr_output += psnr(&out, &high)?;
        sum.ssim_output += ssim_metric(&out, &high)?;
    }
    let n = data.len() as f64;
    let l = &mut sum.loss;
    for v in [&mut l.mse, &mut l.ssim, &mut l.per, &mut l.global, &mut l.color, &mut l.grad, &mut l.len, &mut l.total] {
        *v /= n;
    }
    sum.psnr_input /= n;
    sum.psnr_output /= n;
    sum.ssim_output /= n;
    Ok(sum)
}

/// Losses and metrics around one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Over the training pairs, before the first step.
    pub initial: EvalSummary,
    /// Over the training pairs, after the last step.
    pub final_train: EvalSummary,
    pub heldout: Option<EvalSummary>,
}

/// Evaluates on `train`, trains, then evaluates on `train` and `heldout`
/// (skipped when empty). All evaluations run in eval mode.
pub fn train_and_evaluate(
    model: &mut Model,
    train: &[Pair],
    heldout: &[Pair],
    config: &TrainConfig,
) -> Result<(Vec<StepRecord>, RunSummary)> {
    let objective = Objective::new(config.objective)?;
    let initial = evaluate(model, train, &objective)?;
    let history = train_toy(model, train, config)?;
    let final_train = evaluate(model, train, &objective)?;
    let heldout = if heldout.is_empty() { None } else { Some(evaluate(model, heldout, &objective)?) };
    let steps = history.len();
    Ok((history, RunSummary { steps, initial, final_train, heldout }))
}

/// Entropy-scale gradient diagnostic of the whole model under the plain
/// MSE term on one pair, at each of `scales`.
pub fn entropy_scale_sweep(model: &Model, low: &Tensor, high: &Tensor, scales: &[f64]) -> Result<Vec<EntropyGradientReport>> {
    if model.layers.uad.is_none() {
        return Err(Error::invalid("model has UaD disabled"));
    }
    let weights = LossWeights { mse: 1.0, ..LossWeights::zero() };
    let objective = Objective::new(ObjectiveConfig { weights, ..ObjectiveConfig::default() })?;
    let value_path = model.value_path_params();
    scales
        .iter()
        .map(|&scale| {
            entropy_gradient_diagnostic(
                &model.store,
                "uad.",
                &value_path,
                |t, st, sc| {
                    let mut s = Scope::eval(t, st);
                    s.entropy_scale = sc;
                    Ok(model_loss(model, &s, &objective, low, high)?.0)
                },
                scale,
            )
        })
        .collect()
}
