//! Parameter registration and the small layer vocabulary shared by the
//! model modules.

use std::cell::{Cell, RefCell};

use indexmap::IndexMap;

use crate::error::Result;
use crate::numerics::{ConvOpts, GatherIndex, Initializer, ParamStore, Tape, Tensor, Var};

/// Registers named parameters under a dotted prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Initializer,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Initializer) -> Self {
        Builder { store, init, prefix: String::new() }
    }

    /// A child builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.name(name);
        Builder { store: self.store, init: self.init, prefix }
    }

    pub fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    /// `U(-bound, bound)` initialised parameter; returns its full name.
    pub fn uniform(&mut self, local: &str, shape: [usize; 4], bound: f64) -> String {
        let name = self.name(local);
        let value = self.init.uniform(shape, bound);
        self.store.insert(name.clone(), value);
        name
    }

    pub fn uniform_range(&mut self, local: &str, shape: [usize; 4], lo: f64, hi: f64) -> String {
        let name = self.name(local);
        let value = self.init.uniform_range(shape, lo, hi);
        self.store.insert(name.clone(), value);
        name
    }

    pub fn constant(&mut self, local: &str, value: Tensor) -> String {
        let name = self.name(local);
        self.store.insert(name.clone(), value);
        name
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; each dropout call derives its mask seed from `seed`.
    Train { seed: u64 },
}

/// Everything a forward pass reads besides its input: the tape, parameter
/// values, mode, and diagnostic hooks.
pub struct Scope<'a, 't> {
    pub tape: &'t Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// Multiplies the entropy map before it is embedded (1.0 when `None`).
    pub entropy_scale: Option<f64>,
    /// Reuse recorded neighbour selections instead of recomputing them.
    pub freeze_selection: bool,
    dropout_calls: Cell<u64>,
    captures: RefCell<IndexMap<String, Tensor>>,
    selections: RefCell<IndexMap<String, GatherIndex>>,
}

impl<'a, 't> Scope<'a, 't> {
    pub fn new(tape: &'t Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Scope {
            tape,
            store,
            mode,
            entropy_scale: None,
            freeze_selection: false,
            dropout_calls: Cell::new(0),
            captures: RefCell::new(IndexMap::new()),
            selections: RefCell::new(IndexMap::new()),
        }
    }

    pub fn eval(tape: &'t Tape, store: &'a ParamStore) -> Self {
        Self::new(tape, store, Mode::Eval)
    }

    pub fn with_selections(mut self, selections: IndexMap<String, GatherIndex>) -> Self {
        self.selections = RefCell::new(selections);
        self.freeze_selection = true;
        self
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        self.tape.param(self.store, name)
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn dropout(&self, x: &Var<'t>, p: f64) -> Result<Var<'t>> {
        match self.mode {
            Mode::Eval => x.dropout(p, 0, false),
            Mode::Train { seed } => {
                let call = self.dropout_calls.get();
                self.dropout_calls.set(call + 1);
                x.dropout(p, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(call), true)
            }
        }
    }

    /// Stores a copy of an intermediate tensor under `key` (last write wins).
    pub fn capture(&self, key: &str, value: &Tensor) {
        self.captures.borrow_mut().insert(key.to_string(), value.clone());
    }

    pub fn captured(&self, key: &str) -> Option<Tensor> {
        self.captures.borrow().get(key).cloned()
    }

    /// Returns the recorded selection for `key` when frozen, otherwise runs
    /// `compute` and records its result.
    pub fn selection(&self, key: &str, compute: impl FnOnce() -> Result<GatherIndex>) -> Result<GatherIndex> {
        if self.freeze_selection {
            if let Some(gi) = self.selections.borrow().get(key) {
                return Ok(gi.clone());
            }
        }
        let gi = compute()?;
        self.selections.borrow_mut().insert(key.to_string(), gi.clone());
        Ok(gi)
    }

    pub fn selections(&self) -> IndexMap<String, GatherIndex> {
        self.selections.borrow().clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Reflection padding of `k/2` on each side (size preserving for odd k).
    Reflect,
    /// Zero padding per axis.
    Zero(usize, usize),
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub opts: ConvOpts,
    pub padding: Padding,
    pub kernel: (usize, usize),
}

impl Conv2d {
    /// Full convolution, `U(±1/√fan_in)` weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: Padding,
        stride: usize,
        groups: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let fan_in = (cin / groups) * kernel.0 * kernel.1;
        let weight = b.uniform("weight", [cout, cin / groups, kernel.0, kernel.1], 1.0 / (fan_in as f64).sqrt());
        let bias = Some(b.constant("bias", Tensor::zeros([1, cout, 1, 1])));
        let pad = match padding {
            Padding::Reflect => (0, 0),
            Padding::Zero(ph, pw) => (ph, pw),
        };
        let opts = ConvOpts { stride: (stride, stride), pad, groups };
        Conv2d { weight, bias, opts, padding, kernel }
    }

    /// Size-preserving `k x k` convolution with reflection padding.
    pub fn same(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::build(b, name, cin, cout, (k, k), Padding::Reflect, 1, 1)
    }

    /// Size-preserving depthwise `k x k` convolution with reflection padding.
    pub fn depthwise(b: &mut Builder, name: &str, channels: usize, k: usize) -> Self {
        Self::build(b, name, channels, channels, (k, k), Padding::Reflect, 1, channels)
    }

    /// Per-pixel channel mixing without a bias term.
    pub fn pointwise_linear(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let mut b = b.sub(name);
        let weight = b.uniform("weight", [cout, cin, 1, 1], 1.0 / (cin as f64).sqrt());
        Conv2d { weight, bias: None, opts: ConvOpts::default(), padding: Padding::Zero(0, 0), kernel: (1, 1) }
    }

    /// Per-pixel channel mixing.
    pub fn pointwise(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self::build(b, name, cin, cout, (1, 1), Padding::Zero(0, 0), 1, 1)
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let w = s.param(&self.weight)?;
        let bias = match &self.bias {
            Some(name) => Some(s.param(name)?),
            None => None,
        };
        let x = match self.padding {
            Padding::Reflect => x.pad_reflect(self.kernel.0 / 2, self.kernel.1 / 2)?,
            Padding::Zero(..) => x.clone(),
        };
        x.conv2d(&w, bias.as_ref(), self.opts)
    }
}

/// Residual block `x + Conv(ReLU(Conv(x)))` with 3x3 reflect-padded convs.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn build(b: &mut Builder, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        ResBlock {
            conv1: Conv2d::same(&mut b, "conv1", channels, channels, 3),
            conv2: Conv2d::same(&mut b, "conv2", channels, channels, 3),
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(s, x)?.relu();
        x.add(&self.conv2.forward(s, &h)?)
    }
}

/// Normalisation over the channel axis at every pixel, with per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: String,
    pub beta: String,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn build(b: &mut Builder, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        ChannelNorm {
            gamma: b.constant("gamma", Tensor::ones([1, channels, 1, 1])),
            beta: b.constant("beta", Tensor::zeros([1, channels, 1, 1])),
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let centred = x.sub(&x.mean_axes(&[1]))?;
        let std = centred.square().mean_axes(&[1]).add_scalar(Self::EPS).sqrt();
        centred.div(&std)?.mul(&s.param(&self.gamma)?)?.add(&s.param(&self.beta)?)
    }
}
