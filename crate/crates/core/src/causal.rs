//! Causal context modules. NeCo scans encoder features with a diagonal
//! state-space recurrence in four directions, each with its own learned
//! offset. AsC re-weights each pixel's nearest feature-space neighbours in
//! the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::EPS_DIV;
use crate::nn::{Builder, ChannelNorm, Conv2d, Padding, Scope};
use crate::numerics::ops::reflect_index;
use crate::numerics::{concat, GatherIndex, Tensor, Var};

/// Scan directions: rows forward, rows backward, columns forward, columns
/// backward. Row `p` of `tau` belongs to direction `p`.
pub const DIRECTIONS: usize = 4;

/// Names of the per-channel recurrence coefficients.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `A_bar = tanh(a_raw)`, which keeps `|A_bar| < 1`.
    pub a_raw: String,
    pub b_bar: String,
    pub c_out: String,
    pub d_skip: String,
    /// `[4, dim, 1, 1]`.
    pub tau: String,
}

impl SsmParams {
    pub fn build(b: &mut Builder, dim: usize) -> Self {
        let mut b = b.sub("ssm");
        SsmParams {
            a_raw: b.uniform_range("a_raw", [1, dim, 1, 1], 0.5, 1.5),
            b_bar: b.uniform_range("b_bar", [1, dim, 1, 1], 0.5, 1.0),
            c_out: b.uniform("c_out", [1, dim, 1, 1], 1.0),
            d_skip: b.uniform("d_skip", [1, dim, 1, 1], 1.0),
            tau: b.uniform("tau", [DIRECTIONS, dim, 1, 1], 0.1),
        }
    }

    pub fn vars<'t>(&self, s: &Scope<'_, 't>) -> Result<SsmVars<'t>> {
        SsmVars::new(
            s.param(&self.a_raw)?.tanh(),
            s.param(&self.b_bar)?,
            s.param(&self.c_out)?,
            s.param(&self.d_skip)?,
            s.param(&self.tau)?,
        )
    }
}

/// Recurrence coefficients on a tape, `A_bar` already squashed.
#[derive(Clone)]
pub struct SsmVars<'t> {
    pub a_bar: Var<'t>,
    pub b_bar: Var<'t>,
    pub c_out: Var<'t>,
    pub d_skip: Var<'t>,
    pub tau: Var<'t>,
}

impl<'t> SsmVars<'t> {
    pub fn new(a_bar: Var<'t>, b_bar: Var<'t>, c_out: Var<'t>, d_skip: Var<'t>, tau: Var<'t>) -> Result<Self> {
        let dim = a_bar.dims()[1];
        for (name, v) in [("b_bar", &b_bar), ("c_out", &c_out), ("d_skip", &d_skip)] {
            if v.dims() != [1, dim, 1, 1] || a_bar.dims() != [1, dim, 1, 1] {
                return Err(Error::shape(format!("{name} {:?} vs a_bar {:?}", v.shape(), a_bar.shape())));
            }
        }
        if tau.dims() != [DIRECTIONS, dim, 1, 1] {
            return Err(Error::shape(format!("tau must be [4, {dim}, 1, 1], got {:?}", tau.shape())));
        }
        Ok(SsmVars { a_bar, b_bar, c_out, d_skip, tau })
    }

    pub fn dim(&self) -> usize {
        self.a_bar.dims()[1]
    }

    pub fn tau_row(&self, direction: usize) -> Result<Var<'t>> {
        if direction >= DIRECTIONS {
            return Err(Error::invalid(format!("direction {direction} not in 0..4")));
        }
        self.tau.narrow(0, direction, 1)
    }
}

/// Diagonal linear recurrence along the last axis of `v: [N,E,L,T]`, one
/// coefficient set per channel `E`:
///
/// `h_t = a h_{t-1} + b v_t`, `y_t = c h_t + d v_t`, `h_0 = 0`.
///
/// Every `(n, e, l)` line is an independent sequence. The backward pass runs
/// the adjoint recurrence `λ_t = c g_t + a λ_{t+1}` in reverse.
pub fn scan_lines<'t>(v: &Var<'t>, a: &Var<'t>, b: &Var<'t>, c: &Var<'t>, d: &Var<'t>) -> Result<Var<'t>> {
    let [n, e, l, t] = v.dims();
    for p in [a, b, c, d] {
        if p.dims() != [1, e, 1, 1] {
            return Err(Error::shape(format!("scan coefficient {:?} for input {:?}", p.shape(), v.shape())));
        }
    }
    let av = a.value().to_vec();
    let bv = b.value().to_vec();
    let cv = c.value().to_vec();
    let dv = d.value().to_vec();
    let x = v.value().clone();
    let xd = x.data();
    let mut h = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for line in 0..n * e * l {
        let ch = (line / l) % e;
        let mut state = 0.0;
        for i in line * t..(line + 1) * t {
            state = av[ch] * state + bv[ch] * xd[i];
            h[i] = state;
            y[i] = cv[ch] * state + dv[ch] * xd[i];
        }
    }
    let value = Tensor::from_vec(v.shape(), y)?;
    let in_shape = v.shape();
    Ok(v.tape().record("ssm_scan", value, &[v, a, b, c, d], move |g| {
        let gy = g.data();
        let xd = x.data();
        let mut gx = vec![0.0; xd.len()];
        let (mut ga, mut gb, mut gc, mut gd) = (vec![0.0; e], vec![0.0; e], vec![0.0; e], vec![0.0; e]);
        for line in 0..n * e * l {
            let ch = (line / l) % e;
            let start = line * t;
            let mut lambda = 0.0;
            for i in (start..start + t).rev() {
                lambda = cv[ch] * gy[i] + av[ch] * lambda;
                let h_prev = if i > start { h[i - 1] } else { 0.0 };
                ga[ch] += lambda * h_prev;
                gb[ch] += lambda * xd[i];
                gc[ch] += gy[i] * h[i];
                gd[ch] += gy[i] * xd[i];
                gx[i] = dv[ch] * gy[i] + bv[ch] * lambda;
            }
        }
        let coef = |v: Vec<f64>| Tensor::new_unchecked([1, e, 1, 1].into(), v);
        vec![Tensor::new_unchecked(in_shape, gx), coef(ga), coef(gb), coef(gc), coef(gd)]
    }))
}

/// One sequence `seq: [1,1,T,dim]` (time along rows) scanned in the given
/// order with offset row `direction`.
pub fn ssm_scan_1d<'t>(seq: &Var<'t>, vars: &SsmVars<'t>, direction: usize) -> Result<Var<'t>> {
    let [n, c, _, dim] = seq.dims();
    if n != 1 || c != 1 || dim != vars.dim() {
        return Err(Error::shape(format!("expected [1,1,T,{}], got {:?}", vars.dim(), seq.shape())));
    }
    let lines = seq.permute([0, 3, 1, 2])?.add(&vars.tau_row(direction)?)?;
    let y = scan_lines(&lines, &vars.a_bar, &vars.b_bar, &vars.c_out, &vars.d_skip)?;
    y.permute([0, 2, 3, 1])
}

/// Scan of `f: [N,E,H,W]` in one direction (see [`DIRECTIONS`]), returned in
/// the original layout.
pub fn scan_direction<'t>(f: &Var<'t>, vars: &SsmVars<'t>, direction: usize) -> Result<Var<'t>> {
    let v = f.add(&vars.tau_row(direction)?)?;
    let oriented = match direction {
        0 => v,
        1 => v.flip(3)?,
        2 => v.permute([0, 1, 3, 2])?,
        _ => v.permute([0, 1, 3, 2])?.flip(3)?,
    };
    let y = scan_lines(&oriented, &vars.a_bar, &vars.b_bar, &vars.c_out, &vars.d_skip)?;
    match direction {
        0 => Ok(y),
        1 => y.flip(3),
        2 => y.permute([0, 1, 3, 2]),
        _ => y.flip(3)?.permute([0, 1, 3, 2]),
    }
}

/// Mean of the four directional scans. Each row (or column) is its own
/// sequence.
pub fn scan_2d<'t>(f: &Var<'t>, vars: &SsmVars<'t>) -> Result<Var<'t>> {
    if f.dims()[1] != vars.dim() {
        return Err(Error::shape(format!("scan over {:?} with {} channels", f.shape(), vars.dim())));
    }
    let mut acc = scan_direction(f, vars, 0)?;
    for p in 1..DIRECTIONS {
        acc = acc.add(&scan_direction(f, vars, p)?)?;
    }
    Ok(acc.scale(1.0 / DIRECTIONS as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NecoConfig {
    /// Inner width of the scan branch as a multiple of the input channels.
    pub expand: usize,
}

impl Default for NecoConfig {
    fn default() -> Self {
        NecoConfig { expand: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct Neco {
    pub near_conv: Conv2d,
    pub in_proj: Conv2d,
    pub dw_conv: Conv2d,
    pub ssm: SsmParams,
    pub norm: ChannelNorm,
    pub gate: Conv2d,
    pub out_proj: Conv2d,
}

impl Neco {
    pub fn build(b: &mut Builder, channels: usize, config: NecoConfig) -> Self {
        let mut b = b.sub("neco");
        let inner = channels * config.expand.max(1);
        Neco {
            near_conv: Conv2d::depthwise(&mut b, "near_conv", channels, 3),
            in_proj: Conv2d::pointwise(&mut b, "in_proj", channels, inner),
            dw_conv: Conv2d::depthwise(&mut b, "dw_conv", inner, 3),
            ssm: SsmParams::build(&mut b, inner),
            norm: ChannelNorm::build(&mut b, "norm", inner),
            gate: Conv2d::pointwise(&mut b, "gate", channels, inner),
            out_proj: Conv2d::pointwise(&mut b, "out_proj", inner, channels),
        }
    }

    /// `Linear(Norm(scan(SiLU(DwConv(Linear(NearConv(F)))))) ⊗ SiLU(Linear(F)))`.
    pub fn forward<'t>(&self, s: &Scope<'_, 't>, f: &Var<'t>) -> Result<Var<'t>> {
        let x = self.near_conv.forward(s, f)?;
        let x = self.dw_conv.forward(s, &self.in_proj.forward(s, &x)?)?.silu();
        let scanned = scan_2d(&x, &self.ssm.vars(s)?)?;
        s.tape.check_finite("neco.scan")?;
        let branch1 = self.norm.forward(s, &scanned)?;
        let branch2 = self.gate.forward(s, f)?.silu();
        let out = self.out_proj.forward(s, &branch1.mul(&branch2)?)?;
        s.tape.check_finite("neco.out")?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscConfig {
    pub k: usize,
    pub patch: usize,
}

impl Default for AscConfig {
    fn default() -> Self {
        AscConfig { k: 8, patch: 5 }
    }
}

impl AscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.patch < 3 {
            return Err(Error::invalid(format!("AsC patch must be odd and at least 3, got {}", self.patch)));
        }
        if self.k == 0 || self.k >= self.patch * self.patch {
            return Err(Error::invalid(format!(
                "AsC k must be in 1..{}, got {}",
                self.patch * self.patch,
                self.k
            )));
        }
        Ok(())
    }

    pub fn centre(&self) -> usize {
        (self.patch * self.patch - 1) / 2
    }
}

/// Candidate distances `‖F(q) - F(p)‖₂` over channels for every pixel `p`
/// and every candidate `q` of its reflect-padded window, divided by the
/// pixel's largest candidate distance plus `EPS_DIV`.
///
/// Shape `[N, 1, patch², H*W]`, candidate order as in `unfold`.
pub fn normalized_distances(x: &Tensor, patch: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let r = (patch / 2) as isize;
    let k2 = patch * patch;
    let hw = h * w;
    let mut out = vec![0.0; n * k2 * hw];
    let mut dist = vec![0.0; k2];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for (j, d) in dist.iter_mut().enumerate() {
                    let sy = reflect_index(y as isize + (j / patch) as isize - r, h);
                    let sx = reflect_index(xx as isize + (j % patch) as isize - r, w);
                    *d = (0..c).map(|ch| (x.at(b, ch, sy, sx) - x.at(b, ch, y, xx)).powi(2)).sum::<f64>().sqrt();
                }
                let max = dist.iter().fold(0.0f64, |m, &v| m.max(v));
                let p = y * w + xx;
                for (j, d) in dist.iter().enumerate() {
                    out[(b * k2 + j) * hw + p] = d / (max + EPS_DIV);
                }
            }
        }
    }
    Tensor::new_unchecked([n, 1, k2, hw].into(), out)
}

/// The `k` nearest non-centre candidates of every pixel, nearest first;
/// equal distances keep ascending candidate order.
pub fn select_neighbors(x: &Tensor, config: AscConfig) -> Result<GatherIndex> {
    config.validate()?;
    let [n, _, h, w] = x.dims();
    let hw = h * w;
    let k2 = config.patch * config.patch;
    let centre = config.centre();
    let dist = normalized_distances(x, config.patch);
    let dd = dist.data();
    let mut idx = Vec::with_capacity(n * hw * config.k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(config.k + 1);
    for b in 0..n {
        for p in 0..hw {
            best.clear();
            for j in (0..k2).filter(|&j| j != centre) {
                let d = dd[(b * k2 + j) * hw + p];
                if best.len() == config.k && d >= best[config.k - 1].0 {
                    continue;
                }
                let at = best.iter().position(|&(bd, _)| d < bd).unwrap_or(best.len());
                best.insert(at, (d, j));
                best.truncate(config.k);
            }
            idx.extend(best.iter().map(|&(_, j)| j));
        }
    }
    Ok(GatherIndex { batch: n, positions: hw, k: config.k, idx })
}

#[derive(Clone, Debug)]
pub struct Asc {
    pub csco: Conv2d,
    pub cluster1: Conv2d,
    pub cluster2: Conv2d,
    pub fuse: Conv2d,
    pub config: AscConfig,
    /// Parameter prefix; also the key of this module's neighbour selection
    /// in [`Scope::selection`].
    pub name: String,
}

impl Asc {
    pub fn build(b: &mut Builder, channels: usize, config: AscConfig) -> Result<Self> {
        config.validate()?;
        let name = b.name("asc");
        let mut b = b.sub("asc");
        // kernel 3 along the neighbour axis, 1 along positions
        let along_neighbors = |b: &mut Builder, n: &str, cin| {
            Conv2d::build(b, n, cin, channels, (3, 1), Padding::Zero(1, 0), 1, 1)
        };
        Ok(Asc {
            csco: Conv2d::pointwise_linear(&mut b, "csco", channels, channels),
            cluster1: along_neighbors(&mut b, "cluster1", 2 * channels),
            cluster2: along_neighbors(&mut b, "cluster2", channels),
            fuse: Conv2d::pointwise(&mut b, "fuse", 2 * channels, channels),
            config,
            name,
        })
    }

    /// Captures the neighbour weights `[N,C,k,H*W]` as `"{name}.cluster"`.
    pub fn forward<'t>(&self, s: &Scope<'_, 't>, f: &Var<'t>) -> Result<Var<'t>> {
        let [n, c, h, w] = f.dims();
        let k = self.config.k;
        let gi = s.selection(&self.name, || select_neighbors(f.value(), self.config))?;
        if gi.k != k {
            return Err(Error::shape(format!("selection has k = {}, module expects {k}", gi.k)));
        }
        let centre = f.reshape([n, c, 1, h * w])?;
        let diffs = f.unfold(self.config.patch)?.gather_candidates(&gi)?.sub(&centre)?;
        let norm = diffs.square().sum_axes(&[1]).add_scalar(EPS_DIV).sqrt();
        let neighbor = self.csco.forward(s, &diffs.div(&norm)?)?;
        let paired = concat(&[&centre.broadcast_to([n, c, k, h * w])?, &neighbor], 1)?;
        let hidden = self.cluster1.forward(s, &paired)?.relu();
        let cluster = self.cluster2.forward(s, &hidden)?.sigmoid();
        s.capture(&format!("{}.cluster", self.name), cluster.value());
        let relation = cluster.mul(&neighbor)?.sum_axes(&[2]).reshape([n, c, h, w])?;
        let out = self.fuse.forward(s, &concat(&[&relation, f], 1)?)?;
        s.tape.check_finite("asc")?;
        Ok(out)
    }
}
