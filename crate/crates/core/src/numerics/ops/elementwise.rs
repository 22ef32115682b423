use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Shape, Tensor};

/// Strides for reading `input` while iterating over the broadcast shape `out`.
pub(crate) fn bcast_strides(input: Shape, out: Shape) -> [usize; 4] {
    let s = input.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if input.0[i] == 1 && out.0[i] != 1 { 0 } else { s[i] };
    }
    r
}

/// Visits every index of `out` with the matching offsets into two broadcast inputs.
#[inline]
pub(crate) fn for_each_bcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums a gradient of broadcast shape back down to `target`.
pub(crate) fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let st = bcast_strides(target, g.shape());
    let mut acc = vec![0.0; target.numel()];
    let gd = g.data();
    for_each_bcast(g.shape(), st, st, |o, it, _| acc[it] += gd[o]);
    Tensor::new_unchecked(target, acc)
}

/// Broadcasts `t` up to `shape` (which must be a valid broadcast target).
pub(crate) fn expand(t: &Tensor, shape: Shape) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let st = bcast_strides(t.shape(), shape);
    let mut out = vec![0.0; shape.numel()];
    let td = t.data();
    for_each_bcast(shape, st, st, |o, i, _| out[o] = td[i]);
    Tensor::new_unchecked(shape, out)
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let out = Shape::broadcast(a.shape(), b.shape())?;
        let sa = bcast_strides(a.shape(), out);
        let sb = bcast_strides(b.shape(), out);
        let mut data = vec![0.0; out.numel()];
        {
            let (ad, bd) = (a.data(), b.data());
            for_each_bcast(out, sa, sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        }
        let value = Tensor::new_unchecked(out, data);
        Ok(self.tape().record(op, value, &[self, other], move |g| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for_each_bcast(out, sa, sb, |o, ia, ib| {
                ga[ia] += gd[o] * dfa(ad[ia], bd[ib]);
                gb[ib] += gd[o] * dfb(ad[ia], bd[ib]);
            });
            vec![Tensor::new_unchecked(a.shape(), ga), Tensor::new_unchecked(b.shape(), gb)]
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value().clone();
        let y = x.map(f);
        let y_saved = y.clone();
        self.tape().record(op, y, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Tensor::new_unchecked(g.shape(), data)]
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input lies inside
    /// the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Inverted dropout. In eval mode (`train == false`) or with `p == 0` this
    /// is the identity; otherwise each element is zeroed with probability `p`
    /// and survivors are scaled by `1/(1-p)`. The mask is a pure function of
    /// `seed`.
    pub fn dropout(&self, p: f64, seed: u64, train: bool) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value().numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new_unchecked(self.shape(), mask);
        let m = self.tape().constant(mask);
        let out = self.mul(&m)?;
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
