//! Luminance enhancement front-end: predicts a per-pixel brightness prior
//! from the low-light image and uses it to lift the luma channel.

use crate::error::{Error, Result};
use crate::imageio::{EPS_DIV, LUMA};
use crate::nn::{Builder, Conv2d, ResBlock, Scope};
use crate::numerics::{Tensor, Var};

/// Largest prior value used when inverting it; bounds amplification at 100x.
pub const PRIOR_CLAMP: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct Len {
    pub proj: Conv2d,
    pub depthwise: Conv2d,
    pub rems: Vec<ResBlock>,
    pub head: Conv2d,
}

impl Len {
    pub fn build(b: &mut Builder, channels: usize) -> Self {
        let mut b = b.sub("len");
        Len {
            proj: Conv2d::pointwise(&mut b, "proj", 3, channels),
            depthwise: Conv2d::depthwise(&mut b, "depthwise", channels, 3),
            rems: (0..3).map(|i| ResBlock::build(&mut b, &format!("rem{i}"), channels)).collect(),
            head: Conv2d::pointwise(&mut b, "head", channels, 1),
        }
    }

    /// `σ(Conv(ReLU(ReM×3(DepthConv(Conv1x1(I_low))))))`, shape `[N,1,H,W]`.
    pub fn forward<'t>(&self, s: &Scope<'_, 't>, i_low: &Var<'t>) -> Result<Var<'t>> {
        if i_low.dims()[1] != 3 {
            return Err(Error::shape(format!("LEN expects RGB input, got {:?}", i_low.shape())));
        }
        let mut x = self.proj.forward(s, i_low)?;
        s.tape.check_finite("len.layer0")?;
        x = self.depthwise.forward(s, &x)?;
        s.tape.check_finite("len.layer1")?;
        for (i, rem) in self.rems.iter().enumerate() {
            x = rem.forward(s, &x)?;
            s.tape.check_finite(&format!("len.layer{}", i + 2))?;
        }
        let prior = self.head.forward(s, &x.relu())?.sigmoid();
        s.tape.check_finite("len.layer5")?;
        Ok(prior)
    }
}

/// Mean squared error between the prior and the luminance-difference target.
pub fn len_loss<'t>(prior: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    if prior.shape() != target.shape() {
        return Err(Error::shape(format!("len_loss {:?} vs {:?}", prior.shape(), target.shape())));
    }
    Ok(prior.sub(target)?.square().mean_all())
}

/// Luma `0.299R + 0.587G + 0.114B` as a `[N,1,H,W]` var.
pub fn luma<'t>(rgb: &Var<'t>) -> Result<Var<'t>> {
    let w = rgb.tape().constant(Tensor::from_vec([1, 3, 1, 1], LUMA.to_vec())?);
    Ok(rgb.mul(&w)?.sum_axes(&[1]))
}

/// Lifts luma to `Y / (1 - min(p, 0.99) + ε)` with chroma held fixed.
///
/// With Cr and Cb unchanged the YCrCb inverse adds the luma change to every
/// RGB channel, so the round trip reduces to `RGB + (Y' - Y)`, then clamps.
pub fn apply_luminance_prior<'t>(i_low: &Var<'t>, prior: &Var<'t>) -> Result<Var<'t>> {
    let y = luma(i_low)?;
    let denom = prior.clamp(0.0, PRIOR_CLAMP).neg().add_scalar(1.0 + EPS_DIV);
    let lifted = y.div(&denom)?;
    Ok(i_low.add(&lifted.sub(&y)?)?.clamp(0.0, 1.0))
}
