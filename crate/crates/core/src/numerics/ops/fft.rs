//! Centre-shifted 2-D DFT over the spatial axes.
//!
//! `fft2` places the zero frequency at index `(H/2, W/2)` (integer division),
//! the same convention as `fftshift`; `ifft2` undoes the shift before the
//! inverse transform.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::numerics::ops::shape::concat;
use crate::numerics::tape::Var;
use crate::numerics::tensor::{ComplexTensor, Shape, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place unnormalised 2-D transform of one `h x w` plane.
fn transform_plane(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let row = plan(w, inverse);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = plan(h, inverse);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
}

/// Circular shift of a plane by `(dy, dx)`: `out[(y+dy)%h][(x+dx)%w] = in[y][x]`.
fn roll_plane(buf: &[Complex<f64>], h: usize, w: usize, dy: usize, dx: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + dy) % h) * w + (x + dx) % w] = buf[y * w + x];
        }
    }
    out
}

fn fftshift(buf: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    roll_plane(buf, h, w, h / 2, w / 2)
}

fn ifftshift(buf: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    roll_plane(buf, h, w, h - h / 2, w - w / 2)
}

/// Applies `f` to every `(n, c)` plane of a complex field given as two real
/// tensors, returning the result as two real tensors.
fn map_planes(
    re: &Tensor,
    im: Option<&Tensor>,
    f: impl Fn(Vec<Complex<f64>>, usize, usize) -> Vec<Complex<f64>>,
) -> (Tensor, Tensor) {
    let shape = re.shape();
    let [n, c, h, w] = shape.0;
    let plane = h * w;
    let mut out_re = Vec::with_capacity(shape.numel());
    let mut out_im = Vec::with_capacity(shape.numel());
    for p in 0..n * c {
        let r = &re.data()[p * plane..(p + 1) * plane];
        let buf: Vec<Complex<f64>> = match im {
            Some(im) => {
                let i = &im.data()[p * plane..(p + 1) * plane];
                r.iter().zip(i).map(|(&a, &b)| Complex::new(a, b)).collect()
            }
            None => r.iter().map(|&a| Complex::new(a, 0.0)).collect(),
        };
        for z in f(buf, h, w) {
            out_re.push(z.re);
            out_im.push(z.im);
        }
    }
    (Tensor::new_unchecked(shape, out_re), Tensor::new_unchecked(shape, out_im))
}

fn forward_shifted(buf: Vec<Complex<f64>>, h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf = buf;
    transform_plane(&mut buf, h, w, false);
    fftshift(&buf, h, w)
}

fn inverse_unshifted(buf: Vec<Complex<f64>>, h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf = ifftshift(&buf, h, w);
    transform_plane(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|z| *z *= norm);
    buf
}

/// Centre-shifted forward DFT of a real tensor.
pub fn fft2_tensor(x: &Tensor) -> ComplexTensor {
    let (re, im) = map_planes(x, None, forward_shifted);
    ComplexTensor { real: re, imag: im }
}

/// Inverse of [`fft2_tensor`]; returns the real part and the largest
/// discarded imaginary magnitude.
pub fn ifft2_tensor(z: &ComplexTensor) -> (Tensor, f64) {
    let (re, im) = map_planes(&z.real, Some(&z.imag), inverse_unshifted);
    let max_imag = im.max_abs();
    (re, max_imag)
}

/// A complex value on the tape as two real vars.
#[derive(Clone, Debug)]
pub struct ComplexVar<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

impl<'t> ComplexVar<'t> {
    pub fn to_tensor(&self) -> ComplexTensor {
        ComplexTensor { real: self.re.value().clone(), imag: self.im.value().clone() }
    }

    /// Multiplies both planes by a real (broadcastable) mask.
    pub fn mul_real(&self, mask: &Var<'t>) -> Result<ComplexVar<'t>> {
        Ok(ComplexVar { re: self.re.mul(mask)?, im: self.im.mul(mask)? })
    }

    /// Elementwise magnitude, with a tiny floor inside the root so the
    /// derivative stays finite at zero.
    pub fn magnitude(&self) -> Result<Var<'t>> {
        Ok(self.re.square().add(&self.im.square())?.add_scalar(1e-12).sqrt())
    }
}

/// Centre-shifted forward DFT on the tape.
pub fn fft2<'t>(x: &Var<'t>) -> Result<ComplexVar<'t>> {
    let shape = x.shape();
    let c = shape.c();
    let z = fft2_tensor(x.value());
    // pack [re | im] along channels so one node carries both outputs
    let packed = pack(&z.real, &z.imag);
    let node = x.tape().record("fft2", packed, &[x], move |g| {
        let (g_re, g_im) = unpack(g, shape);
        // dL/dx = Re(F^H G) with G = unshift(g_re + i g_im)
        let (re, _) = map_planes(&g_re, Some(&g_im), |buf, h, w| {
            let mut buf = ifftshift(&buf, h, w);
            transform_plane(&mut buf, h, w, true);
            buf
        });
        vec![re]
    });
    Ok(ComplexVar { re: node.narrow(1, 0, c)?, im: node.narrow(1, c, c)? })
}

/// Inverse of [`fft2`] on the tape. Returns the real part and the largest
/// discarded imaginary magnitude as a diagnostic.
pub fn ifft2<'t>(z: &ComplexVar<'t>) -> Result<(Var<'t>, f64)> {
    let shape = z.re.shape();
    let packed_in = concat(&[&z.re, &z.im], 1)?;
    let (re, max_imag) = ifft2_tensor(&z.to_tensor());
    let node = packed_in.tape().record("ifft2", re, &[&packed_in], move |g| {
        // Re(F^H z / N) is linear in (re, im); its adjoint is F g / N, shifted back
        let (gr, gi) = map_planes(g, None, |buf, h, w| {
            let mut buf = buf;
            transform_plane(&mut buf, h, w, false);
            let norm = 1.0 / (h * w) as f64;
            buf.iter_mut().for_each(|v| *v *= norm);
            fftshift(&buf, h, w)
        });
        vec![pack(&gr, &gi)]
    });
    debug_assert_eq!(node.shape(), shape);
    Ok((node, max_imag))
}

fn pack(re: &Tensor, im: &Tensor) -> Tensor {
    let [n, c, h, w] = re.dims();
    let plane = c * h * w;
    let mut data = Vec::with_capacity(2 * re.numel());
    for b in 0..n {
        data.extend_from_slice(&re.data()[b * plane..(b + 1) * plane]);
        data.extend_from_slice(&im.data()[b * plane..(b + 1) * plane]);
    }
    Tensor::new_unchecked(Shape::new(n, 2 * c, h, w), data)
}

fn unpack(t: &Tensor, shape: Shape) -> (Tensor, Tensor) {
    let [n, c, h, w] = shape.0;
    let plane = c * h * w;
    let mut re = Vec::with_capacity(shape.numel());
    let mut im = Vec::with_capacity(shape.numel());
    for b in 0..n {
        re.extend_from_slice(&t.data()[2 * b * plane..(2 * b + 1) * plane]);
        im.extend_from_slice(&t.data()[(2 * b + 1) * plane..(2 * b + 2) * plane]);
    }
    (Tensor::new_unchecked(shape, re), Tensor::new_unchecked(shape, im))
}
