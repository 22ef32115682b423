use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Shape, Tensor};

/// Stride, zero padding and grouping of a 2-D convolution. Kernel extents
/// come from the weight tensor `[Cout, Cin/groups, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvOpts {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvOpts { stride: (stride, stride), pad: (pad, pad), groups }
    }
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts::new(1, 0, 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn new(x: Shape, wt: Shape, o: ConvOpts) -> Result<Self> {
        let [n, cin, h, w] = x.0;
        let [cout, cin_g, kh, kw] = wt.0;
        let groups = o.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(format!(
                "conv2d: channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv2d: weight {wt:?} expects {} input channels per group, input {x:?} has {}",
                cin_g,
                cin / groups
            )));
        }
        let (sh, sw) = o.stride;
        let (ph, pw) = o.pad;
        if sh == 0 || sw == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {x:?}")));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        Ok(Geometry { n, cin, h, w, cout, kh, kw, oh, ow, sh, sw, ph, pw, groups })
    }

    /// Range of output columns whose input column `ox*sw + kx - pw` is in bounds.
    #[inline]
    fn valid(out: usize, inp: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < inp
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi_excl = if inp + pad > k { (inp + pad - k - 1) / stride + 1 } else { 0 };
        (lo.min(out), hi_excl.min(out))
    }

    /// Calls `f(x_off, w_off, o_off, len)` once per contiguous run of `len`
    /// multiply-accumulates along an output row, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = *self;
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        for n in 0..g.n {
            for co in 0..g.cout {
                let grp = co / cout_g;
                let o_base = (n * g.cout + co) * g.oh * g.ow;
                for cig in 0..cin_g {
                    let ci = grp * cin_g + cig;
                    let x_base = (n * g.cin + ci) * g.h * g.w;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = Self::valid(g.oh, g.h, g.sh, ky, g.ph);
                        for kx in 0..g.kw {
                            let w_off = ((co * cin_g + cig) * g.kh + ky) * g.kw + kx;
                            let (ox0, ox1) = Self::valid(g.ow, g.w, g.sw, kx, g.pw);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * g.sh + ky - g.ph;
                                let xrow = x_base + iy * g.w;
                                let orow = o_base + oy * g.ow;
                                // one call per row; the closure runs the inner column loop
                                f(xrow + ox0 * g.sw + kx - g.pw, w_off, orow + ox0, ox1 - ox0);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D convolution (cross-correlation) with zero padding.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, opts: ConvOpts) -> Result<Var<'t>> {
        let g = Geometry::new(self.shape(), weight.shape(), opts)?;
        if let Some(b) = bias {
            if b.value().numel() != g.cout {
                return Err(Error::shape(format!("conv2d: bias {:?} for {} outputs", b.shape(), g.cout)));
            }
        }
        let x = self.value().clone();
        let wt = weight.value().clone();
        let out_shape = Shape::new(g.n, g.cout, g.oh, g.ow);
        let mut out = vec![0.0; out_shape.numel()];
        if let Some(b) = bias {
            let bd = b.value().data();
            for n in 0..g.n {
                for co in 0..g.cout {
                    let base = (n * g.cout + co) * g.oh * g.ow;
                    out[base..base + g.oh * g.ow].fill(bd[co]);
                }
            }
        }
        {
            let (xd, wd) = (x.data(), wt.data());
            let sw = g.sw;
            g.for_each_tap(|xi, wi, oi, len| {
                let wv = wd[wi];
                for j in 0..len {
                    out[oi + j] += wv * xd[xi + j * sw];
                }
            });
        }
        let value = Tensor::new_unchecked(out_shape, out);
        let has_bias = bias.is_some();
        let bias_shape = bias.map(|b| b.shape()).unwrap_or_default();
        let backward = move |gout: &Tensor| {
            let (xd, wd, gd) = (x.data(), wt.data(), gout.data());
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; wt.numel()];
            let sw = g.sw;
            g.for_each_tap(|xi, wi, oi, len| {
                let wv = wd[wi];
                let mut acc = 0.0;
                for j in 0..len {
                    let gv = gd[oi + j];
                    gx[xi + j * sw] += wv * gv;
                    acc += gv * xd[xi + j * sw];
                }
                gw[wi] += acc;
            });
            let mut grads = vec![
                Tensor::new_unchecked(x.shape(), gx),
                Tensor::new_unchecked(wt.shape(), gw),
            ];
            if has_bias {
                let mut gb = vec![0.0; g.cout];
                for n in 0..g.n {
                    for (co, slot) in gb.iter_mut().enumerate() {
                        let base = (n * g.cout + co) * g.oh * g.ow;
                        *slot += gd[base..base + g.oh * g.ow].iter().sum::<f64>();
                    }
                }
                grads.push(Tensor::new_unchecked(bias_shape, gb));
            }
            grads
        };
        Ok(match bias {
            Some(b) => self.tape().record("conv2d", value, &[self, weight, b], backward),
            None => self.tape().record("conv2d", value, &[self, weight], backward),
        })
    }

    /// Per-pixel affine map over channels; `weight` is `[Cout, Cin, 1, 1]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let [_, _, kh, kw] = weight.dims();
        if kh != 1 || kw != 1 {
            return Err(Error::shape(format!("linear weight must be [Cout, Cin, 1, 1], got {:?}", weight.shape())));
        }
        self.conv2d(weight, bias, ConvOpts::default())
    }

    /// Batched matrix product over the last two axes:
    /// `[A,B,M,K] x [A,B,K,P] -> [A,B,M,P]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let [a0, a1, m, k] = self.dims();
        let [b0, b1, k2, p] = other.dims();
        if (a0, a1) != (b0, b1) || k != k2 {
            return Err(Error::shape(format!("matmul {:?} x {:?}", self.shape(), other.shape())));
        }
        let (a, b) = (self.value().clone(), other.value().clone());
        let batches = a0 * a1;
        let out_shape = Shape::new(a0, a1, m, p);
        let mut out = vec![0.0; out_shape.numel()];
        {
            let (ad, bd) = (a.data(), b.data());
            for bt in 0..batches {
                let (ao, bo, oo) = (bt * m * k, bt * k * p, bt * m * p);
                for i in 0..m {
                    for kk in 0..k {
                        let av = ad[ao + i * k + kk];
                        let brow = &bd[bo + kk * p..bo + (kk + 1) * p];
                        let orow = &mut out[oo + i * p..oo + (i + 1) * p];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new_unchecked(out_shape, out);
        Ok(self.tape().record("matmul", value, &[self, other], move |g| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for bt in 0..batches {
                let (ao, bo, oo) = (bt * m * k, bt * k * p, bt * m * p);
                for i in 0..m {
                    let grow = &gd[oo + i * p..oo + (i + 1) * p];
                    for kk in 0..k {
                        let brow = &bd[bo + kk * p..bo + (kk + 1) * p];
                        // dA[i,k] = sum_j g[i,j] B[k,j]
                        ga[ao + i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        // dB[k,j] += A[i,k] g[i,j]
                        let av = ad[ao + i * k + kk];
                        let gbrow = &mut gb[bo + kk * p..bo + (kk + 1) * p];
                        for (o, &gv) in gbrow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            vec![Tensor::new_unchecked(a.shape(), ga), Tensor::new_unchecked(b.shape(), gb)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Precision, Tape};

    fn pseudo(shape: [usize; 4], salt: f64) -> Tensor {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            ((i * 12.9898 + salt) * 0.731).sin()
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(pseudo([1, 3, 5, 5], 0.1));
        let w = tape.constant(Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let y = x.conv2d(&w, Some(&b), ConvOpts::default()).unwrap();
        assert!(y.value().bit_eq(x.value()));
    }

    #[test]
    fn zero_input_gives_bias() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(pseudo([3, 2, 3, 3], 0.5));
        let b = tape.constant(Tensor::full([1, 3, 1, 1], 0.75));
        let y = x.conv2d(&w, Some(&b), ConvOpts::new(1, 1, 1)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn output_extents_follow_conv_arithmetic() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::zeros([2, 4, 9, 7]));
        let w = tape.constant(Tensor::zeros([6, 2, 3, 3]));
        let y = x.conv2d(&w, None, ConvOpts::new(2, 1, 2)).unwrap();
        assert_eq!(y.dims(), [2, 6, 5, 4]);
        let bad = tape.constant(Tensor::zeros([6, 3, 3, 3]));
        assert!(x.conv2d(&bad, None, ConvOpts::new(1, 1, 2)).is_err());
    }

    #[test]
    fn linear_two_by_two() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec([2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::from_vec([1, 2, 1, 1], vec![0.5, -0.5]).unwrap());
        let y = x.linear(&w, Some(&b)).unwrap();
        // [3 4; 5 6] [1 2]^T + [0.5 -0.5]
        assert_eq!(y.value().data(), &[11.5, 16.5]);
    }

    #[test]
    fn matmul_small() {
        let tape = Tape::new(Precision::F64);
        let a = tape.constant(Tensor::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::from_vec([1, 1, 3, 1], vec![1., 0., -1.]).unwrap());
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.value().data(), &[-2.0, -2.0]);
    }
}
