use crate::error::{Error, Result};
use crate::numerics::ops::elementwise::{expand, reduce_to};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Shape, Tensor};

/// Base offsets of every 1-D lane along `axis`, in row-major order.
pub(crate) fn lane_bases(shape: Shape, axis: usize) -> Vec<usize> {
    let st = shape.strides();
    let mut dims = shape.0;
    dims[axis] = 1;
    let mut bases = Vec::with_capacity(dims.iter().product());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                for d in 0..dims[3] {
                    bases.push(a * st[0] + b * st[1] + c * st[2] + d * st[3]);
                }
            }
        }
    }
    bases
}

fn check_axis(axis: usize) -> Result<()> {
    if axis < 4 {
        Ok(())
    } else {
        Err(Error::invalid(format!("axis {axis} out of range for a rank-4 tensor")))
    }
}

impl<'t> Var<'t> {
    /// Sums over `axes`, keeping them with extent 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let mut out = x.shape();
        for &a in axes {
            out.0[a] = 1;
        }
        let value = reduce_to(x, out);
        let in_shape = x.shape();
        self.tape().record("sum", value, &[self], move |g| vec![expand(g, in_shape)])
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<'t> {
        let count: usize = axes.iter().map(|&a| self.dims()[a]).product();
        self.sum_axes(axes).scale(1.0 / count.max(1) as f64)
    }

    pub fn sum_all(&self) -> Var<'t> {
        self.sum_axes(&[0, 1, 2, 3])
    }

    pub fn mean_all(&self) -> Var<'t> {
        self.mean_axes(&[0, 1, 2, 3])
    }

    /// Global average pooling over H and W: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn avg_pool_global(&self) -> Var<'t> {
        self.mean_axes(&[2, 3])
    }

    /// Softmax along `axis`; every lane sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        check_axis(axis)?;
        let x = self.value();
        let shape = x.shape();
        let n = shape.0[axis];
        let stride = shape.strides()[axis];
        let bases = lane_bases(shape, axis);
        let xd = x.data();
        let mut y = vec![0.0; x.numel()];
        for &b in &bases {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(xd[b + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = (xd[b + i * stride] - m).exp();
                y[b + i * stride] = e;
                z += e;
            }
            for i in 0..n {
                y[b + i * stride] /= z;
            }
        }
        let value = Tensor::new_unchecked(shape, y);
        let saved = value.clone();
        Ok(self.tape().record("softmax", value, &[self], move |g| {
            let (gd, yd) = (g.data(), saved.data());
            let mut gx = vec![0.0; gd.len()];
            for &b in &bases {
                let mut dot = 0.0;
                for i in 0..n {
                    let k = b + i * stride;
                    dot += gd[k] * yd[k];
                }
                for i in 0..n {
                    let k = b + i * stride;
                    gx[k] = yd[k] * (gd[k] - dot);
                }
            }
            vec![Tensor::new_unchecked(shape, gx)]
        }))
    }

    /// Non-overlapping `k x k` average pooling (trailing rows/columns that do
    /// not fill a window are dropped).
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t>> {
        let [n, c, h, w] = self.dims();
        if k == 0 || k > h || k > w {
            return Err(Error::invalid(format!("avg_pool window {k} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.value().clone();
        let in_shape = x.shape();
        let out_shape = Shape::new(n, c, oh, ow);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; out_shape.numel()];
        let xd = x.data();
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += xd[p * h * w + (oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[p * oh * ow + oy * ow + ox] = s * norm;
                }
            }
        }
        let value = Tensor::new_unchecked(out_shape, out);
        Ok(self.tape().record("avg_pool", value, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; in_shape.numel()];
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = gd[p * oh * ow + oy * ow + ox] * norm;
                        for dy in 0..k {
                            for dx in 0..k {
                                gx[p * h * w + (oy * k + dy) * w + ox * k + dx] += v;
                            }
                        }
                    }
                }
            }
            vec![Tensor::new_unchecked(in_shape, gx)]
        }))
    }
}
