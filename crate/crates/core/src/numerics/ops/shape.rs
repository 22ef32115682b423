use crate::error::{Error, Result};
use crate::numerics::ops::elementwise::bcast_strides;
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Shape, Tensor};

/// Reflection ("mirror without edge repeat") index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Per-output-element source indices for the top-k neighbour gather.
///
/// Layout is `[n][hw][j]`, each entry an index into the candidate axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherIndex {
    pub batch: usize,
    pub positions: usize,
    pub k: usize,
    pub idx: Vec<usize>,
}

impl GatherIndex {
    pub fn get(&self, n: usize, p: usize, j: usize) -> usize {
        self.idx[(n * self.positions + p) * self.k + j]
    }
}

impl<'t> Var<'t> {
    /// `out[o] = in[index[o]]`, with a scatter-add backward.
    fn gather(&self, op: &'static str, out_shape: Shape, index: Vec<usize>) -> Var<'t> {
        debug_assert_eq!(index.len(), out_shape.numel());
        let xd = self.value().data();
        let data = index.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new_unchecked(out_shape, data);
        let in_shape = self.shape();
        self.tape().record(op, value, &[self], move |g| {
            let mut gx = vec![0.0; in_shape.numel()];
            for (&i, &gv) in index.iter().zip(g.data()) {
                gx[i] += gv;
            }
            vec![Tensor::new_unchecked(in_shape, gx)]
        })
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Var<'t>> {
        let shape = shape.into();
        let value = self.value().reshape(shape)?;
        let in_shape = self.shape();
        Ok(self.tape().record("reshape", value, &[self], move |g| {
            vec![g.reshape(in_shape).expect("same element count")]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: [usize; 4]) -> Result<Var<'t>> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return Err(Error::invalid(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let ind = self.shape();
        let ist = ind.strides();
        let od = Shape([ind.0[perm[0]], ind.0[perm[1]], ind.0[perm[2]], ind.0[perm[3]]]);
        let s = [ist[perm[0]], ist[perm[1]], ist[perm[2]], ist[perm[3]]];
        let mut index = Vec::with_capacity(od.numel());
        for a in 0..od.0[0] {
            for b in 0..od.0[1] {
                for c in 0..od.0[2] {
                    for d in 0..od.0[3] {
                        index.push(a * s[0] + b * s[1] + c * s[2] + d * s[3]);
                    }
                }
            }
        }
        Ok(self.gather("permute", od, index))
    }

    /// Reverses the order along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Var<'t>> {
        if axis >= 4 {
            return Err(Error::invalid(format!("axis {axis} out of range")));
        }
        let shape = self.shape();
        let st = shape.strides();
        let d = shape.0;
        let mut index = Vec::with_capacity(shape.numel());
        for a in 0..d[0] {
            for b in 0..d[1] {
                for c in 0..d[2] {
                    for e in 0..d[3] {
                        let mut i = [a, b, c, e];
                        i[axis] = d[axis] - 1 - i[axis];
                        index.push(i[0] * st[0] + i[1] * st[1] + i[2] * st[2] + i[3] * st[3]);
                    }
                }
            }
        }
        Ok(self.gather("flip", shape, index))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= 4 || start + len > shape.0[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {shape:?}"
            )));
        }
        let st = shape.strides();
        let od = shape.with_axis(axis, len);
        let mut index = Vec::with_capacity(od.numel());
        for a in 0..od.0[0] {
            for b in 0..od.0[1] {
                for c in 0..od.0[2] {
                    for e in 0..od.0[3] {
                        let mut i = [a, b, c, e];
                        i[axis] += start;
                        index.push(i[0] * st[0] + i[1] * st[1] + i[2] * st[2] + i[3] * st[3]);
                    }
                }
            }
        }
        Ok(self.gather("narrow", od, index))
    }

    /// Broadcasts size-1 axes up to `shape`.
    pub fn broadcast_to(&self, shape: impl Into<Shape>) -> Result<Var<'t>> {
        let shape = shape.into();
        if Shape::broadcast(self.shape(), shape)? != shape {
            return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", self.shape())));
        }
        let st = bcast_strides(self.shape(), shape);
        let mut index = Vec::with_capacity(shape.numel());
        crate::numerics::ops::elementwise::for_each_bcast(shape, st, st, |_, i, _| index.push(i));
        Ok(self.gather("broadcast", shape, index))
    }

    /// Reflection padding of the two spatial axes.
    pub fn pad_reflect(&self, pad_h: usize, pad_w: usize) -> Result<Var<'t>> {
        let [n, c, h, w] = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::shape("cannot pad an empty plane"));
        }
        let (oh, ow) = (h + 2 * pad_h, w + 2 * pad_w);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                let sy = reflect_index(y as isize - pad_h as isize, h);
                for x in 0..ow {
                    let sx = reflect_index(x as isize - pad_w as isize, w);
                    index.push(p * h * w + sy * w + sx);
                }
            }
        }
        Ok(self.gather("pad_reflect", Shape::new(n, c, oh, ow), index))
    }

    /// Nearest-neighbour upsampling of both spatial axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let [n, c, h, w] = self.dims();
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    index.push(p * h * w + (y / factor) * w + x / factor);
                }
            }
        }
        Ok(self.gather("upsample", Shape::new(n, c, oh, ow), index))
    }

    /// Extracts reflection-padded `k x k` neighbourhoods.
    ///
    /// `[N,C,H,W] -> [N,C,k*k,H*W]`; candidate `dy*k + dx` sits at offset
    /// `(dy - k/2, dx - k/2)`, so the centre is candidate `(k*k - 1)/2`.
    pub fn unfold(&self, k: usize) -> Result<Var<'t>> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("unfold window must be odd, got {k}")));
        }
        let [n, c, h, w] = self.dims();
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut index = Vec::with_capacity(n * c * k * k * hw);
        for p in 0..n * c {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    for y in 0..h as isize {
                        let sy = reflect_index(y + dy - r, h);
                        for x in 0..w as isize {
                            let sx = reflect_index(x + dx - r, w);
                            index.push(p * hw + sy * w + sx);
                        }
                    }
                }
            }
        }
        Ok(self.gather("unfold", Shape::new(n, c, k * k, hw), index))
    }

    /// Selects candidates along axis 2 per position:
    /// `[N,C,K2,P] -> [N,C,k,P]` with `out[n,c,j,p] = in[n,c,idx(n,p,j),p]`.
    pub fn gather_candidates(&self, gi: &GatherIndex) -> Result<Var<'t>> {
        let [n, c, k2, p] = self.dims();
        if gi.batch != n || gi.positions != p || gi.idx.iter().any(|&i| i >= k2) {
            return Err(Error::shape(format!(
                "gather index (batch {}, positions {}) does not fit {:?}",
                gi.batch,
                gi.positions,
                self.shape()
            )));
        }
        let k = gi.k;
        let mut index = Vec::with_capacity(n * c * k * p);
        for b in 0..n {
            for ch in 0..c {
                for j in 0..k {
                    for pos in 0..p {
                        let cand = gi.get(b, pos, j);
                        index.push(((b * c + ch) * k2 + cand) * p + pos);
                    }
                }
            }
        }
        Ok(self.gather("gather_candidates", Shape::new(n, c, k, p), index))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    if axis >= 4 {
        return Err(Error::invalid(format!("axis {axis} out of range")));
    }
    let base = first.shape();
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        for i in 0..4 {
            if i != axis && s.0[i] != base.0[i] {
                return Err(Error::shape(format!("concat along {axis}: {s:?} vs {base:?}")));
            }
        }
        total += s.0[axis];
    }
    let out_shape = base.with_axis(axis, total);
    let outer: usize = base.0[..axis].iter().product();
    let inner: usize = base.0[axis + 1..].iter().product();
    let extents: Vec<usize> = parts.iter().map(|p| p.shape().0[axis]).collect();

    let mut data = Vec::with_capacity(out_shape.numel());
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            let chunk = e * inner;
            data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let value = Tensor::new_unchecked(out_shape, data);
    let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
    Ok(first.tape().record("concat", value, parts, move |g| {
        let gd = g.data();
        let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gv, &e) in grads.iter_mut().zip(&extents) {
                let chunk = e * inner;
                gv.extend_from_slice(&gd[off..off + chunk]);
                off += chunk;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(v, &s)| Tensor::new_unchecked(s, v))
            .collect()
    }))
}
