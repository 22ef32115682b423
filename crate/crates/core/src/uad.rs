//! Uncertainty-aware dual-domain denoising: a spatial branch, a G2AF
//! frequency branch, a per-pixel channel-entropy map, and cross-attention
//! whose values are lifted from the entropy map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g2af::{G2af, G2afConfig};
use crate::nn::{Builder, Conv2d, ResBlock, Scope};
use crate::numerics::{concat, ParamStore, Precision, Tape, Var};

/// Probabilities are clamped to at least this before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UadConfig {
    pub d_head: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for UadConfig {
    fn default() -> Self {
        UadConfig { d_head: 16, dropout: 0.1, leaky_slope: 0.2 }
    }
}

/// Normalised channel entropy `-(1/ln C) Σ p log p` of the channel softmax,
/// shape `[N,1,H,W]`, in `[0,1]`.
pub fn entropy_map<'t>(f: &Var<'t>) -> Result<Var<'t>> {
    let c = f.dims()[1];
    if c < 2 {
        return Err(Error::invalid(format!("entropy needs at least 2 channels, got {c}")));
    }
    let p = f.softmax(1)?;
    let plogp = p.mul(&p.clamp(PROB_FLOOR, 1.0).ln())?;
    Ok(plogp.sum_axes(&[1]).scale(-1.0 / (c as f64).ln()).clamp(0.0, 1.0))
}

/// `Softmax(QKᵀ/√d)V` over the `H·W` pixel tokens of already projected
/// `[N,d,H,W]` tensors. Returns the output and the attention weights
/// `[N,1,HW,HW]`.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let [n, d, h, w] = q.dims();
    for other in [k, v] {
        let [on, od, oh, ow] = other.dims();
        if (on, od, oh * ow) != (n, d, h * w) {
            return Err(Error::shape(format!("attention token mismatch {:?} vs {:?}", q.shape(), other.shape())));
        }
    }
    let tokens = |x: &Var<'t>| -> Result<Var<'t>> { x.reshape([n, 1, d, h * w]) };
    let qt = tokens(q)?.permute([0, 1, 3, 2])?;
    let kt = tokens(k)?;
    let vt = tokens(v)?.permute([0, 1, 3, 2])?;
    let weights = qt.matmul(&kt)?.scale(1.0 / (d as f64).sqrt()).softmax(3)?;
    let out = weights.matmul(&vt)?.permute([0, 1, 3, 2])?.reshape([n, d, h, w])?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

impl CrossAttention {
    pub fn build(b: &mut Builder, channels: usize, d_head: usize) -> Self {
        let mut b = b.sub("attn");
        CrossAttention {
            q: Conv2d::pointwise(&mut b, "q", channels, d_head),
            // a key bias shifts every logit of a row equally, so softmax drops it
            k: Conv2d::pointwise_linear(&mut b, "k", channels, d_head),
            // bias-free so the value path is linear in its source
            v: Conv2d::pointwise_linear(&mut b, "v", channels, d_head),
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, q_src: &Var<'t>, k_src: &Var<'t>, v_src: &Var<'t>) -> Result<Var<'t>> {
        let q = self.q.forward(s, q_src)?;
        let k = self.k.forward(s, k_src)?;
        let v = self.v.forward(s, v_src)?;
        Ok(attention(&q, &k, &v)?.0)
    }
}

/// `F⃗ = Softmax_C(Conv(Conv(AvgPool(F)))) ⊗ F`, then
/// `LeakyReLU(Conv1x1(cat(F⃗, ReM(F))))`.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub pool_conv1: Conv2d,
    pub pool_conv2: Conv2d,
    pub rem: ResBlock,
    pub fuse: Conv2d,
    pub slope: f64,
}

impl SpatialBranch {
    pub fn build(b: &mut Builder, channels: usize, slope: f64) -> Self {
        let mut b = b.sub("spatial");
        SpatialBranch {
            pool_conv1: Conv2d::pointwise(&mut b, "pool_conv1", channels, channels),
            pool_conv2: Conv2d::pointwise(&mut b, "pool_conv2", channels, channels),
            rem: ResBlock::build(&mut b, "rem", channels),
            fuse: Conv2d::pointwise(&mut b, "fuse", 2 * channels, channels),
            slope,
        }
    }

    /// Channel weights `[N,C,1,1]`; they sum to one over C.
    pub fn channel_weights<'t>(&self, s: &Scope<'_, 't>, f: &Var<'t>) -> Result<Var<'t>> {
        let pooled = f.avg_pool_global();
        self.pool_conv2.forward(s, &self.pool_conv1.forward(s, &pooled)?)?.softmax(1)
    }

    pub fn forward<'t>(&self, s: &Scope<'_, 't>, f: &Var<'t>) -> Result<Var<'t>> {
        let weighted = self.channel_weights(s, f)?.mul(f)?;
        let local = self.rem.forward(s, f)?;
        Ok(self.fuse.forward(s, &concat(&[&weighted, &local], 1)?)?.leaky_relu(self.slope))
    }
}

#[derive(Clone, Debug)]
pub struct Uad {
    pub spatial: SpatialBranch,
    pub g2af: G2af,
    pub entropy_embed: Conv2d,
    pub attn: CrossAttention,
    pub gate: Conv2d,
    pub l2g_in: Conv2d,
    pub l2g_out: Conv2d,
    pub merge_proj: Conv2d,
    pub merge_rem: ResBlock,
    pub config: UadConfig,
}

impl Uad {
    pub fn build(b: &mut Builder, channels: usize, config: UadConfig, g2af: G2afConfig) -> Self {
        let mut b = b.sub("uad");
        let d = config.d_head;
        Uad {
            spatial: SpatialBranch::build(&mut b, channels, config.leaky_slope),
            g2af: G2af::build(&mut b, channels, g2af),
            entropy_embed: Conv2d::pointwise_linear(&mut b, "entropy_embed", 1, channels),
            attn: CrossAttention::build(&mut b, channels, d),
            gate: Conv2d::pointwise(&mut b, "gate", d, channels),
            l2g_in: Conv2d::pointwise(&mut b, "l2g_in", d, channels),
            l2g_out: Conv2d::pointwise(&mut b, "l2g_out", channels, channels),
            merge_proj: Conv2d::pointwise(&mut b, "merge_proj", 2 * channels, channels),
            merge_rem: ResBlock::build(&mut b, "merge_rem", channels),
            config,
        }
    }

    /// Parameters on the value path of the attention (entropy embedding and
    /// value projection).
    pub fn value_path_params(&self) -> Vec<String> {
        vec![self.entropy_embed.weight.clone(), self.attn.v.weight.clone()]
    }

    /// `F^j` for input `F^{i-1}`. Captures the raw entropy map as
    /// `"uad.entropy"`.
    pub fn forward<'t>(&self, s: &Scope<'_, 't>, f: &Var<'t>) -> Result<Var<'t>> {
        let f_spa = self.spatial.forward(s, f)?;
        s.tape.check_finite("uad.spatial")?;
        let f_i = self.g2af.forward(s, f)?;
        s.tape.check_finite("uad.g2af")?;
        let entropy = entropy_map(&f_i)?;
        s.tape.check_finite("uad.entropy")?;
        s.capture("uad.entropy", entropy.value());
        let entropy = match s.entropy_scale {
            Some(scale) => entropy.scale(scale),
            None => entropy,
        };
        let v_src = self.entropy_embed.forward(s, &entropy)?;
        let f_u = self.attn.forward(s, &f_spa, &f_i, &v_src)?;
        s.tape.check_finite("uad.attention")?;
        let gate = self.gate.forward(s, &f_u)?.sigmoid();
        let l2g = self.l2g_out.forward(s, &self.l2g_in.forward(s, &f_u)?.silu())?;
        let f_fre = gate.mul(&s.dropout(&l2g, self.config.dropout)?)?;
        let merged = self.merge_proj.forward(s, &concat(&[&f.add(&f_fre)?, &f_i], 1)?)?;
        let out = self.merge_rem.forward(s, &merged)?;
        s.tape.check_finite("uad.merge")?;
        Ok(out)
    }
}

/// Gradient norms with the entropy map as produced versus multiplied by
/// `scale`.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyGradientReport {
    pub scale: f64,
    /// Over all parameters whose names start with the given prefix.
    pub block_norm: f64,
    pub block_norm_scaled: f64,
    pub block_ratio: f64,
    /// Over the value-path parameters only.
    pub value_path_norm: f64,
    pub value_path_norm_scaled: f64,
    pub value_path_ratio: f64,
}

/// Runs `loss` twice in 64-bit mode, once with the entropy override unset
/// and once with it set to `scale`, and compares gradient norms.
pub fn entropy_gradient_diagnostic<L>(
    store: &ParamStore,
    block_prefix: &str,
    value_path: &[String],
    loss: L,
    scale: f64,
) -> Result<EntropyGradientReport>
where
    L: for<'t> Fn(&'t Tape, &ParamStore, Option<f64>) -> Result<Var<'t>>,
{
    let grads = |override_scale: Option<f64>| -> Result<(f64, f64)> {
        let tape = Tape::new(Precision::F64);
        let l = loss(&tape, store, override_scale)?;
        let g = tape.backward(&l)?;
        let block = g.norm_of(store.names().filter(|n| n.starts_with(block_prefix)));
        let vp = g.norm_of(value_path.iter().map(String::as_str));
        Ok((block, vp))
    };
    let (block_norm, value_path_norm) = grads(None)?;
    let (block_norm_scaled, value_path_norm_scaled) = grads(Some(scale))?;
    let ratio = |a: f64, b: f64| if b == 0.0 { if a == 0.0 { 1.0 } else { f64::INFINITY } } else { a / b };
    Ok(EntropyGradientReport {
        scale,
        block_norm,
        block_norm_scaled,
        block_ratio: ratio(block_norm_scaled, block_norm),
        value_path_norm,
        value_path_norm_scaled,
        value_path_ratio: ratio(value_path_norm_scaled, value_path_norm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::numerics::gradcheck::{check_gradients, CheckOptions};
    use crate::numerics::{Initializer, Tensor};

    fn setup(channels: usize, d_head: usize) -> (Uad, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(12);
        let config = UadConfig { d_head, ..UadConfig::default() };
        let uad = Uad::build(&mut Builder::new(&mut store, &mut init), channels, config, G2afConfig::default());
        (uad, store)
    }

    fn feature(shape: [usize; 4]) -> Tensor {
        Tensor::from_fn(shape, |n, c, y, x| 0.8 * ((n * 37 + c * 11 + y * 7 + x * 5) as f64 * 0.41).sin())
    }

    #[test]
    fn entropy_reference_values() {
        let tape = Tape::new(Precision::F64);
        let uniform = entropy_map(&tape.constant(Tensor::full([1, 5, 2, 2], 0.3))).unwrap();
        assert!(uniform.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let one_hot = Tensor::from_fn([1, 4, 1, 1], |_, c, _, _| if c == 2 { 100.0 } else { 0.0 });
        assert!(entropy_map(&tape.constant(one_hot)).unwrap().value().item() < 1e-3);

        // logits ln(9) and 0 give p = (0.9, 0.1)
        let two = Tensor::from_vec([1, 2, 1, 1], vec![9f64.ln(), 0.0]).unwrap();
        let want = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln();
        let got = entropy_map(&tape.constant(two)).unwrap().value().item();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.4690).abs() < 1e-4);

        assert!(entropy_map(&tape.constant(Tensor::zeros([1, 1, 2, 2]))).is_err());
    }

    #[test]
    fn attention_reference_cases() {
        let tape = Tape::new(Precision::F64);
        // one token: softmax of a singleton is 1
        let q = tape.constant(feature([1, 3, 1, 1]));
        let v = tape.constant(feature([1, 3, 1, 1]).map(|x| x * 2.0 + 1.0));
        let (out, _) = attention(&q, &q, &v).unwrap();
        assert!(out.value().max_abs_diff(v.value()) < 1e-15);

        // identical keys: uniform average of values
        let q = tape.constant(feature([1, 2, 2, 3]));
        let k = tape.constant(Tensor::from_fn([1, 2, 2, 3], |_, c, _, _| c as f64 + 0.5));
        let v = tape.constant(feature([1, 2, 2, 3]).map(|x| x.cos()));
        let (out, _) = attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..6).map(|i| v.value().data()[c * 6 + i]).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.value().data()[c * 6 + i] - mean).abs() < 1e-12);
            }
        }

        // two tokens with d = 1: q = [1, 2], k = [0.5, -1], v = [3, 7]
        let q = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.5, -1.0]).unwrap());
        let v = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 7.0]).unwrap());
        let (out, _) = attention(&q, &k, &v).unwrap();
        for (i, qi) in [1.0f64, 2.0].into_iter().enumerate() {
            let (a, b) = ((qi * 0.5).exp(), (qi * -1.0).exp());
            let want = (a * 3.0 + b * 7.0) / (a + b);
            assert!((out.value().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_output_in_convex_hull() {
        let tape = Tape::new(Precision::F64);
        let q = tape.constant(feature([1, 2, 3, 3]));
        let k = tape.constant(feature([1, 2, 3, 3]).map(|x| x * 3.0 - 0.2));
        let v = tape.constant(feature([1, 2, 3, 3]).map(|x| (x * 5.0).sin()));
        let (out, weights) = attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let lane = &v.value().data()[c * 9..(c + 1) * 9];
            let (lo, hi) = lane.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            for &o in &out.value().data()[c * 9..(c + 1) * 9] {
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
        for row in weights.value().data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(attention(&q, &tape.constant(Tensor::zeros([1, 2, 2, 2])), &v).is_err());
    }

    #[test]
    fn spatial_branch_properties() {
        let (uad, store) = setup(8, 4);
        let tape = Tape::new(Precision::F64);
        let s = Scope::eval(&tape, &store);
        let zero = tape.constant(Tensor::zeros([1, 8, 6, 6]));
        let y = uad.spatial.forward(&s, &zero).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let x = tape.constant(feature([2, 8, 6, 6]));
        assert_eq!(uad.spatial.forward(&s, &x).unwrap().dims(), [2, 8, 6, 6]);
        let wts = uad.spatial.channel_weights(&s, &x).unwrap();
        for n in 0..2 {
            let sum: f64 = wts.value().data()[n * 8..(n + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let (uad, store) = setup(4, 4);
        let run = || {
            let tape = Tape::new(Precision::F32);
            let y = uad.forward(&Scope::eval(&tape, &store), &tape.constant(feature([1, 4, 4, 6]))).unwrap();
            y.value().clone()
        };
        let a = run();
        assert_eq!(a.dims(), [1, 4, 4, 6]);
        assert!(a.bit_eq(&run()));
    }

    #[test]
    fn zero_entropy_embedding_decouples_entropy() {
        let (uad, mut store) = setup(4, 4);
        let w = store.get(&uad.entropy_embed.weight).unwrap().shape();
        store.insert(uad.entropy_embed.weight.clone(), Tensor::zeros(w));
        let out = |scale: f64| {
            let tape = Tape::new(Precision::F64);
            let mut s = Scope::eval(&tape, &store);
            s.entropy_scale = Some(scale);
            uad.forward(&s, &tape.constant(feature([1, 4, 4, 4]))).unwrap().value().clone()
        };
        assert!(out(1.0).bit_eq(&out(0.3)));
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let (uad, store) = setup(4, 4);
        let x = feature([1, 4, 4, 4]);
        let tape = Tape::new(Precision::F32);
        let eval = uad.forward(&Scope::eval(&tape, &store), &tape.constant(x.clone())).unwrap();
        let train = uad.forward(&Scope::new(&tape, &store, Mode::Train { seed: 1 }), &tape.constant(x)).unwrap();
        assert!(!eval.value().bit_eq(train.value()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (uad, store) = setup(4, 4);
        let x = feature([1, 4, 4, 4]).map(|v| 4.0 * v);
        let weights = feature([1, 4, 4, 4]).map(|v| (3.0 * v).cos());
        let report = check_gradients(
            &store,
            None,
            |t, s| {
                let y = uad.forward(&Scope::eval(t, s), &t.constant(x.clone()))?;
                Ok(y.mul(&t.constant(weights.clone()))?.sum_all())
            },
            &CheckOptions { eps: 1e-5, max_coords: 10, seed: 4 },
        )
        .unwrap();
        for r in report {
            assert!(r.max_rel_error < 1e-3, "{}: {:.3e}", r.param, r.max_rel_error);
        }
    }

    #[test]
    fn entropy_scale_diagnostic_limits() {
        let (uad, store) = setup(4, 4);
        let x = feature([1, 4, 4, 4]);
        let target = feature([1, 4, 4, 4]).map(|v| v * 0.5);
        let run = |scale: f64| {
            entropy_gradient_diagnostic(
                &store,
                "uad.",
                &uad.value_path_params(),
                |t, s, sc| {
                    let mut scope = Scope::eval(t, s);
                    scope.entropy_scale = sc;
                    let y = uad.forward(&scope, &t.constant(x.clone()))?;
                    Ok(y.sub(&t.constant(target.clone()))?.square().mean_all())
                },
                scale,
            )
            .unwrap()
        };
        let one = run(1.0);
        assert_eq!(one.block_ratio, 1.0);
        assert_eq!(one.value_path_ratio, 1.0);
        let zero = run(0.0);
        assert_eq!(zero.value_path_norm_scaled, 0.0);
        assert!(zero.value_path_norm > 0.0);
    }
}
