//! Seven-term reconstruction loss and the PSNR/SSIM metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::EPS_DIV;
use crate::len::len_loss;
use crate::numerics::{ConvOpts, Initializer, Precision, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR when the MSE is below `1e-10`.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    pub ssim: f64,
    pub per: f64,
    pub global: f64,
    pub color: f64,
    pub grad: f64,
    pub len: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mse: 0.95, ssim: 0.01, per: 0.01, global: 0.1, color: 0.5, grad: 0.1, len: 0.1 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { mse: 0.0, ssim: 0.0, per: 0.0, global: 0.0, color: 0.0, grad: 0.0, len: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.mse, self.ssim, self.per, self.global, self.color, self.grad, self.len]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Which histogram plays the reference distribution in the global term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(gt ‖ pred)`: penalises mass missing from the prediction.
    #[default]
    GtPred,
    PredGt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub hist_bins: usize,
    pub kl_direction: KlDirection,
    pub perceptual_seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { weights: LossWeights::default(), hist_bins: 32, kl_direction: KlDirection::GtPred, perceptual_seed: 7 }
    }
}

/// Term values of one evaluation plus their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub ssim: f64,
    pub per: f64,
    pub global: f64,
    pub color: f64,
    pub grad: f64,
    pub len: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 7] {
        [self.mse, self.ssim, self.per, self.global, self.color, self.grad, self.len]
    }

    /// `Σ λᵢ·termᵢ` recomputed from the reported terms.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.terms().iter().zip(w.as_array()).map(|(t, w)| t * w).sum()
    }

    /// The total without the LEN supervision term.
    pub fn recon_excluding_len(&self, w: &LossWeights) -> f64 {
        self.total - w.len * self.len
    }
}

fn same_shape(op: &str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn loss_mse<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    same_shape("mse", pred, gt)?;
    Ok(pred.sub(gt)?.square().mean_all())
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Per-channel Gaussian-weighted local mean over valid windows, as two
/// separable passes.
fn gaussian_blur<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let c = x.dims()[1];
    let g = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let tape = x.tape();
    let row = tape.constant(Tensor::from_fn([c, 1, 1, SSIM_WINDOW], |_, _, _, i| g[i]));
    let col = tape.constant(Tensor::from_fn([c, 1, SSIM_WINDOW, 1], |_, _, i, _| g[i]));
    let opts = ConvOpts::new(1, 0, c);
    x.conv2d(&row, None, opts)?.conv2d(&col, None, opts)
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    same_shape("ssim", pred, gt)?;
    let [_, _, h, w] = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let mu_x = gaussian_blur(pred)?;
    let mu_y = gaussian_blur(gt)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let s_xx = gaussian_blur(&pred.square())?.sub(&mu_xx)?;
    let s_yy = gaussian_blur(&gt.square())?.sub(&mu_yy)?;
    let s_xy = gaussian_blur(&pred.mul(gt)?)?.sub(&mu_xy)?;
    let num = mu_xy.scale(2.0).add_scalar(SSIM_C1).mul(&s_xy.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_xx.add(&mu_yy)?.add_scalar(SSIM_C1).mul(&s_xx.add(&s_yy)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?.mean_all())
}

pub fn loss_ssim<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    Ok(ssim(pred, gt)?.neg().add_scalar(1.0))
}

/// Frozen random feature stack standing in for a pretrained VGG: three
/// reflect-padded 3x3 convs with ReLU, weights drawn once from a seed.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let mut cin = 3;
        let layers = Self::WIDTHS
            .iter()
            .map(|&cout| {
                // He-uniform keeps feature magnitudes from shrinking with depth
                let w = init.uniform([cout, cin, 3, 3], (6.0 / (cin * 9) as f64).sqrt());
                let b = init.uniform([1, cout, 1, 1], 0.1);
                cin = cout;
                (w, b)
            })
            .collect();
        PerceptualExtractor { layers }
    }

    pub fn features<'t>(&self, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let tape = x.tape();
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = h.pad_reflect(1, 1)?.conv2d(&w, Some(&b), ConvOpts::default())?.relu();
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Mean over layers of the mean absolute feature difference.
pub fn loss_perceptual<'t>(pred: &Var<'t>, gt: &Var<'t>, extractor: &PerceptualExtractor) -> Result<Var<'t>> {
    same_shape("perceptual", pred, gt)?;
    let fp = extractor.features(pred)?;
    let fg = extractor.features(gt)?;
    let mut acc: Option<Var<'t>> = None;
    for (a, b) in fp.iter().zip(&fg) {
        let d = a.sub(b)?.abs().mean_all();
        acc = Some(match acc {
            Some(s) => s.add(&d)?,
            None => d,
        });
    }
    let n = fp.len() as f64;
    Ok(acc.expect("extractor has layers").scale(1.0 / n))
}

/// Softmax-normalised Gaussian-kernel histogram per channel: bin centres
/// `(j + 0.5)/bins`, bandwidth one bin width. Shape `[N,C,bins,1]`.
pub fn soft_histogram<'t>(x: &Var<'t>, bins: usize) -> Result<Var<'t>> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let [n, c, h, w] = x.dims();
    let width = 1.0 / bins as f64;
    let centres = x.tape().constant(Tensor::from_fn([1, 1, bins, 1], |_, _, j, _| (j as f64 + 0.5) * width));
    let d = x.reshape([n, c, 1, h * w])?.sub(&centres)?;
    let counts = d.square().scale(-0.5 / (width * width)).exp().mean_axes(&[3]);
    counts.softmax(2)
}

/// `Σ p (ln p - ln q)` along axis 2, averaged over the remaining axes.
pub fn kl_divergence<'t>(p: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
    same_shape("kl", p, q)?;
    Ok(p.mul(&p.ln().sub(&q.ln())?)?.sum_axes(&[2]).mean_all())
}

pub fn loss_global<'t>(pred: &Var<'t>, gt: &Var<'t>, bins: usize, direction: KlDirection) -> Result<Var<'t>> {
    same_shape("global", pred, gt)?;
    let hp = soft_histogram(pred, bins)?;
    let hg = soft_histogram(gt, bins)?;
    match direction {
        KlDirection::GtPred => kl_divergence(&hg, &hp),
        KlDirection::PredGt => kl_divergence(&hp, &hg),
    }
}

/// Mean over pixels of `1 - cos(pred_px, gt_px)`, evaluated as
/// `½‖p̂ - ĝ‖²` with `v̂ = v / √(‖v‖² + ε²)` so identical pixels (black ones
/// included) give exactly zero.
pub fn loss_color<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    same_shape("color", pred, gt)?;
    if pred.dims()[1] != 3 {
        return Err(Error::shape(format!("color loss expects RGB, got {:?}", pred.shape())));
    }
    let unit = |v: &Var<'t>| -> Result<Var<'t>> {
        v.div(&v.square().sum_axes(&[1]).add_scalar(EPS_DIV * EPS_DIV).sqrt())
    };
    Ok(unit(pred)?.sub(&unit(gt)?)?.square().sum_axes(&[1]).scale(0.5).mean_all())
}

fn forward_diff<'t>(x: &Var<'t>, axis: usize) -> Result<Var<'t>> {
    let len = x.dims()[axis];
    x.narrow(axis, 1, len - 1)?.sub(&x.narrow(axis, 0, len - 1)?)
}

/// `mean|∂x p - ∂x g| + mean|∂y p - ∂y g|` with forward differences.
pub fn loss_grad<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    same_shape("grad", pred, gt)?;
    let mut acc = pred.tape().constant(Tensor::scalar(0.0));
    for axis in [2, 3] {
        if pred.dims()[axis] >= 2 {
            acc = acc.add(&forward_diff(pred, axis)?.sub(&forward_diff(gt, axis)?)?.abs().mean_all())?;
        }
    }
    Ok(acc)
}

/// The weighted loss and its evaluated terms.
#[derive(Clone, Debug)]
pub struct Objective {
    pub config: ObjectiveConfig,
    pub extractor: PerceptualExtractor,
}

impl Objective {
    pub fn new(config: ObjectiveConfig) -> Result<Self> {
        config.weights.validate()?;
        if config.hist_bins < 2 {
            return Err(Error::invalid(format!("hist_bins must be at least 2, got {}", config.hist_bins)));
        }
        Ok(Objective { extractor: PerceptualExtractor::new(config.perceptual_seed), config })
    }

    /// All seven terms on the tape, in report order.
    pub fn terms<'t>(&self, pred: &Var<'t>, gt: &Var<'t>, prior: &Var<'t>, target: &Var<'t>) -> Result<[Var<'t>; 7]> {
        Ok([
            loss_mse(pred, gt)?,
            loss_ssim(pred, gt)?,
            loss_perceptual(pred, gt, &self.extractor)?,
            loss_global(pred, gt, self.config.hist_bins, self.config.kl_direction)?,
            loss_color(pred, gt)?,
            loss_grad(pred, gt)?,
            len_loss(prior, target)?,
        ])
    }

    pub fn total_loss<'t>(
        &self,
        pred: &Var<'t>,
        gt: &Var<'t>,
        prior: &Var<'t>,
        target: &Var<'t>,
    ) -> Result<(Var<'t>, LossReport)> {
        let terms = self.terms(pred, gt, prior, target)?;
        let mut total = pred.tape().constant(Tensor::scalar(0.0));
        for (t, w) in terms.iter().zip(self.config.weights.as_array()) {
            total = total.add(&t.scale(w))?;
        }
        pred.tape().check_finite("objective")?;
        let v: Vec<f64> = terms.iter().map(|t| t.value().item()).collect();
        let report = LossReport {
            mse: v[0],
            ssim: v[1],
            per: v[2],
            global: v[3],
            color: v[4],
            grad: v[5],
            len: v[6],
            total: total.value().item(),
        };
        Ok((total, report))
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("metric inputs {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, peak 1.0, reported as [`PSNR_CAP`] when the MSE is
/// below `1e-10`.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.numel() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn ssim_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let tape = Tape::inference(Precision::F64);
    Ok(ssim(&tape.constant(pred.clone()), &tape.constant(gt.clone()))?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, CheckOptions};
    use crate::numerics::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    fn scene(shape: [usize; 4], phase: f64) -> Tensor {
        Tensor::from_fn(shape, |_, c, y, x| 0.5 + 0.4 * ((x as f64 * 0.4 + phase) + (y as f64 * 0.3 + c as f64)).sin())
    }

    fn eval<'t>(tape: &'t Tape, f: impl FnOnce(&Var<'t>, &Var<'t>) -> Result<Var<'t>>, a: &Tensor, b: &Tensor) -> f64 {
        f(&tape.constant(a.clone()), &tape.constant(b.clone())).unwrap().value().item()
    }

    #[test]
    fn mse_cases() {
        let tape = Tape::new(Precision::F64);
        let a = random([1, 3, 5, 4], 1);
        assert_eq!(eval(&tape, loss_mse, &a, &a), 0.0);
        assert!((eval(&tape, loss_mse, &a.map(|v| v + 0.1), &a) - 0.01).abs() < 1e-12);
        let b = random([1, 3, 5, 4], 2);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((eval(&tape, loss_mse, &a, &b) - acc / 60.0).abs() < 1e-12);
        assert!(loss_mse(&tape.constant(a), &tape.constant(Tensor::zeros([1, 3, 5, 5]))).is_err());
    }

    /// SSIM by explicit window sums at every valid position.
    fn ssim_loop(a: &Tensor, b: &Tensor) -> f64 {
        let g = gaussian_1d(11, 1.5);
        let [n, c, h, w] = a.dims();
        let mut acc = 0.0;
        let mut count = 0.0;
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..=h - 11 {
                    for x in 0..=w - 11 {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..11 {
                            for j in 0..11 {
                                let k = g[i] * g[j];
                                let (p, q) = (a.at(bn, ch, y + i, x + j), b.at(bn, ch, y + i, x + j));
                                mx += k * p;
                                my += k * q;
                                sxx += k * p * p;
                                syy += k * q * q;
                                sxy += k * p * q;
                            }
                        }
                        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                        acc += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                        count += 1.0;
                    }
                }
            }
        }
        acc / count
    }

    #[test]
    fn ssim_cases() {
        let tape = Tape::new(Precision::F64);
        let a = random([1, 3, 13, 14], 3);
        let b = random([1, 3, 13, 14], 4);
        assert!(eval(&tape, loss_ssim, &a, &a).abs() < 1e-12);
        assert!((eval(&tape, ssim, &a, &b) - ssim_loop(&a, &b)).abs() < 1e-10);
        assert!((eval(&tape, loss_ssim, &a, &b) - eval(&tape, loss_ssim, &b, &a)).abs() < 1e-12);

        let binary = Tensor::from_fn([1, 1, 16, 16], |_, _, y, x| ((x / 2 + y / 3) % 2) as f64);
        let inverse = binary.map(|v| 1.0 - v);
        assert!(eval(&tape, loss_ssim, &inverse, &binary) > 0.9);
        let small = Tensor::zeros([1, 3, 10, 20]);
        assert!(ssim(&tape.constant(small.clone()), &tape.constant(small)).is_err());
    }

    #[test]
    fn perceptual_cases() {
        let tape = Tape::new(Precision::F64);
        let ex = PerceptualExtractor::new(3);
        let a = scene([1, 3, 8, 8], 0.0);
        let per = |ex: &PerceptualExtractor, p: &Tensor| {
            loss_perceptual(&tape.constant(p.clone()), &tape.constant(a.clone()), ex).unwrap().value().item()
        };
        assert_eq!(per(&ex, &a), 0.0);
        let noise = random([1, 3, 8, 8], 5).map(|v| v - 0.5);
        let noisy = |amp: f64| a.zip_map(&noise, |x, n| x + amp * n).unwrap();
        let vals: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&amp| per(&ex, &noisy(amp))).collect();
        assert!(vals[0] > 0.0 && vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
        assert_eq!(per(&PerceptualExtractor::new(3), &noisy(0.1)), vals[1]);
    }

    #[test]
    fn kl_two_bins_closed_form() {
        let tape = Tape::new(Precision::F64);
        let p = tape.constant(Tensor::from_vec([1, 1, 2, 1], vec![0.3, 0.7]).unwrap());
        let q = tape.constant(Tensor::from_vec([1, 1, 2, 1], vec![0.6, 0.4]).unwrap());
        let want = 0.3 * (0.3f64 / 0.6).ln() + 0.7 * (0.7f64 / 0.4).ln();
        assert!((kl_divergence(&p, &q).unwrap().value().item() - want).abs() < 1e-12);
    }

    #[test]
    fn global_cases() {
        let tape = Tape::new(Precision::F64);
        let a = random([2, 3, 6, 6], 6);
        fn g<'t>(p: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
            loss_global(p, q, 32, KlDirection::GtPred)
        }
        assert_eq!(eval(&tape, g, &a, &a), 0.0);
        for seed in 0..10 {
            let b = random([2, 3, 6, 6], 100 + seed).map(|v| v * v);
            assert!(eval(&tape, g, &a, &b) > 0.0);
        }
        let h = soft_histogram(&tape.constant(a), 32).unwrap();
        assert_eq!(h.dims(), [2, 3, 32, 1]);
        let sums = h.sum_axes(&[2]);
        assert!(sums.value().data().iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(soft_histogram(&tape.constant(Tensor::zeros([1, 1, 2, 2])), 1).is_err());
    }

    #[test]
    fn color_cases() {
        let tape = Tape::new(Precision::F64);
        let a = random([1, 3, 4, 4], 7);
        assert_eq!(eval(&tape, loss_color, &a, &a), 0.0);
        assert!(eval(&tape, loss_color, &a.map(|v| 2.0 * v), &a) < 1e-9);
        let r = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| (c == 0) as u8 as f64);
        let g = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| (c == 1) as u8 as f64);
        assert!((eval(&tape, loss_color, &r, &g) - 1.0).abs() < 1e-9);
        let black = Tensor::zeros([1, 3, 2, 2]);
        assert_eq!(eval(&tape, loss_color, &black, &black), 0.0);
    }

    #[test]
    fn grad_cases() {
        let tape = Tape::new(Precision::F64);
        let a = random([1, 3, 5, 6], 8);
        assert_eq!(eval(&tape, loss_grad, &a, &a), 0.0);
        assert!(eval(&tape, loss_grad, &a.map(|v| v + 0.3), &a) < 1e-12);
        let ramp = Tensor::from_fn([1, 1, 4, 6], |_, _, _, x| 0.2 + 0.05 * x as f64);
        let flat = Tensor::full([1, 1, 4, 6], ramp.mean());
        assert!((eval(&tape, loss_grad, &ramp, &flat) - 0.05).abs() < 1e-12);
    }

    fn objective(weights: LossWeights) -> Objective {
        Objective::new(ObjectiveConfig { weights, ..Default::default() }).unwrap()
    }

    #[test]
    fn total_loss_cases() {
        let tape = Tape::new(Precision::F32);
        let gt = tape.constant(random([1, 3, 16, 16], 9));
        let pred = tape.constant(random([1, 3, 16, 16], 10));
        let target = tape.constant(random([1, 1, 16, 16], 11));
        let prior = tape.constant(random([1, 1, 16, 16], 12));

        let (_, r) = objective(LossWeights::default()).total_loss(&gt, &gt, &target, &target).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.terms().iter().all(|&t| t.abs() < 1e-6), "{r:?}");

        let (_, r) = objective(LossWeights::zero()).total_loss(&pred, &gt, &prior, &target).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.terms().iter().all(|&t| t > 0.0), "{r:?}");

        let w = LossWeights::default();
        let (_, r) = objective(w).total_loss(&pred, &gt, &prior, &target).unwrap();
        assert!((r.total - r.weighted(&w)).abs() < 1e-6);
        assert!((r.recon_excluding_len(&w) - (r.total - 0.1 * r.len)).abs() < 1e-12);
        assert!(Objective::new(ObjectiveConfig { weights: LossWeights { mse: -1.0, ..w }, ..Default::default() }).is_err());
    }

    #[test]
    fn metric_cases() {
        let a = random([1, 3, 16, 16], 13);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let gray = Tensor::full([1, 3, 16, 16], 0.5);
        let shifted = gray.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&shifted, &gray).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros([1, 3, 16, 15])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_within_unit_bounds(s1 in 0u64..1000, s2 in 0u64..1000, gamma in 0.2f64..3.0) {
            let a = random([1, 1, 12, 12], s1);
            let b = random([1, 1, 12, 12], s2).map(|v| v.powf(gamma));
            let s = ssim_metric(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn color_invariant_to_positive_scaling(seed in 0u64..1000, k in 0.1f64..10.0) {
            let tape = Tape::new(Precision::F64);
            let a = random([1, 3, 3, 3], seed).map(|v| v + 0.05);
            let b = random([1, 3, 3, 3], seed + 1).map(|v| v + 0.05);
            let base = eval(&tape, loss_color, &a, &b);
            prop_assert!((eval(&tape, loss_color, &a.map(|v| k * v), &b) - base).abs() < 1e-9);
            prop_assert!((eval(&tape, loss_color, &a, &b.map(|v| k * v)) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn every_term_matches_finite_differences() {
        let gt = scene([1, 3, 16, 16], 0.7);
        let target = random([1, 1, 16, 16], 14);
        let mut store = ParamStore::new();
        store.insert("pred", random([1, 3, 16, 16], 15).map(|v| 0.1 + 0.8 * v));
        store.insert("prior", random([1, 1, 16, 16], 16));
        let obj = objective(LossWeights::default());
        for term in 0..7 {
            let report = check_gradients(
                &store,
                None,
                |t, s| {
                    let terms = obj.terms(&t.param(s, "pred")?, &t.constant(gt.clone()), &t.param(s, "prior")?, &t.constant(target.clone()))?;
                    Ok(terms[term].clone())
                },
                &CheckOptions { eps: 1e-5, max_coords: 16, seed: term as u64 },
            )
            .unwrap();
            for r in report {
                assert!(r.max_rel_error < 1e-3, "term {term} {}: {:.3e}", r.param, r.max_rel_error);
            }
        }
    }
}
