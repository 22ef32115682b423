//! Gaussian-guided adaptive frequency enhancement: spectrum-scaled Gaussian
//! masks split features into low and high bands that are fused back in.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Builder, ChannelNorm, Conv2d, Scope};
use crate::numerics::{concat, fft2, ifft2, ComplexVar, Tensor, Var};

/// Guard in the mask denominators `2r² + ε`.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2afConfig {
    /// Weight of the low band; the high band gets `1 - lambda`.
    pub lambda: f64,
    pub r_low_init: f64,
    pub r_high_init: f64,
    /// Use `1 - exp(..)` for the high mask instead of a second Gaussian.
    pub complementary_high_mask: bool,
}

impl Default for G2afConfig {
    fn default() -> Self {
        G2afConfig { lambda: 0.5, r_low_init: 0.3, r_high_init: 0.1, complementary_high_mask: false }
    }
}

/// `linspace(-1, 1, n)`; a single sample sits at 0.
fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    // (2i - (n-1)) / (n-1) keeps the grid exactly symmetric about its centre
    (0..n).map(|i| (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64).collect()
}

/// Radial distance grid `[1,1,H,W]`: rows span `linspace(-1,1,H)`, columns
/// `linspace(-1,1,W)`.
pub fn make_dist_grid(h: usize, w: usize) -> Tensor {
    let (dx, dy) = (linspace(h), linspace(w));
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| (dx[y] * dx[y] + dy[x] * dy[x]).sqrt())
}

/// `r · mean_{C,H,W} σ(|spectrum|)` per sample, shape `[N,1,1,1]`.
pub fn adaptive_radius<'t>(spectrum: &ComplexVar<'t>, r: &Var<'t>) -> Result<Var<'t>> {
    let gate = spectrum.magnitude()?.sigmoid().mean_axes(&[1, 2, 3]);
    gate.mul(r)
}

/// `exp(-d² / (2r² + ε))`, broadcast to `[N,1,H,W]`.
pub fn gaussian_mask<'t>(grid: &Var<'t>, r_eff: &Var<'t>) -> Result<Var<'t>> {
    let denom = r_eff.square().scale(2.0).add_scalar(MASK_EPS);
    Ok(grid.square().div(&denom)?.neg().exp())
}

/// Low and high masks for the given effective radii.
pub fn gaussian_masks<'t>(
    grid: &Var<'t>,
    r_low_eff: &Var<'t>,
    r_high_eff: &Var<'t>,
    complementary_high: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    let low = gaussian_mask(grid, r_low_eff)?;
    let mut high = gaussian_mask(grid, r_high_eff)?;
    if complementary_high {
        high = high.neg().add_scalar(1.0);
    }
    Ok((low, high))
}

/// The two weighted spatial bands and the discarded-imaginary diagnostic.
pub struct Bands<'t> {
    pub low: Var<'t>,
    pub high: Var<'t>,
    pub max_imag: f64,
}

impl<'t> Bands<'t> {
    pub fn sum(&self) -> Result<Var<'t>> {
        self.low.add(&self.high)
    }
}

/// `λ·iFFT(FFT(x) ⊙ low)` and `(1-λ)·iFFT(FFT(x) ⊙ high)`.
pub fn band_decomposition<'t>(
    spectrum: &ComplexVar<'t>,
    low_mask: &Var<'t>,
    high_mask: &Var<'t>,
    lambda: f64,
) -> Result<Bands<'t>> {
    let (low, imag_low) = ifft2(&spectrum.mul_real(low_mask)?)?;
    let (high, imag_high) = ifft2(&spectrum.mul_real(high_mask)?)?;
    Ok(Bands { low: low.scale(lambda), high: high.scale(1.0 - lambda), max_imag: imag_low.max(imag_high) })
}

#[derive(Clone, Debug)]
pub struct G2af {
    pub r_low: String,
    pub r_high: String,
    pub cba_conv: Conv2d,
    pub cba_norm: ChannelNorm,
    pub fuse: Conv2d,
    pub config: G2afConfig,
}

impl G2af {
    pub fn build(b: &mut Builder, channels: usize, config: G2afConfig) -> Self {
        let mut b = b.sub("g2af");
        G2af {
            r_low: b.constant("r_low", Tensor::scalar(config.r_low_init)),
            r_high: b.constant("r_high", Tensor::scalar(config.r_high_init)),
            cba_conv: Conv2d::same(&mut b, "cba_conv", channels, channels, 3),
            cba_norm: ChannelNorm::build(&mut b, "cba_norm", channels),
            fuse: Conv2d::pointwise(&mut b, "fuse", 2 * channels, channels),
            config,
        }
    }

    /// Masks and bands for `x`, before the CBA/fuse stage.
    pub fn bands<'t>(&self, s: &Scope<'_, 't>, x: &Var<'t>) -> Result<Bands<'t>> {
        let [_, _, h, w] = x.dims();
        let spectrum = fft2(x)?;
        s.tape.check_finite("g2af.fft")?;
        let r_low = adaptive_radius(&spectrum, &s.param(&self.r_low)?)?;
        let r_high = adaptive_radius(&spectrum, &s.param(&self.r_high)?)?;
        let grid = s.constant(make_dist_grid(h, w));
        let (low, high) = gaussian_masks(&grid, &r_low, &r_high, self.config.complementary_high_mask)?;
        band_decomposition(&spectrum, &low, &high, self.config.lambda)
    }

    /// `Conv1x1(cat(CBA(F_low + F_high), x))`.
    pub fn forward<'t>(&self, s: &Scope<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let bands = self.bands(s, x)?;
        let merged = bands.sum()?;
        let cba = self.cba_norm.forward(s, &self.cba_conv.forward(s, &merged)?)?.silu();
        let out = self.fuse.forward(s, &concat(&[&cba, x], 1)?)?;
        s.tape.check_finite("g2af")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, CheckOptions};
    use crate::numerics::{fft2_tensor, Initializer, ParamStore, Precision, Tape};

    fn setup(channels: usize, config: G2afConfig) -> (G2af, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(6);
        let g = G2af::build(&mut Builder::new(&mut store, &mut init), channels, config);
        (g, store)
    }

    fn feature(shape: [usize; 4]) -> Tensor {
        Tensor::from_fn(shape, |n, c, y, x| ((n * 41 + c * 13 + y * 5 + x * 3) as f64 * 0.53).sin())
    }

    #[test]
    fn grid_centre_corners_and_loop() {
        let g = make_dist_grid(3, 3);
        assert_eq!(g.at(0, 0, 1, 1), 0.0);
        assert!((g.at(0, 0, 0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((g.at(0, 0, 2, 2) - 2f64.sqrt()).abs() < 1e-15);

        let g = make_dist_grid(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let dx = -1.0 + 2.0 * y as f64 / 3.0;
                let dy = -1.0 + 2.0 * x as f64 / 3.0;
                assert!((g.at(0, 0, y, x) - (dx * dx + dy * dy).sqrt()).abs() < 1e-14);
                // 180 degree rotation symmetry
                assert_eq!(g.at(0, 0, y, x), g.at(0, 0, 3 - y, 3 - x));
            }
        }
    }

    #[test]
    fn radius_limits_and_loop_oracle() {
        let tape = Tape::new(Precision::F64);
        let r = tape.constant(Tensor::scalar(0.3));
        let zero = ComplexVar { re: tape.constant(Tensor::zeros([1, 2, 4, 4])), im: tape.constant(Tensor::zeros([1, 2, 4, 4])) };
        assert!((adaptive_radius(&zero, &r).unwrap().value().item() - 0.15).abs() < 1e-6);
        let huge = ComplexVar { re: tape.constant(Tensor::full([1, 2, 4, 4], 1e3)), im: zero.im.clone() };
        assert!((adaptive_radius(&huge, &r).unwrap().value().item() - 0.3).abs() < 1e-12);

        let re = feature([2, 2, 4, 4]);
        let im = feature([2, 2, 4, 4]).map(|v| v * 0.7 - 0.1);
        let z = ComplexVar { re: tape.constant(re.clone()), im: tape.constant(im.clone()) };
        let got = adaptive_radius(&z, &r).unwrap();
        for n in 0..2 {
            let mut acc = 0.0;
            for i in 0..32 {
                let k = n * 32 + i;
                let m = (re.data()[k].powi(2) + im.data()[k].powi(2) + 1e-12).sqrt();
                acc += 1.0 / (1.0 + (-m).exp());
            }
            assert!((got.value().data()[n] - 0.3 * acc / 32.0).abs() < 1e-12);
            assert!(got.value().data()[n] > 0.0 && got.value().data()[n] < 0.3);
        }
    }

    #[test]
    fn mask_values() {
        let tape = Tape::new(Precision::F64);
        let grid = tape.constant(Tensor::from_vec([1, 1, 1, 3], vec![0.0, 0.3, 1.0]).unwrap());
        let r = tape.constant(Tensor::scalar(0.3));
        let m = gaussian_mask(&grid, &r).unwrap();
        assert_eq!(m.value().data()[0], 1.0);
        assert!((m.value().data()[1] - (-0.09f64 / (0.18 + 1e-6)).exp()).abs() < 1e-12);
        assert!((m.value().data()[1] - 0.6065).abs() < 1e-4);
        let tiny = gaussian_mask(&grid, &tape.constant(Tensor::scalar(0.0))).unwrap();
        assert_eq!(tiny.value().data()[0], 1.0);
        assert!(tiny.value().data()[1] < 1e-12);
    }

    #[test]
    fn masks_monotone_and_ordered() {
        let tape = Tape::new(Precision::F64);
        for (h, w) in [(5, 5), (6, 8), (7, 4)] {
            let grid = tape.constant(make_dist_grid(h, w));
            let rl = tape.constant(Tensor::scalar(0.25));
            let rh = tape.constant(Tensor::scalar(0.1));
            let (lo, hi) = gaussian_masks(&grid, &rl, &rh, false).unwrap();
            let (g, lo, hi) = (grid.value(), lo.value(), hi.value());
            for i in 0..h * w {
                assert!(lo.data()[i] >= hi.data()[i]);
                assert!(lo.data()[i] > 0.0 && lo.data()[i] <= 1.0);
            }
            // non-increasing in distance for any pair of cells
            for i in 0..h * w {
                for j in 0..h * w {
                    if g.data()[i] <= g.data()[j] {
                        assert!(lo.data()[i] >= lo.data()[j] && hi.data()[i] >= hi.data()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_keeps_only_dc() {
        let (g, store) = setup(2, G2afConfig::default());
        let tape = Tape::new(Precision::F64);
        let s = Scope::eval(&tape, &store);
        let x = tape.constant(Tensor::full([1, 2, 5, 7], 0.4));
        let bands = g.bands(&s, &x).unwrap();
        let sum = bands.sum().unwrap();
        assert!(sum.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn unit_masks_reproduce_input() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(feature([1, 3, 6, 5]));
        let z = fft2(&x).unwrap();
        let grid = tape.constant(make_dist_grid(6, 5));
        let big = tape.constant(Tensor::scalar(1e9));
        let (lo, hi) = gaussian_masks(&grid, &big, &big, false).unwrap();
        let bands = band_decomposition(&z, &lo, &hi, 0.5).unwrap();
        assert!(bands.sum().unwrap().value().max_abs_diff(x.value()) < 1e-12);
    }

    #[test]
    fn band_energy_bounded_by_input() {
        for (h, w, odd) in [(5, 7, true), (6, 6, false)] {
            let tape = Tape::new(Precision::F64);
            let xt = feature([1, 2, h, w]);
            let x = tape.constant(xt.clone());
            let z = fft2(&x).unwrap();
            let grid = tape.constant(make_dist_grid(h, w));
            let (lo, _) = gaussian_masks(&grid, &tape.constant(Tensor::scalar(0.4)), &tape.constant(Tensor::scalar(0.1)), false).unwrap();
            let bands = band_decomposition(&z, &lo, &lo, 1.0).unwrap();
            let input_energy = fft2_tensor(&xt).energy();
            let masked = z.mul_real(&lo).unwrap().to_tensor().energy();
            let spatial = bands.low.value().data().iter().map(|v| v * v).sum::<f64>() * (h * w) as f64;
            assert!(masked <= input_energy);
            assert!(spatial <= input_energy * (1.0 + 1e-12));
            if odd {
                // symmetric mask keeps the spectrum Hermitian: Parseval holds exactly
                assert!((spatial - masked).abs() <= 1e-4 * masked);
                assert!(bands.max_imag < 1e-12);
            }
        }
    }

    #[test]
    fn complementary_high_mask_is_one_minus_gaussian() {
        let tape = Tape::new(Precision::F64);
        let grid = tape.constant(make_dist_grid(5, 5));
        let r = tape.constant(Tensor::scalar(0.2));
        let (lo, hi) = gaussian_masks(&grid, &r, &r, true).unwrap();
        for (a, b) in lo.value().data().iter().zip(hi.value().data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_shape_and_gradients() {
        let (g, store) = setup(3, G2afConfig::default());
        let x = feature([1, 3, 5, 4]);
        let tape = Tape::new(Precision::F32);
        let y = g.forward(&Scope::eval(&tape, &store), &tape.constant(x.clone())).unwrap();
        assert_eq!(y.dims(), [1, 3, 5, 4]);

        let weights = feature([1, 3, 5, 4]).map(|v| v.cos());
        let report = check_gradients(
            &store,
            None,
            |t, s| {
                let y = g.forward(&Scope::eval(t, s), &t.constant(x.clone()))?;
                Ok(y.mul(&t.constant(weights.clone()))?.sum_all())
            },
            &CheckOptions { eps: 1e-5, max_coords: 12, seed: 2 },
        )
        .unwrap();
        for r in &report {
            assert!(r.max_rel_error < 1e-3, "{}: {:.3e}", r.param, r.max_rel_error);
        }
        let radius = report.iter().find(|r| r.param == "g2af.r_low").unwrap();
        assert!(radius.analytic_norm > 0.0);
    }
}
