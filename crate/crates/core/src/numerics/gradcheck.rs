//! Central-difference gradient oracle and a parameter-level checker that
//! compares it with the tape's backward pass in 64-bit mode.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Precision, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Central differences `(f(θ+εe_i) - f(θ-εe_i)) / 2ε` at every coordinate.
///
/// `f` is evaluated twice at `θ` first; if the two results differ bitwise
/// the function is rejected as non-deterministic.
pub fn fd_gradient(f: impl Fn(&Tensor) -> Result<f64>, theta: &Tensor, eps: f64) -> Result<Tensor> {
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let g = fd_gradient_at(f, theta, eps, &coords)?;
    Tensor::from_vec(theta.shape(), g)
}

/// Central differences at the listed flat coordinates only.
pub fn fd_gradient_at(
    f: impl Fn(&Tensor) -> Result<f64>,
    theta: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let a = f(theta)?;
    let b = f(theta)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let base = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(theta.shape(), plus)?)?;
        let fm = f(&Tensor::from_vec(theta.shape(), minus)?)?;
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest per-coordinate deviation, scaled by the larger of the two
/// gradients' max-magnitudes (floored at `1e-8`).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// [`relative_error`] with an explicit lower bound on the scale.
pub fn relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { eps: DEFAULT_EPS, max_coords: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub param: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    /// Gradient magnitude below which central differences are dominated by
    /// round-off in the loss; used as the lower bound of the error scale.
    pub noise_floor: f64,
    /// Largest `|fd(ε) - fd(2ε)|` over the checked coordinates.
    pub fd_uncertainty: f64,
}

/// Largest deviation beyond the per-coordinate oracle uncertainty, scaled
/// as in [`relative_error_with_floor`].
///
/// Where the loss is smooth at the scale of the step, `|fd(ε) - fd(2ε)|` is
/// tiny and the check is as strict as a plain relative error; round-off and
/// kinks within `2ε` show up as disagreement between the two steps.
pub fn excess_error(analytic: &[f64], numeric: &[f64], uncertainty: &[f64], floor: f64) -> f64 {
    assert!(analytic.len() == numeric.len() && numeric.len() == uncertainty.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    let excess = analytic
        .iter()
        .zip(numeric)
        .zip(uncertainty)
        .fold(0.0f64, |m, ((a, n), u)| m.max(((a - n).abs() - u).max(0.0)));
    excess / scale
}

/// Round-off level of a central difference of a loss of magnitude `loss`,
/// allowing for error accumulated over many ops.
pub fn fd_noise_floor(loss: f64, eps: f64) -> f64 {
    (100.0 * f64::EPSILON * (loss.abs() + 1.0) / eps).max(1e-8)
}

/// Compares backward-pass gradients of `loss` with central differences for
/// every parameter in `store` (or only `names`), in 64-bit mode.
pub fn check_gradients<L>(store: &ParamStore, names: Option<&[String]>, loss: L, opts: &CheckOptions) -> Result<Vec<ParamCheck>>
where
    L: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new(Precision::F64);
    let out = loss(&tape, store)?;
    let grads = tape.backward(&out)?;
    let noise_floor = fd_noise_floor(out.value().item(), opts.eps);

    let selected: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => store.names().map(str::to_string).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(selected.len());
    for name in selected {
        let theta = store
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let analytic_full = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(theta.shape()));
        let coords: Vec<usize> = if theta.numel() <= opts.max_coords {
            (0..theta.numel()).collect()
        } else {
            let mut c = sample(&mut rng, theta.numel(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let f = |t: &Tensor| -> Result<f64> {
            let mut s = store.clone();
            s.set_exact(&name, t.clone());
            let tape = Tape::new(Precision::F64);
            Ok(loss(&tape, &s)?.value().item())
        };
        let numeric = fd_gradient_at(&f, &theta, opts.eps, &coords)?;
        let coarse = fd_gradient_at(&f, &theta, 2.0 * opts.eps, &coords)?;
        let analytic: Vec<f64> = coords.iter().map(|&i| analytic_full.data()[i]).collect();
        let uncertainty: Vec<f64> = numeric.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).collect();
        report.push(ParamCheck {
            max_rel_error: excess_error(&analytic, &numeric, &uncertainty, noise_floor),
            noise_floor,
            fd_uncertainty: uncertainty.iter().fold(0.0, |m: f64, &u| m.max(u)),
            analytic_norm: analytic_full.norm_l2(),
            coords_checked: coords.len(),
            param: name,
        });
    }
    Ok(report)
}
