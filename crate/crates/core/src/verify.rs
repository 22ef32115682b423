//! Finite-difference gradient checks of every learnable module on small
//! seeded inputs, in 64-bit mode.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::causal::{Asc, AscConfig, Neco, NecoConfig};
use crate::error::{Error, Result};
use crate::g2af::{G2af, G2afConfig};
use crate::len::{len_loss, Len};
use crate::nn::{Builder, Scope};
use crate::numerics::{check_gradients, CheckOptions, Initializer, ParamCheck, ParamStore, Tape, Tensor, Var};
use crate::objective::{Objective, ObjectiveConfig};
use crate::uad::{entropy_gradient_diagnostic, EntropyGradientReport, Uad, UadConfig};

pub const DEFAULT_TOL: f64 = 1e-3;

/// Entropy override scales reported alongside the UaD check.
pub const ENTROPY_SCALES: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

const TERM_NAMES: [&str; 7] = ["mse", "ssim", "per", "global", "color", "grad", "len"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckTarget {
    Len,
    G2af,
    Uad,
    Neco,
    Asc,
    Losses,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 6] =
        [CheckTarget::Len, CheckTarget::G2af, CheckTarget::Uad, CheckTarget::Neco, CheckTarget::Asc, CheckTarget::Losses];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Len => "len",
            CheckTarget::G2af => "g2af",
            CheckTarget::Uad => "uad",
            CheckTarget::Neco => "neco",
            CheckTarget::Asc => "asc",
            CheckTarget::Losses => "losses",
        }
    }

    /// A single module name, or `all`.
    pub fn parse_selection(s: &str) -> Result<Vec<CheckTarget>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckTarget::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            Error::invalid(format!("unknown module `{s}` (expected len, g2af, uad, neco, asc, losses or all)"))
        })
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleReport {
    pub module: CheckTarget,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tol: f64,
    pub passed: bool,
    /// `module/param` names whose error exceeds `tol`.
    pub failures: Vec<String>,
    pub modules: Vec<ModuleReport>,
    /// Value-path gradient norms under entropy rescaling (present when UaD
    /// was checked).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_diagnostic: Option<Vec<EntropyGradientReport>>,
}

impl GradcheckReport {
    /// Aligned `module param coords error` lines.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:<36} {:>6} {:>12}\n", "module", "param", "coords", "max_rel_err");
        for m in &self.modules {
            for p in &m.params {
                let flag = if p.max_rel_error <= self.tol { "" } else { "  FAIL" };
                out.push_str(&format!(
                    "{:<8} {:<36} {:>6} {:>12.3e}{flag}\n",
                    m.module.name(),
                    p.param,
                    p.coords_checked,
                    p.max_rel_error
                ));
            }
        }
        out
    }
}

fn options(seed: u64) -> CheckOptions {
    CheckOptions { eps: 1e-5, max_coords: 12, seed }
}

struct Inputs(Initializer);

impl Inputs {
    fn new(seed: u64, salt: u64) -> Self {
        Inputs(Initializer::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt))
    }

    fn unit(&mut self, shape: [usize; 4]) -> Tensor {
        self.0.uniform_range(shape, 0.0, 1.0)
    }

    fn signed(&mut self, shape: [usize; 4], bound: f64) -> Tensor {
        self.0.uniform(shape, bound)
    }
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<(T, ParamStore)> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let module = f(&mut Builder::new(&mut store, &mut init))?;
    Ok((module, store))
}

/// `Σ y ⊙ w` with a fixed random `w`, so every output coordinate matters.
fn weighted_sum<'t>(y: &Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(&y.tape().constant(w.clone()))?.sum_all())
}

fn check_len(seed: u64) -> Result<Vec<ParamCheck>> {
    let (len, store) = build(seed, |b| Ok(Len::build(b, 4)))?;
    let mut inp = Inputs::new(seed, 1);
    let x = inp.unit([1, 3, 5, 5]);
    let target = inp.unit([1, 1, 5, 5]).map(|v| 0.2 + 0.6 * v);
    check_gradients(
        &store,
        None,
        |t, s| {
            let p = len.forward(&Scope::eval(t, s), &t.constant(x.clone()))?;
            len_loss(&p, &t.constant(target.clone()))
        },
        &options(seed),
    )
}

fn check_g2af(seed: u64) -> Result<Vec<ParamCheck>> {
    let (g, store) = build(seed, |b| Ok(G2af::build(b, 3, G2afConfig::default())))?;
    let mut inp = Inputs::new(seed, 2);
    let x = inp.signed([1, 3, 5, 4], 1.0);
    let w = inp.signed([1, 3, 5, 4], 1.0);
    check_gradients(
        &store,
        None,
        |t, s| weighted_sum(&g.forward(&Scope::eval(t, s), &t.constant(x.clone()))?, &w),
        &options(seed),
    )
}

fn uad_setup(seed: u64) -> Result<(Uad, ParamStore, Tensor)> {
    let config = UadConfig { d_head: 4, ..UadConfig::default() };
    let (uad, store) = build(seed, |b| Ok(Uad::build(b, 4, config, G2afConfig::default())))?;
    let x = Inputs::new(seed, 3).signed([1, 4, 4, 4], 2.0);
    Ok((uad, store, x))
}

fn check_uad(seed: u64) -> Result<Vec<ParamCheck>> {
    let (uad, store, x) = uad_setup(seed)?;
    let w = Inputs::new(seed, 4).signed([1, 4, 4, 4], 1.0);
    check_gradients(
        &store,
        None,
        |t, s| weighted_sum(&uad.forward(&Scope::eval(t, s), &t.constant(x.clone()))?, &w),
        &options(seed),
    )
}

/// Entropy-scale diagnostic of a standalone UaD block under a squared-error
/// loss, at each of [`ENTROPY_SCALES`].
pub fn uad_entropy_diagnostic(seed: u64) -> Result<Vec<EntropyGradientReport>> {
    let (uad, store, x) = uad_setup(seed)?;
    let target = Inputs::new(seed, 5).signed([1, 4, 4, 4], 1.0);
    ENTROPY_SCALES
        .iter()
        .map(|&scale| {
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
        })
        .collect()
}

fn check_neco(seed: u64) -> Result<Vec<ParamCheck>> {
    let (neco, store) = build(seed, |b| Ok(Neco::build(b, 3, NecoConfig::default())))?;
    let mut inp = Inputs::new(seed, 6);
    let x = inp.signed([1, 3, 4, 5], 1.0);
    let w = inp.signed([1, 3, 4, 5], 1.0);
    check_gradients(
        &store,
        None,
        |t, s| weighted_sum(&neco.forward(&Scope::eval(t, s), &t.constant(x.clone()))?, &w),
        &options(seed),
    )
}

fn check_asc(seed: u64) -> Result<Vec<ParamCheck>> {
    let (asc, store) = build(seed, |b| Asc::build(b, 3, AscConfig::default()))?;
    let mut inp = Inputs::new(seed, 7);
    let x = inp.signed([1, 3, 5, 6], 1.0);
    let w = inp.signed([1, 3, 5, 6], 1.0);
    // top-k selection is piecewise constant: freeze it at the base point
    let tape = Tape::new(crate::numerics::Precision::F64);
    let probe = Scope::eval(&tape, &store);
    asc.forward(&probe, &tape.constant(x.clone()))?;
    let frozen = probe.selections();
    check_gradients(
        &store,
        None,
        |t, s| {
            let scope = Scope::eval(t, s).with_selections(frozen.clone());
            weighted_sum(&asc.forward(&scope, &t.constant(x.clone()))?, &w)
        },
        &options(seed),
    )
}

/// Each of the seven loss terms, differentiated with respect to the
/// prediction and the LEN prior.
fn check_losses(seed: u64) -> Result<Vec<ParamCheck>> {
    let mut inp = Inputs::new(seed, 8);
    let gt = inp.unit([1, 3, 16, 16]);
    let target = inp.unit([1, 1, 16, 16]);
    let mut store = ParamStore::new();
    store.insert("pred", inp.unit([1, 3, 16, 16]).map(|v| 0.1 + 0.8 * v));
    store.insert("prior", inp.unit([1, 1, 16, 16]));
    let obj = Objective::new(ObjectiveConfig::default())?;
    let mut out = Vec::new();
    for (i, term) in TERM_NAMES.iter().enumerate() {
        let report = check_gradients(
            &store,
            None,
            |t, s| {
                let terms = obj.terms(&t.param(s, "pred")?, &t.constant(gt.clone()), &t.param(s, "prior")?, &t.constant(target.clone()))?;
                Ok(terms[i].clone())
            },
            &options(seed.wrapping_add(i as u64)),
        )?;
        out.extend(report.into_iter().map(|mut r| {
            r.param = format!("{term}.{}", r.param);
            r
        }));
    }
    Ok(out)
}

pub fn check_module(target: CheckTarget, seed: u64) -> Result<Vec<ParamCheck>> {
    match target {
        CheckTarget::Len => check_len(seed),
        CheckTarget::G2af => check_g2af(seed),
        CheckTarget::Uad => check_uad(seed),
        CheckTarget::Neco => check_neco(seed),
        CheckTarget::Asc => check_asc(seed),
        CheckTarget::Losses => check_losses(seed),
    }
}

/// Runs the selected checks; the report passes iff every error is `<= tol`.
pub fn run_gradcheck(targets: &[CheckTarget], seed: u64, tol: f64) -> Result<GradcheckReport> {
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {tol}")));
    }
    let mut modules = Vec::with_capacity(targets.len());
    let mut failures = Vec::new();
    for &target in targets {
        let params = check_module(target, seed)?;
        for p in &params {
            // NaN counts as a failure
            if !(p.max_rel_error <= tol) {
                failures.push(format!("{target}/{}", p.param));
            }
        }
        let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
        modules.push(ModuleReport { module: target, max_rel_error, params });
    }
    let entropy_diagnostic =
        if targets.contains(&CheckTarget::Uad) { Some(uad_entropy_diagnostic(seed)?) } else { None };
    Ok(GradcheckReport { seed, tol, passed: failures.is_empty(), failures, modules, entropy_diagnostic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parsing() {
        assert_eq!(CheckTarget::parse_selection("all").unwrap().len(), 6);
        assert_eq!(CheckTarget::parse_selection("neco").unwrap(), [CheckTarget::Neco]);
        assert!(matches!(CheckTarget::parse_selection("vgg"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn every_module_passes_across_seeds() {
        for seed in [1, 2] {
            let report = run_gradcheck(&CheckTarget::ALL, seed, DEFAULT_TOL).unwrap();
            assert!(report.passed, "seed {seed}: {:?}\n{}", report.failures, report.table());
        }
    }

    #[test]
    fn zero_tolerance_fails_and_names_parameters() {
        let report = run_gradcheck(&[CheckTarget::Len], 0, 0.0).unwrap();
        assert!(!report.passed);
        assert!(report.failures.iter().all(|f| f.starts_with("len/len.")));
        assert!(report.entropy_diagnostic.is_none());
    }

    #[test]
    fn loss_report_covers_all_terms() {
        let params = check_module(CheckTarget::Losses, 0).unwrap();
        assert_eq!(params.len(), 14);
        assert_eq!(params[0].param, "mse.pred");
        assert_eq!(params[13].param, "len.prior");
    }

    #[test]
    fn entropy_diagnostic_zero_scale_is_exact() {
        let d = uad_entropy_diagnostic(0).unwrap();
        assert_eq!(d.len(), ENTROPY_SCALES.len());
        assert_eq!(d[0].value_path_norm_scaled, 0.0);
        assert!(d[0].value_path_norm > 0.0);
        assert_eq!(d[2].value_path_ratio, 1.0);
    }
}
