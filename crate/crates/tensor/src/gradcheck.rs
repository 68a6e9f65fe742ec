//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`compare_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    /// Perturbation `h` in `(f(x + h) - f(x - h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that
    /// vanish analytically are compared in absolute terms.
    pub floor: f64,
    /// Points whose one-sided slopes disagree by more than this (relative)
    /// are treated as kinks and excluded.
    pub kink_tol: f64,
    /// Check at most this many coordinates, chosen deterministically.
    pub max_coords: Option<usize>,
}

impl FdConfig {
    pub fn new(step: f64, tol: f64) -> Self {
        FdConfig {
            step,
            tol,
            floor: 1e-3,
            kink_tol: 1e-2,
            max_coords: None,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

impl Default for FdConfig {
    fn default() -> Self {
        Self::new(1e-5, 1e-6)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped as non-differentiable points.
    pub kinks: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `eval` around `x`.
pub fn compare_gradients(
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
    cfg: &FdConfig,
) -> Result<FdReport> {
    if analytic.shape() != x.shape() {
        return Err(TensorError::mismatch("compare_gradients", analytic.shape(), x.shape()));
    }
    let n = x.numel();
    let coords: Vec<usize> = match cfg.max_coords {
        Some(m) if m < n => {
            let mut all: Vec<usize> = (0..n).collect();
            Rng::new(0x6772_6164).shuffle(&mut all);
            all.truncate(m);
            all.sort_unstable();
            all
        }
        _ => (0..n).collect(),
    };
    let f0 = eval(x)?;
    let h = cfg.step;
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        kinks: 0,
        tol: cfg.tol,
        passed: true,
    };
    let mut probe = x.clone();
    for &i in &coords {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > cfg.kink_tol * 1f64.max(forward.abs()).max(backward.abs()) {
            report.kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / cfg.floor.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= cfg.tol && report.max_rel_error.is_finite();
    Ok(report)
}

/// Checks the gradient of scalar `f` at `x` against central differences.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<FdReport>
where
    F: for<'t> Fn(&Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    check_with(f, x, &FdConfig::new(step, tol))
}

pub fn check_with<F>(f: F, x: &Tensor<f64>, cfg: &FdConfig) -> Result<FdReport>
where
    F: for<'t> Fn(&Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&xv)?;
    if y.value().numel() != 1 {
        return Err(TensorError::NonScalarLoss(y.shape().to_vec()));
    }
    let analytic = if y.requires_grad() {
        let grads = tape.backward(&y)?;
        grads.get(&xv).cloned().unwrap_or_else(|| x.zeros_like())
    } else {
        x.zeros_like()
    };
    compare_gradients(&analytic, x, |probe| {
        let tape = Tape::inference();
        f(&tape.constant(probe.clone()))?.value().item()
    }, cfg)
}
