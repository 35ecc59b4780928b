//! Central finite differences, the reference every analytic gradient in this
//! crate is checked against.

use crate::error::Result;
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error accepted between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor for [`relative_error`]; below this magnitude both
/// gradients are treated as zero and the absolute error is compared.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every element of `param`.
/// The parameter is restored bit-exactly afterwards.
pub fn finite_difference_gradient(
    param: &mut Parameter,
    h: f64,
    mut f: impl FnMut(&Parameter) -> f64,
) -> Vec<f64> {
    let original = param.data().to_vec();
    let mut out = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        let mut probe = original.clone();
        probe[i] = original[i] + h;
        param.set_data(probe.clone()).expect("same size");
        let plus = f(param);
        probe[i] = original[i] - h;
        param.set_data(probe).expect("same size");
        let minus = f(param);
        out.push((plus - minus) / (2.0 * h));
    }
    param.set_data(original).expect("same size");
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced entries of each parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries_checked > 0 && self.max_rel_err < TOLERANCE
    }
}

fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares `backward` gradients of `loss(module)` with central differences
/// for every parameter of `module`.
pub fn check_module<M: Module>(
    module: &mut M,
    opts: &GradCheckOptions,
    loss: impl Fn(&M) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    module.zero_grad();
    loss(module)?.backward()?;
    let analytic: Vec<Vec<f64>> = module
        .parameters()
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.data().len()]))
        .collect();
    module.zero_grad();

    let mut report = GradCheckReport::default();
    for (pi, grads) in analytic.iter().enumerate() {
        let original = module.parameters()[pi].data().to_vec();
        for idx in probe_indices(original.len(), opts.max_entries_per_param) {
            let mut probe = original.clone();
            probe[idx] = original[idx] + opts.step;
            module.parameters_mut()[pi].set_data(probe.clone())?;
            let plus = loss(module)?.item();
            probe[idx] = original[idx] - opts.step;
            module.parameters_mut()[pi].set_data(probe)?;
            let minus = loss(module)?.item();
            module.parameters_mut()[pi].set_data(original.clone())?;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grads[idx], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    param: module.parameters()[pi].name().to_string(),
                    index: idx,
                    analytic: grads[idx],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
