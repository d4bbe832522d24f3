use super::{Graph, Tensor, Var};
use crate::error::{MartError, Result};

/// Denominator floor for the relative error: gradients much smaller than this
/// are compared on an absolute scale instead.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub rel_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            rel_floor: DEFAULT_REL_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because the `±h` evaluations took a different
    /// ReLU or max-pool branch than the base point.
    pub kinks: usize,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, element by element, over every parameter tensor.
///
/// A central difference across a ReLU or max-pool switch point measures the
/// kink rather than the gradient, so such coordinates are counted in
/// `kinks` and left out of the error. The check fails if nothing is left.
///
/// `f` builds the function on a fresh graph from parameter variables.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei)))
        .collect();
    grad_check_at(f, params, cfg, &coords)
}

/// [`grad_check`] restricted to `(parameter index, element index)` pairs.
pub fn grad_check_at<F>(
    f: F,
    params: &[Tensor<f64>],
    cfg: GradCheckConfig,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if let Some(&(pi, ei)) = coords.iter().find(|&&(pi, ei)| params.get(pi).is_none_or(|p| ei >= p.len())) {
        return Err(MartError::dim(format!("gradient check coordinate ({pi}, {ei}) out of range")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let g = Graph::new();
        let vars: Vec<_> = ps.iter().map(|p| g.param(p.clone())).collect();
        let y = f(&g, &vars)?.value().item();
        if !y.is_finite() {
            return Err(MartError::Numeric(format!(
                "gradient check aborted: function value {y} is not finite"
            )));
        }
        Ok((y, g.branch_signature()))
    };

    let (analytic, base): (Vec<Tensor<f64>>, u64) = {
        let g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let y = f(&g, &vars)?;
        if !y.value().item().is_finite() {
            return Err(MartError::Numeric(
                "gradient check aborted: function value is not finite".into(),
            ));
        }
        let grads = g.backward(y)?;
        (vars.iter().map(|v| grads.get_or_zeros(*v)).collect(), g.branch_signature())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        kinks: 0,
        passed: true,
    };
    for &(pi, ei) in coords {
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + cfg.step;
        let (up, sig_up) = eval(&work)?;
        work[pi].data_mut()[ei] = orig - cfg.step;
        let (down, sig_down) = eval(&work)?;
        work[pi].data_mut()[ei] = orig;
        if sig_up != base || sig_down != base {
            report.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[pi].data()[ei];
        let err = relative_error(a, numeric, cfg.rel_floor);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = (pi, ei);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}
