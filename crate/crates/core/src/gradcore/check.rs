use super::tensor::Tensor;
use super::GradError;

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst_coordinate: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor of the relative error, per unit of `max(1, |f(x)|)`.
/// Rounding in `f` limits central differences to roughly `ε·|f|/h`, so
/// gradients below the floor are in effect compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, coordinate by coordinate, by
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR · max(1, |f(x)|))`. `f` must be
/// deterministic.
pub fn gradient_check<F>(
    f: F,
    params: &[(Vec<usize>, Vec<f64>)],
    h: f64,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, GradError>,
{
    let leaves = params
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&leaves)?;
    let floor = GRAD_CHECK_FLOOR * out.item().abs().max(1.0);
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |pi: usize, ei: usize, delta: f64| -> Result<f64, GradError> {
        let shifted = params
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == pi {
                    d[ei] += delta;
                }
                Tensor::from_vec(s, d)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(f(&shifted)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, (_, d)) in params.iter().enumerate() {
        for ei in 0..d.len() {
            let numeric = (eval(pi, ei, h)? - eval(pi, ei, -h)?) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_err: if rel.is_nan() { f64::INFINITY } else { rel },
                    worst_coordinate: (pi, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
