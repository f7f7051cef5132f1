/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every coordinate.
pub fn central_differences<F>(f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let fp = f(&p);
            p[i] = orig - step;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Components smaller than this fraction of the largest numeric component
/// are compared against that floor rather than their own magnitude, so
/// structurally zero gradients are not judged on difference noise.
pub const GRADCHECK_REL_FLOOR: f64 = 1e-4;

/// Max over parameters of `|a − n| / max(|a|, |n|, floor)` with
/// `floor = max(GRADCHECK_REL_FLOOR·‖n‖∞, 1e-12)`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], step: f64) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let numeric = central_differences(f, params, step);
    let floor = (GRADCHECK_REL_FLOOR * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-12);
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
    }
    GradCheck {
        max_rel_err: worst.0,
        worst_index: worst.1,
        analytic: analytic.to_vec(),
        numeric,
    }
}
