use super::graph::{AutodiffError, Graph, Var};
use super::tensor::{Precision, Tensor};

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst error over every input element.
    pub max_rel_error: f64,
    /// One entry per input tensor, one error per element.
    pub per_element: Vec<Vec<f64>>,
    pub tol: f64,
    pub passed: bool,
}

/// Error between an analytic and a numeric derivative, relative to the
/// larger of the two magnitudes with a unit floor (so tiny gradients are
/// compared absolutely).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `f` (scalar-valued) at `points` in the given precision.
pub fn grad_check<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    tol: f64,
    precision: Precision,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let g = Graph::new(precision);
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&g, &vars);
    assert_eq!(g.value(loss).len(), 1, "grad_check needs a scalar function");
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64, AutodiffError> {
        let g = Graph::new(precision);
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&g, &vars);
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteValue("perturbed point".into()))
        }
    };

    let mut per_element = Vec::with_capacity(points.len());
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let mut errs = Vec::with_capacity(point.len());
        for e in 0..point.len() {
            let x = point.data()[e];
            work[pi].data_mut()[e] = x + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = x - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = x;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(analytic[pi].data()[e], numeric);
            worst = worst.max(err);
            errs.push(err);
        }
        per_element.push(errs);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        per_element,
        tol,
        passed: worst <= tol,
    })
}
