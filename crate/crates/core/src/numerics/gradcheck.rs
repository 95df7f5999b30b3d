//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::{NumericsError, Tensor};

/// Gradients whose magnitude is below this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest error over elements whose `+-eps` stencil stays on one linear
    /// piece of every `relu6`.
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose `+-eps` stencil crosses a `relu6` kink, where a
    /// central difference does not estimate the derivative.
    pub kinked: usize,
    /// Largest error of the kinked elements at the original `eps`.
    pub kinked_max_rel_error: f64,
    /// Largest error of the kinked elements, each re-differenced at the
    /// largest `eps / 10^k` whose stencil no longer crosses a kink.
    pub refined_max_rel_error: f64,
    /// Kinked elements still crossing a kink at `eps / 10^4`.
    pub unresolved: usize,
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences `(f(x + eps) - f(x - eps)) / 2 eps` for every element of every
/// parameter. Stencils that straddle a `relu6` kink are reported apart and
/// re-differenced with a smaller step.
pub fn finite_difference_check<F>(
    params: &[Tensor<f64>],
    eps: f64,
    build: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<(f64, Vec<i8>), NumericsError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        let v = g
            .value(out)
            .item()
            .ok_or_else(|| NumericsError::NonScalarLoss(g.value(out).shape().to_vec()))?;
        Ok((v, g.relu6_regions()))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let base = g.relu6_regions();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinked: 0,
        kinked_max_rel_error: 0.0,
        refined_max_rel_error: 0.0,
        unresolved: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let stencil = |work: &mut Vec<Tensor<f64>>, pi: usize, ei: usize, h: f64| {
        let orig = params[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + h;
        let up = eval(work);
        work[pi].data_mut()[ei] = orig - h;
        let down = eval(work);
        work[pi].data_mut()[ei] = orig;
        let ((up, ru), (down, rd)) = (up?, down?);
        Ok::<_, NumericsError>(((up - down) / (2.0 * h), ru == base && rd == base))
    };
    for (pi, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*id).unwrap_or(&zero);
        for ei in 0..params[pi].len() {
            let a = analytic.data()[ei];
            let (numeric, smooth) = stencil(&mut work, pi, ei, eps)?;
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(NumericsError::NonFinite("finite_difference_check"));
            }
            report.checked += 1;
            if smooth {
                if err > report.max_rel_error || report.checked == 1 {
                    report.max_rel_error = err;
                    report.worst = (pi, ei);
                    report.analytic = a;
                    report.numeric = numeric;
                }
                continue;
            }
            report.kinked += 1;
            report.kinked_max_rel_error = report.kinked_max_rel_error.max(err);
            let mut resolved = false;
            for k in 1..=4 {
                let (n, ok) = stencil(&mut work, pi, ei, eps / 10f64.powi(k))?;
                if ok {
                    report.refined_max_rel_error = report.refined_max_rel_error.max(relative_error(a, n));
                    resolved = true;
                    break;
                }
            }
            if !resolved {
                report.unresolved += 1;
            }
        }
    }
    Ok(report)
}
