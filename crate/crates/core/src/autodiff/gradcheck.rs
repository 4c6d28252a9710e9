use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that vanishing gradient components are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the component with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components whose ±eps perturbation crossed a ReLU/max/|x| kink.
    pub excluded: usize,
    pub analytic: Vec<f64>,
}

/// Compares the backward gradient of a scalar function against central
/// finite differences, component by component.
///
/// `f` builds the function on a graph given the input variable. A component
/// is skipped when either perturbed forward takes a different piecewise
/// branch than the unperturbed one.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let g = Graph::with_kink_tracking();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&g, xv)?;
    let base = g.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {base}")));
    }
    let analytic = g.backward(loss)?.get_or_zero(xv, x.numel());
    let signature = g.kink_signature();

    let eval = |probe: &Tensor| -> Result<(f64, u64)> {
        let g = Graph::with_kink_tracking();
        let v = g.constant(probe.clone());
        let out = f(&g, v)?;
        let value = g.scalar(out);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± eps) = {value}")));
        }
        Ok((value, g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: 0,
        analytic: analytic.clone(),
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, sig_plus) = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, sig_minus) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if sig_plus != signature || sig_minus != signature {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2]);
        let r = gradient_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(r.analytic, vec![0.0, 0.0]);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::vector(vec![1.0]);
        assert!(gradient_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::vector(vec![0.0]);
        let r = gradient_check(|g, x| Ok(g.sum(g.ln(x))), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_kink_components_are_excluded() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let r = gradient_check(|g, x| Ok(g.sum(g.relu(x))), &x, 1e-5).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 1);
    }
}
