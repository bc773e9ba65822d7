//! Central-difference verification of recorded gradients.

use crate::diff::graph::Graph;
use crate::diff::params::{BoundParams, ParameterSet};
use crate::diff::Var;
use crate::{Error, Result, Scalar};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all coordinates of |analytic − central| / max(1, |central|)
    pub max_rel_error: f64,
    /// parameter and flat coordinate where the maximum occurred
    pub worst_parameter: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Compares recorded gradients of `build`'s scalar output against central
/// differences with the given `step`, coordinate by coordinate.
pub fn grad_check<F: Scalar>(
    params: &ParameterSet<F>,
    step: F,
    build: impl Fn(&Graph<F>, &BoundParams<F>) -> Result<Var<F>>,
) -> Result<GradCheckReport> {
    let eval = |p: &ParameterSet<F>| -> Result<F> {
        let graph = Graph::new();
        let bound = p.bind_frozen(&graph);
        let out = build(&graph, &bound)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.to_scalar())
    };

    // analytic gradients
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let out = build(&graph, &bound)?;
    if !out.value().all_finite() {
        return Err(Error::NonFiniteLoss("<base point>".into()));
    }
    let grads = graph.backward(&out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let two = F::cast(2.0);
    for (name, value) in params.iter() {
        let analytic = grads.get_or_zeros(bound.get(name));
        for i in 0..value.len() {
            let mut plus = params.clone();
            perturb(&mut plus, name, i, step);
            let mut minus = params.clone();
            perturb(&mut minus, name, i, -step);
            let f_plus = eval(&plus)?;
            let f_minus = eval(&minus)?;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFiniteLoss(name.clone()));
            }
            let central = ((f_plus - f_minus) / (two * step)).to_f64_lossy();
            let a = analytic.data()[i].to_f64_lossy();
            let rel = (a - central).abs() / central.abs().max(1.0);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn perturb<F: Scalar>(params: &mut ParameterSet<F>, name: &str, index: usize, delta: F) {
    let mut t = params.get(name).unwrap().clone();
    t.data_mut()[index] += delta;
    params.set(name, t);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ops;
    use crate::diff::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_function_is_exact() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        params.insert("w", Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]));
        let report = grad_check(&params, 1e-3, |g, p| {
            let c = g.constant(Tensor::from_vec(vec![3], vec![3.0, 1.0, -2.0]));
            Ok(ops::sum_all(&ops::mul(p.get("w"), &c)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn composite_softmax_matmul_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        let mut params: ParameterSet<f64> = ParameterSet::new();
        params.insert(
            "w",
            Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        let x = Tensor::from_vec(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = grad_check(&params, 1e-5, move |g, p| {
            let xc = g.constant(x.clone());
            let wx = ops::matmul(p.get("w"), &xc)?;
            let sm = ops::softmax_axis(&wx, 1)?;
            Ok(ops::sum_all(&ops::mul(&sm, &sm)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn reports_non_finite_loss_with_parameter_name() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        params.insert("bad", Tensor::scalar(0.0));
        let err = grad_check(&params, 1.0, |_, p| {
            // 1/x blows up at the perturbed point x = -1 -> finite, but ln of
            // a negative perturbation is NaN
            Ok(ops::ln(p.get("bad")))
        })
        .unwrap_err();
        match err {
            Error::NonFiniteLoss(name) => assert!(name.contains("bad") || name.contains("base")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
