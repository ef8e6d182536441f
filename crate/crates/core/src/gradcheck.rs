//! Finite-difference gradient verification.
//!
//! Runs the graph in f64 and compares analytic gradients from the reverse
//! sweep against central differences. Graph builders are re-invoked per
//! perturbation, so they must be pure functions of the leaf values.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Worst disagreement across all checked coordinates.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic and central-difference gradients of a scalar-valued graph
/// with respect to every element of every named parameter.
///
/// `build` receives a fresh tape plus one leaf per parameter (same order as
/// `params`) and returns the scalar root.
pub fn grad_check<F>(params: &[(&str, Tensor<f64>)], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "step must be positive");

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = values[pi].len();
        for j in 0..n {
            let analytic = grads.wrt(vars[pi]).map_or(0.0, |g| g[j]);
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + step;
            let plus = eval(&values)?;
            values[pi].data_mut()[j] = orig - step;
            let minus = eval(&values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.to_string();
                report.worst_index = j;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_numeric_for_square() {
        // f(x) = x.x at x = 1.5: analytic 3.0, central difference exact for
        // quadratics up to rounding.
        let params = [("x", Tensor::vector(vec![1.5f64]))];
        let report = grad_check(
            &params,
            |tape, vars| tape.dot(vars[0], vars[0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn flags_disagreement_at_a_relu_kink() {
        // At x = 0 the analytic subgradient is 0 while the central difference
        // sees slope 0.5; the checker must surface that as a large error.
        let params = [("x", Tensor::vector(vec![0.0f64]))];
        let report = grad_check(
            &params,
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum(r))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5, "{report:?}");
        assert_eq!(report.worst_param, "x");
    }

    #[test]
    fn affine_relu_chain_checks_out() {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.7, -0.4, 0.11]).unwrap();
        let b = Tensor::vector(vec![0.05, -0.3, 0.2]);
        let x = Tensor::vector(vec![0.9, -0.6]);
        let params = [("x", x), ("w", w), ("b", b)];
        let report = grad_check(
            &params,
            |tape, vars| {
                let h = tape.affine(vars[0], vars[1], vars[2])?;
                let r = tape.relu(h);
                Ok(tape.sum(r))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
