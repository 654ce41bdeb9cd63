//! Central finite-difference gradient checking.
//!
//! The checker treats the graph builder as a black box: it rebuilds the
//! whole forward pass from scratch for every probe, so any cached state
//! inside ops is exercised exactly as in real use. For parameter element
//! `x_e` it compares the analytic gradient against
//! `(f(x_e + ε) − f(x_e − ε)) / 2ε` with the relative error
//! `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero gradients
//! from inflating the ratio.

use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep over all parameter elements.
#[derive(Debug, Clone)]
pub struct Report {
    /// Relative error per checked element, in parameter-then-element order.
    pub rel_errs: Vec<f64>,
    /// Largest relative error observed.
    pub max_rel: f64,
    /// Human-readable location of the worst element.
    pub worst: String,
}

impl Report {
    /// Fraction of checked elements with relative error at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.rel_errs.is_empty() {
            return 1.0;
        }
        let ok = self.rel_errs.iter().filter(|&&e| e <= tol).count();
        ok as f64 / self.rel_errs.len() as f64
    }
}

/// Relative error with an absolute floor so tiny true gradients do not
/// blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Evaluate the scalar loss once for a given set of parameter values.
fn eval_loss<F>(params: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item().to_f64()
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences at step `eps`, for every element of every parameter.
///
/// `build` must be a pure function of the leaf values (same graph, same
/// output, every call).
pub fn finite_diff<F>(inits: &[Tensor<f64>], eps: f64, build: F) -> Report
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inits.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("loss must be scalar");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("trainable leaf").data().to_vec())
        .collect();

    // Numeric probes, two fresh forward builds per element.
    let mut rel_errs = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut work: Vec<Tensor<f64>> = inits.to_vec();
    for (pi, init) in inits.iter().enumerate() {
        for e in 0..init.numel() {
            let base = init.data()[e];
            work[pi].data_mut()[e] = base + eps;
            let up = eval_loss(&work, &build);
            work[pi].data_mut()[e] = base - eps;
            let down = eval_loss(&work, &build);
            work[pi].data_mut()[e] = base;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][e];
            let err = rel_err(a, numeric);
            if err > max_rel {
                max_rel = err;
                worst = format!("param {pi} element {e} (analytic {a}, numeric {numeric})");
            }
            rel_errs.push(err);
        }
    }
    Report {
        rel_errs,
        max_rel,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = Σ x², df/dx = 2x: analytic and central difference agree
        // to machine-level precision on a quadratic.
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let report = finite_diff(&[x], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        });
        assert!(report.max_rel < 1e-9, "{}", report.worst);
        assert_eq!(report.rel_errs.len(), 3);
        assert_eq!(report.fraction_within(1e-9), 1.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Differentiating tanh but evaluating a *scaled* loss numerically
        // must show up as a large relative error.
        let x = Tensor::from_vec(vec![0.4, -0.6]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone());
        let y = tape.tanh(v);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(v).unwrap().data()[0];
        // Numeric slope of 3·Σ tanh(x) is three times the analytic one.
        let eps = 1e-5;
        let f = |x: f64| 3.0 * x.tanh();
        let numeric = (f(0.4 + eps) - f(0.4 - eps)) / (2.0 * eps);
        assert!(rel_err(analytic, numeric) > 0.5);
    }

    #[test]
    fn rel_err_floor_damps_tiny_gradients() {
        assert!(rel_err(1e-9, 2e-9) < 1e-2);
        assert!((rel_err(1.0, 1.5) - (0.5 / 1.5)).abs() < 1e-12);
    }
}
