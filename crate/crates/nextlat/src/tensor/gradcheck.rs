//! Finite-difference gradient oracle. Central differences per coordinate
//! against the tape's analytic gradient; this is the reference every
//! backward rule is held to.

use super::{Tape, Tensor};

/// Outcome of one gradient check. Serializes to CSV as
/// `op,max_rel_err,tol,pass`.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn csv_header() -> &'static str {
        "op,max_rel_err,tol,pass"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.3e},{:.1e},{}", self.name, self.max_rel_err, self.tol, self.pass)
    }
}

/// Check `f`'s analytic gradient at `point` against central differences
/// `(f(x+eps·e) − f(x−eps·e)) / 2eps`, coordinate by coordinate.
///
/// Relative error is `|a−n| / max(|a|, |n|, 1)`, so coordinates where both
/// sides are tiny are compared absolutely.
pub fn grad_check_named<F>(name: &str, f: F, point: &Tensor<f64>, eps: f64, tol: f64) -> CheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&tape, point.shape(), point.data().to_vec());
    let y = f(&x);
    assert_eq!(y.numel(), 1, "grad_check expects a scalar-valued function");
    tape.backward(&y).expect("backward in grad_check");
    let analytic = x.grad().expect("leaf gradient");

    let base = point.data().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::constant(point.shape(), plus)).item();
        let fm = f(&Tensor::constant(point.shape(), minus)).item();
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    CheckReport { name: name.to_string(), max_rel_err: max_rel, tol, pass: max_rel <= tol }
}

/// `grad_check_named` without a label.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64, tol: f64) -> CheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    grad_check_named("fn", f, point, eps, tol)
}
