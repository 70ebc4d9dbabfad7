//! Central finite-difference checks of graph gradients.

use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::optim::NamedTensors;

/// Per-parameter summary of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    /// Non-finite losses or gradients encountered (each one fails the check).
    pub failures: Vec<String>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<32} {:>8} {:>12} {:>12}", "parameter", "checked", "max_rel", "max_abs")?;
        for p in &self.params {
            writeln!(
                f,
                "{:<32} {:>8} {:>12.3e} {:>12.3e}",
                p.name, p.checked, p.max_rel_error, p.max_abs_error
            )?;
        }
        for msg in &self.failures {
            writeln!(f, "FAILURE: {msg}")?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Which elements of a parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many elements per parameter, evenly strided.
    Sample(usize),
}

/// Builds the scalar loss for a given parameter binding.
pub trait LossFn: Fn(&mut Graph, &IndexMap<String, Var>) -> Result<Var> {}
impl<F> LossFn for F where F: Fn(&mut Graph, &IndexMap<String, Var>) -> Result<Var> {}

fn evaluate(f: &impl LossFn, params: &NamedTensors, want_grads: bool) -> Result<(f64, Option<NamedTensors>)> {
    let mut g = Graph::new();
    let bound: IndexMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name, t)))
        .collect();
    let loss = f(&mut g, &bound)?;
    let value = g.value(loss).item();
    if !want_grads {
        return Ok((value, None));
    }
    g.backward(loss)?;
    Ok((value, Some(g.param_grads())))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps * max(1, |θ|)` per element.
pub fn gradcheck(
    f: impl LossFn,
    params: &NamedTensors,
    eps: f64,
    tolerance: f64,
    coverage: Coverage,
) -> Result<GradcheckReport> {
    assert!(eps > 0.0, "gradcheck step must be positive");
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
        failures: Vec::new(),
        tolerance,
    };
    let (base, grads) = evaluate(&f, params, true)?;
    let grads = grads.expect("requested gradients");
    if !base.is_finite() {
        report.failures.push(format!("loss is {base}"));
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }
    let mut probe = params.clone();
    for (name, tensor) in params {
        let n = tensor.numel();
        let indices: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(k) if k >= n => (0..n).collect(),
            Coverage::Sample(k) => (0..k).map(|i| i * n / k).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &i in &indices {
            let theta = tensor.data()[i];
            let h = eps * theta.abs().max(1.0);
            probe[name].data_mut()[i] = theta + h;
            let (plus, _) = evaluate(&f, &probe, false)?;
            probe[name].data_mut()[i] = theta - h;
            let (minus, _) = evaluate(&f, &probe, false)?;
            probe[name].data_mut()[i] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[name].data()[i];
            if !numeric.is_finite() || !analytic.is_finite() {
                report
                    .failures
                    .push(format!("{name}[{i}]: analytic {analytic}, numeric {numeric}"));
                continue;
            }
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic, numeric));
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    if !report.failures.is_empty() {
        report.max_rel_error = f64::INFINITY;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    fn params(seed: u64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert(
            "x".into(),
            Tensor::create(&[5], Init::Uniform { seed, lo: -2.0, hi: 2.0 }).unwrap(),
        );
        p
    }

    #[test]
    fn sum_of_squares_is_exact_to_roundoff() {
        let report = gradcheck(
            |g: &mut Graph, p: &IndexMap<String, Var>| {
                let x = p["x"];
                let sq = g.mul(x, x);
                Ok(g.sum(sq))
            },
            &params(1),
            1e-5,
            1e-9,
            Coverage::All,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let report = gradcheck(
            |g: &mut Graph, _p: &IndexMap<String, Var>| Ok(g.constant(Tensor::scalar(3.0))),
            &params(2),
            1e-5,
            1e-9,
            Coverage::All,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_reported_not_raised() {
        let report = gradcheck(
            |g: &mut Graph, p: &IndexMap<String, Var>| {
                let s = g.sum(p["x"]);
                Ok(g.scale(s, f64::INFINITY))
            },
            &params(3),
            1e-5,
            1e-4,
            Coverage::All,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(!report.failures.is_empty());
    }
}
