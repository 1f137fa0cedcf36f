//! Central finite-difference verification of recorded gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ParamModel;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `model[index].param_name[flat offset]` of the worst entry.
    pub worst: String,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with an absolute floor so vanishing gradients compare
/// on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the recorded gradient of `loss` with respect to every parameter
/// of every model against central differences with step `h`.
pub fn check_gradients<F>(models: &[&ParamModel], h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Vec<Var<'t>>]) -> Result<Var<'t>>,
{
    let evaluate = |models: &[ParamModel]| -> Result<f64> {
        let tape = Tape::new();
        let bound: Vec<_> = models.iter().map(|m| m.bind(&tape)).collect();
        let v = loss(&tape, &bound)?.item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(v)
    };

    let tape = Tape::new();
    let bound: Vec<Vec<Var>> = models.iter().map(|m| m.bind(&tape)).collect();
    let out = loss(&tape, &bound)?;
    let flat: Vec<Var> = bound.iter().flatten().copied().collect();
    let grads: Vec<_> = tape.grad(out, &flat).iter().map(|g| g.to_tensor()).collect();

    let mut scratch: Vec<ParamModel> = models.iter().map(|m| (*m).clone()).collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let mut gi = 0;
    for mi in 0..models.len() {
        let names = models[mi].param_names();
        for (pi, name) in names.iter().enumerate() {
            let len = models[mi].params()[pi].len();
            for k in 0..len {
                let orig = models[mi].params()[pi].as_slice().expect("standard layout")[k];
                let set = |s: &mut Vec<ParamModel>, v: f64| {
                    s[mi].params_mut()[pi].as_slice_mut().expect("standard layout")[k] = v;
                };
                set(&mut scratch, orig + h);
                let plus = evaluate(&scratch)?;
                set(&mut scratch, orig - h);
                let minus = evaluate(&scratch)?;
                set(&mut scratch, orig);
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads[gi].as_slice().expect("standard layout")[k];
                let err = relative_error(analytic, numeric);
                if err > report.max_rel_error || report.worst.is_empty() {
                    report.max_rel_error = err.max(report.max_rel_error);
                    report.worst = format!("model[{mi}].{name}[{k}]");
                }
                report.entries += 1;
            }
            gi += 1;
        }
    }
    Ok(report)
}
