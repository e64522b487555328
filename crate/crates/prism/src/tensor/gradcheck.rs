//! Central-difference gradient verification, run in 64-bit mode.

use super::{backward, ParamLeaves, ParamStore, Tape, Tensor};
use crate::error::Result;

/// A named scalar function of a parameter store, checkable by finite
/// differences. `build` must be a pure function of the leaf values.
pub struct GradCheckCase<'a> {
    pub name: &'a str,
    pub params: ParamStore<f64>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&Tape<f64>, &ParamLeaves<f64>) -> Result<Tensor<f64>> + 'a>,
}

fn eval(case: &GradCheckCase, params: &ParamStore<f64>) -> Result<f64> {
    let tape = Tape::new();
    let leaves = params.leaves(&tape)?;
    Ok((case.build)(&tape, &leaves)?.item())
}

/// Max over parameter elements of `|analytic - central difference| /
/// max(1, |analytic|)`. When `max_probes_per_param` is given, only the first
/// n elements of each parameter are probed (deterministic subset).
pub fn grad_check(case: &GradCheckCase, eps: f64, max_probes_per_param: Option<usize>) -> Result<f64> {
    let tape = Tape::new();
    let leaves = case.params.leaves(&tape)?;
    let loss = (case.build)(&tape, &leaves)?;
    let grads = backward(&loss)?;
    let analytic = leaves.grads(&grads);

    let mut worst = 0.0f64;
    for name in case.params.names() {
        let len = case.params.get(&name).unwrap().data.len();
        let probes = max_probes_per_param.unwrap_or(len).min(len);
        for i in 0..probes {
            let mut plus = case.params.cast::<f64>();
            plus.get_mut(&name).unwrap().data[i] += eps;
            let mut minus = case.params.cast::<f64>();
            minus.get_mut(&name).unwrap().data[i] -= eps;
            let fd = (eval(case, &plus)? - eval(case, &minus)?) / (2.0 * eps);
            let an = analytic[&name][i];
            let rel = (an - fd).abs() / an.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Run a list of cases; returns `(name, max relative error)` per case.
pub fn grad_check_all<'a>(
    cases: &[GradCheckCase<'a>],
    eps: f64,
    max_probes_per_param: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    cases
        .iter()
        .map(|c| grad_check(c, eps, max_probes_per_param).map(|e| (c.name.to_string(), e)))
        .collect()
}
