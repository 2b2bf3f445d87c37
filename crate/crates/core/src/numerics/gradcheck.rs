use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. The relative error per coordinate uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.shape(out) != [1, 1] {
            return Err(Error::Contract(format!(
                "grad_check of {op_name} needs a scalar output, got {:?}",
                g.shape(out)
            )));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel.is_nan() {
                max_rel = f64::INFINITY;
            } else {
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
