use super::graph::{Graph, Var};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the function on a fresh 64-bit tape from leaf handles for
/// `inputs`. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(inputs: &[Tensor], epsilon: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check forward value {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArgument("grad_check needs a scalar function".into()));
    }
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite(format!("grad_check forward value {}", g.value(out).item())));
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
