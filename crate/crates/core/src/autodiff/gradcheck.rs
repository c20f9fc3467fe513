use super::{Graph, Tensor, Var};
use crate::error::{AmnError, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns the maximum over every input entry of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(AmnError::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(AmnError::NonFinite { op: "grad_check" });
            }
            let err = (analytic[ti][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
