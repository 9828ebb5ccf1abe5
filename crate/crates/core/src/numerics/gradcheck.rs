use crate::error::{bail, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Worst discrepancy between tape gradients and central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Error measure: relative once either side exceeds `floor`, absolute below it.
pub fn grad_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > floor {
        diff / scale
    } else {
        diff
    }
}

/// Compares the tape gradient of a scalar function of `inputs` with central
/// differences of step `eps` for every input element.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let y = f(&g, &vars)?;
        g.item(y)
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let y = f(&g, &vars)?;
    if g.shape(y).iter().product::<usize>() != 1 {
        bail!(Dimension, "gradient check needs a scalar output, got {:?}", g.shape(y));
    }
    g.backward(y)?;
    let mut worst = GradCheck { max_error: 0.0, input: 0, index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = grad_error(a, numeric, 1e-6);
            if err > worst.max_error || !err.is_finite() {
                worst = GradCheck { max_error: err, input: i, index: j, analytic: a, numeric };
            }
        }
    }
    Ok(worst)
}
