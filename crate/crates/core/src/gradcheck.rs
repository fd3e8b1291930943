//! Central-difference gradient oracle.

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Per input: `max|a - n| / max(max|n|, 1e-12)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// `max|a - n| / max(max|n|, 1e-12)` over all inputs at once.
    pub fn rel_error(&self) -> f64 {
        let diff = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a.max_abs_diff(n)).fold(0.0, f64::max);
        let scale = self.numeric.iter().map(Tensor::max_abs).fold(0.0, f64::max);
        diff / scale.max(1e-12)
    }
}

/// Norm-wise relative error between an analytic and a numeric gradient.
pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic.max_abs_diff(numeric) / numeric.max_abs().max(1e-12)
}

fn eval<E, F>(build: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.item())
}

/// Differentiates the scalar built by `build` with respect to every input,
/// both through the graph and by central differences with step `h`.
pub fn check_gradients<E, F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheck, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(&build, &probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&build, &probe)?;
            probe[i].data_mut()[j] = x;
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(grad);
    }
    let rel_errors = analytic.iter().zip(&numeric).map(|(a, n)| rel_error(a, n)).collect();
    Ok(GradCheck { analytic, numeric, rel_errors })
}
