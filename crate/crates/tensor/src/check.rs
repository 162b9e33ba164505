//! Central-difference gradient verification.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which coordinates of each input are probed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many evenly spaced coordinates per input.
    Strided(usize),
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.check_finite()?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max over probed coordinates of `|autodiff − numeric| / max(1, |numeric|)`
/// for a scalar function of several tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let step = match coords {
            Coords::All => 1,
            Coords::Strided(max) => n.div_ceil(max.max(1)),
        };
        for j in (0..n).step_by(step) {
            let orig = t.data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let up = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let down = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[k].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check`] over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, Coords::All)
}
