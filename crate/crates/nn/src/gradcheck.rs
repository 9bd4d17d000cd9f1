//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the reverse pass it is used to check.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central differences of a scalar function of several tensors.
pub fn numeric_grad<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Builds the graph once with `inputs` as leaves, backpropagates, and compares
/// against central differences with step `h`. Returns the worst relative
/// error over all inputs.
pub fn check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let numeric = numeric_grad(
        |ts| {
            let mut g = Graph::new();
            let vars = ts
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let l = build(&mut g, &vars)?;
            Ok(g.value(l).item())
        },
        inputs,
        h,
    )?;
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros = vec![0.0; num.len()];
        let ana = grads.wrt(*v).unwrap_or(&zeros);
        worst = worst.max(relative_error(ana, num));
    }
    Ok(worst)
}
