use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares autodiff gradients of a scalar function against central
/// differences and returns the worst relative error,
/// `max |g_auto − g_fd| / (|g_fd| + 1e-12)`, over every coordinate of every
/// input.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// scalar node. It is re-evaluated twice per coordinate.
pub fn grad_check<Fun>(f: Fun, point: &[Tensor<f64>], step: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let auto = grads.leaf(*v).map(|t| t.data().to_vec());
        for j in 0..point[i].numel() {
            let x0 = point[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let fd = (fp - fm) / (2.0 * step);
            let a = auto.as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - fd).abs() / (fd.abs() + 1e-12));
        }
    }
    Ok(worst)
}
