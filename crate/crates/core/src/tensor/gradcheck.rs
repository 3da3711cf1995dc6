use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares the reverse-mode gradient of the scalar `f(x)` with central
/// differences of step `h` and returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` receives a fresh graph and the leaf holding `x` on every evaluation.
pub fn grad_check<F>(x: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let leaf_tensor = x.clone().requiring_grad();
    let mut g = Graph::new();
    let leaf = g.leaf(&leaf_tensor);
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let mut g = Graph::new();
        let v = g.leaf(&t);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
