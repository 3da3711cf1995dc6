//! Gram-orthogonality regularizer on the last layers' pooled hidden states.
//!
//! Each regularized layer's hidden states `[B×T×D]` are mean-pooled over
//! time, the pooled rows are projected onto the unit sphere, and the
//! element-mean squared deviation of their Gram matrix from the identity is
//! penalised. The regularizer averages this over the last `k_layers` hidden
//! states and scales by `lambda`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var, L2_NORMALIZE_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct AsncConfig {
    /// Coupling strength; zero disables the penalty's effect.
    pub lambda: f64,
    /// Number of trailing hidden states regularized.
    pub k_layers: usize,
}

impl Default for AsncConfig {
    fn default() -> Self {
        AsncConfig {
            lambda: 0.5,
            k_layers: 3,
        }
    }
}

impl AsncConfig {
    /// Checks the config against a model exposing `hidden_states` entries.
    pub fn validate(&self, hidden_states: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be a nonnegative number, got {}", self.lambda)));
        }
        if self.k_layers == 0 {
            return Err(Error::config("k_layers must be positive"));
        }
        if self.k_layers > hidden_states {
            return Err(Error::config(format!(
                "k_layers {} exceeds the {hidden_states} available hidden states",
                self.k_layers
            )));
        }
        Ok(())
    }
}

/// `mean((HHᵀ − I)²)` for the row-normalised time-pooled states of one layer.
pub fn gram_loss(g: &mut Graph, layer_hidden: Var, mask: Option<&[u8]>) -> Result<Var> {
    let b = g.shape(layer_hidden)[0];
    if g.shape(layer_hidden).len() != 3 {
        return Err(Error::InvalidShape(format!(
            "gram loss expects [B x T x D] hidden states, got {:?}",
            g.shape(layer_hidden)
        )));
    }
    if b < 2 {
        return Err(Error::data("gram loss needs a batch of at least 2 sequences"));
    }
    let pooled = g.mean_pool_time(layer_hidden, mask)?;
    let unit = g.l2_normalize_rows(pooled, L2_NORMALIZE_EPS)?;
    let unit_t = g.transpose(unit)?;
    let gram = g.matmul(unit, unit_t)?;
    let eye = g.constant(vec![b, b], identity(b))?;
    let diff = g.sub(gram, eye)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// `lambda / K · Σ gram_loss` over the last `K` entries of `hidden_states`.
pub fn asnc_loss(g: &mut Graph, hidden_states: &[Var], mask: Option<&[u8]>, cfg: &AsncConfig) -> Result<Var> {
    cfg.validate(hidden_states.len())?;
    let mut total: Option<Var> = None;
    for &h in &hidden_states[hidden_states.len() - cfg.k_layers..] {
        let l = gram_loss(g, h, mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("k_layers is positive");
    Ok(g.scale(total, cfg.lambda / cfg.k_layers as f64))
}

fn identity(n: usize) -> Vec<f64> {
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    eye
}
