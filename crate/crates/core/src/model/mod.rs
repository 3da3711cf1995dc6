//! Decoder-only causal transformer language model.
//!
//! Pre-norm GPT-style blocks with learned positional embeddings and an
//! output projection tied to the token embedding. The forward pass exposes
//! `n_layers + 1` hidden states: the embedding sum, the output of every
//! block but the last, and the final layer-normed output of the last block.

mod checkpoint;
mod generate;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::{sample_top_k, top_k_distribution, Decoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, LAYER_NORM_EPS};

pub type TokenId = u32;

/// Weights are drawn from N(0, INIT_STD²).
pub const INIT_STD: f64 = 0.02;

const PER_LAYER: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 257,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_positions: 128,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_positions", self.max_positions),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Names and shapes of every parameter tensor, in storage order.
    ///
    /// `tok_emb [V×D]`, `pos_emb [P×D]`, then per layer `ln1.gain`,
    /// `ln1.bias`, `attn.w_qkv [D×3D]`, `attn.b_qkv`, `attn.w_out [D×D]`,
    /// `attn.b_out`, `ln2.gain`, `ln2.bias`, `mlp.w_in [D×F]`, `mlp.b_in`,
    /// `mlp.w_out [F×D]`, `mlp.b_out`, and finally `ln_f.gain`, `ln_f.bias`.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_dim());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_positions, d]),
        ];
        for l in 0..self.n_layers {
            let entries: [(&str, Vec<usize>); PER_LAYER] = [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_out", vec![d, d]),
                ("attn.b_out", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w_in", vec![d, f]),
                ("mlp.b_in", vec![f]),
                ("mlp.w_out", vec![f, d]),
                ("mlp.b_out", vec![d]),
            ];
            out.extend(entries.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// A batch of `batch` token sequences of length `seq` with an attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<TokenId>,
    mask: Vec<u8>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    /// Batch with every position valid.
    pub fn new(ids: Vec<TokenId>, batch: usize, seq: usize) -> Result<Self> {
        let mask = vec![1; ids.len()];
        Self::with_mask(ids, mask, batch, seq)
    }

    pub fn with_mask(ids: Vec<TokenId>, mask: Vec<u8>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq || mask.len() != ids.len() {
            return Err(Error::InvalidShape(format!(
                "token batch {batch}x{seq} needs {} ids and mask entries, got {} and {}",
                batch * seq,
                ids.len(),
                mask.len()
            )));
        }
        Ok(TokenBatch { ids, mask, batch, seq })
    }

    /// Stacks equal-length rows; mask marks tokens other than `pad` as valid.
    pub fn from_rows(rows: &[Vec<TokenId>], pad: Option<TokenId>) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::data("rows of a token batch must share one length"));
        }
        let ids: Vec<TokenId> = rows.concat();
        let mask = ids.iter().map(|&t| u8::from(Some(t) != pad)).collect();
        Self::with_mask(ids, mask, rows.len(), seq)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Next-token targets: position `t` predicts token `t + 1` when that
    /// token is unmasked; the last position of each row is ignored.
    pub fn shifted_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            for t in 0..self.seq {
                let i = b * self.seq + t;
                out.push((t + 1 < self.seq && self.mask[i + 1] != 0).then(|| self.ids[i + 1] as usize));
            }
        }
        out
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch·seq × vocab]`; row `b·seq + t` scores the token after position `t`.
    pub logits: Var,
    /// `n_layers + 1` tensors of shape `[batch × seq × d_model]`.
    pub hidden_states: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    cfg: ModelConfig,
    params: Vec<Tensor>,
}

impl TinyLM {
    /// Gaussian weights (std [`INIT_STD`]), zero biases, unit layer-norm gains.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::from_fn(shape, |_| 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
                };
                t.map(Tensor::requiring_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TinyLM { cfg, params })
    }

    /// Assembles a model from explicit parameter tensors in storage order.
    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "{name} should have shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let params = params.into_iter().map(Tensor::requiring_grad).collect();
        Ok(TinyLM { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in storage order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds each bound parameter's gradient from `g` into the model.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Var]) -> Result<()> {
        for (t, &v) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Copies the parameters into `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.leaf(t)).collect()
    }

    /// Copies the parameters into `g` as constants (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                g.constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("parameter shapes are valid")
            })
            .collect()
    }

    /// Views consecutive segments of a flat parameter vector as the model's
    /// parameters, in storage order.
    pub fn bind_flat(cfg: &ModelConfig, g: &mut Graph, flat: Var) -> Result<Vec<Var>> {
        let mut offset = 0;
        cfg.param_shapes()
            .into_iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                let v = g.segment(flat, offset, shape)?;
                offset += n;
                Ok(v)
            })
            .collect()
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.cfg.max_positions {
            return Err(Error::ContextLength {
                len: batch.seq,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass of `batch` on `g` using parameters `p`
    /// (as returned by one of the `bind` functions).
    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &TokenBatch) -> Result<ForwardOutput> {
        forward_with(&self.cfg, g, p, batch)
    }

    /// Shifted next-token cross-entropy given the logits of `batch`.
    pub fn lm_loss(&self, g: &mut Graph, logits: Var, batch: &TokenBatch) -> Result<Var> {
        lm_loss_with(g, logits, batch)
    }

    /// Value of the language-model loss on `batch`, without gradients.
    pub fn loss_value(&self, batch: &TokenBatch) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, batch)?;
        let loss = self.lm_loss(&mut g, out.logits, batch)?;
        Ok(g.scalar(loss))
    }

    /// Detached logits `[batch·seq × vocab]` for `batch`.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, batch)?;
        Ok(g.to_tensor(out.logits))
    }
}

/// Forward pass for an explicit parameter binding; see [`TinyLM::forward`].
pub fn forward_with(cfg: &ModelConfig, g: &mut Graph, p: &[Var], batch: &TokenBatch) -> Result<ForwardOutput> {
    let expected = 2 + PER_LAYER * cfg.n_layers + 2;
    if p.len() != expected {
        return Err(Error::config(format!(
            "forward expects {expected} bound parameters, got {}",
            p.len()
        )));
    }
    let (b, t, d) = (batch.batch, batch.seq, cfg.d_model);
    if t > cfg.max_positions {
        return Err(Error::ContextLength {
            len: t,
            max: cfg.max_positions,
        });
    }
    let ids: Vec<usize> = batch.ids.iter().map(|&x| x as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tok = g.embedding(p[0], &ids)?;
    let pos = g.embedding(p[1], &positions)?;
    let mut h = g.add(tok, pos)?;
    let mut hidden_states = Vec::with_capacity(cfg.n_layers + 1);
    hidden_states.push(g.reshape(h, vec![b, t, d])?);
    let mask = Some(batch.mask.as_slice());
    for l in 0..cfg.n_layers {
        let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let a = g.layer_norm(h, w[0], w[1], LAYER_NORM_EPS)?;
        let qkv = g.matmul(a, w[2])?;
        let qkv = g.add_bias(qkv, w[3])?;
        let att = g.causal_attention(qkv, mask, b, t, cfg.n_heads)?;
        let o = g.matmul(att, w[4])?;
        let o = g.add_bias(o, w[5])?;
        h = g.add(h, o)?;
        let m = g.layer_norm(h, w[6], w[7], LAYER_NORM_EPS)?;
        let f = g.matmul(m, w[8])?;
        let f = g.add_bias(f, w[9])?;
        let f = g.gelu(f);
        let f = g.matmul(f, w[10])?;
        let f = g.add_bias(f, w[11])?;
        h = g.add(h, f)?;
        if l + 1 < cfg.n_layers {
            hidden_states.push(g.reshape(h, vec![b, t, d])?);
        }
    }
    let n = p.len();
    let hf = g.layer_norm(h, p[n - 2], p[n - 1], LAYER_NORM_EPS)?;
    hidden_states.push(g.reshape(hf, vec![b, t, d])?);
    let emb_t = g.transpose(p[0])?;
    let logits = g.matmul(hf, emb_t)?;
    Ok(ForwardOutput { logits, hidden_states })
}

/// Shifted next-token cross-entropy; see [`TokenBatch::shifted_targets`].
pub fn lm_loss_with(g: &mut Graph, logits: Var, batch: &TokenBatch) -> Result<Var> {
    if batch.seq < 2 {
        return Err(Error::data("language-model loss needs sequences of at least 2 tokens"));
    }
    g.cross_entropy_mean(logits, &batch.shifted_targets())
}
