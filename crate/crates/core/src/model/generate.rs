//! Incremental decoding and top-k sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, TinyLM, TokenId, PER_LAYER};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::kernels::{axpy, dot, matmul_nn};
use crate::tensor::LAYER_NORM_EPS;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tokens kept by top-k filtering of `logits / temperature`, paired with
/// their renormalised probabilities, most likely first. Ties keep the lower id.
pub fn top_k_distribution(logits: &[f64], top_k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let max = logits[order[0]] / temperature;
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] / temperature - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    order.into_iter().zip(weights).map(|(i, w)| (i, w / sum)).collect()
}

/// Draws one token from [`top_k_distribution`].
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], top_k: usize, temperature: f64, rng: &mut R) -> usize {
    let dist = top_k_distribution(logits, top_k, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return id;
        }
    }
    dist.last().expect("top-k keeps at least one token").0
}

/// Step-by-step forward pass over a batch of sequences, caching keys and
/// values so each new position costs one row of work per layer.
///
/// Produces the same logits as the full forward pass of the model on the
/// prefix fed so far.
pub struct Decoder<'a> {
    model: &'a TinyLM,
    exec: Execution,
    batch: usize,
    pos: usize,
    emb_t: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a TinyLM, batch: usize) -> Self {
        let cfg = model.config();
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let emb = model.params()[0].data();
        let mut emb_t = vec![0.0; v * d];
        for i in 0..v {
            for j in 0..d {
                emb_t[j * v + i] = emb[i * d + j];
            }
        }
        let cache = batch * cfg.max_positions * d;
        Decoder {
            model,
            exec: Execution::preferred(),
            batch,
            pos: 0,
            emb_t,
            keys: vec![vec![0.0; cache]; cfg.n_layers],
            values: vec![vec![0.0; cache]; cfg.n_layers],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token per sequence at the current position and returns the
    /// next-token logits `[batch × vocab]`.
    pub fn step(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let cfg: &ModelConfig = self.model.config();
        let (bsz, d, v) = (self.batch, cfg.d_model, cfg.vocab_size);
        if tokens.len() != bsz {
            return Err(Error::Shape {
                op: "decoder step",
                lhs: vec![bsz],
                rhs: vec![tokens.len()],
            });
        }
        if self.pos >= cfg.max_positions {
            return Err(Error::ContextLength {
                len: self.pos + 1,
                max: cfg.max_positions,
            });
        }
        let p = self.model.params();
        let tok = p[0].data();
        let pos_emb = &p[1].data()[self.pos * d..(self.pos + 1) * d];
        let mut x = Vec::with_capacity(bsz * d);
        for &t in tokens {
            let t = t as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t as u32, vocab: v });
            }
            x.extend(tok[t * d..(t + 1) * d].iter().zip(pos_emb).map(|(a, b)| a + b));
        }
        let f = cfg.ffn_dim();
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let cap = cfg.max_positions;
        let pos = self.pos;
        for l in 0..cfg.n_layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let a = layer_norm(&x, w[0].data(), w[1].data());
            let mut qkv = linear(self.exec, &a, w[2].data(), w[3].data(), bsz, d, 3 * d);
            let (kc, vc) = (&mut self.keys[l], &mut self.values[l]);
            for b in 0..bsz {
                let row = &qkv[b * 3 * d..(b + 1) * 3 * d];
                kc[(b * cap + pos) * d..(b * cap + pos + 1) * d].copy_from_slice(&row[d..2 * d]);
                vc[(b * cap + pos) * d..(b * cap + pos + 1) * d].copy_from_slice(&row[2 * d..]);
            }
            let (kc, vc) = (&self.keys[l], &self.values[l]);
            let att = map_indexed(self.exec, bsz, |b| {
                let q = &qkv[b * 3 * d..b * 3 * d + d];
                let mut o = vec![0.0; d];
                let mut probs = vec![0.0; pos + 1];
                for h in 0..heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (s, pv) in probs.iter_mut().enumerate() {
                        let k = &kc[(b * cap + s) * d + h * dh..(b * cap + s) * d + (h + 1) * dh];
                        *pv = dot(qh, k) * scale;
                        max = max.max(*pv);
                    }
                    let mut sum = 0.0;
                    for pv in probs.iter_mut() {
                        *pv = (*pv - max).exp();
                        sum += *pv;
                    }
                    let oh = &mut o[h * dh..(h + 1) * dh];
                    for (s, pv) in probs.iter_mut().enumerate() {
                        *pv /= sum;
                        let vs = &vc[(b * cap + s) * d + h * dh..(b * cap + s) * d + (h + 1) * dh];
                        axpy(*pv, vs, oh);
                    }
                }
                o
            })
            .concat();
            qkv.clear();
            let o = linear(self.exec, &att, w[4].data(), w[5].data(), bsz, d, d);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
            let m = layer_norm(&x, w[6].data(), w[7].data());
            let mut hid = linear(self.exec, &m, w[8].data(), w[9].data(), bsz, d, f);
            hid.iter_mut().for_each(|h| *h = gelu(*h));
            let o = linear(self.exec, &hid, w[10].data(), w[11].data(), bsz, f, d);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
        }
        let n = p.len();
        let hf = layer_norm(&x, p[n - 2].data(), p[n - 1].data());
        let mut logits = vec![0.0; bsz * v];
        matmul_nn(self.exec, &hf, &self.emb_t, &mut logits, bsz, d, v);
        self.pos += 1;
        Ok(logits)
    }
}

fn linear(exec: Execution, x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    matmul_nn(exec, x, w, &mut out, rows, k, n);
    for row in out.chunks_mut(n) {
        row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = gain.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * rs * gain[j] + bias[j];
        }
    }
    out
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

impl TinyLM {
    /// Autoregressive top-k sampling.
    ///
    /// Every prompt must have the same length `P` with `1 ≤ P < max_length`.
    /// Each returned sequence starts with its prompt and has exactly
    /// `max_length` tokens; once `eos` is sampled the remainder is `eos`.
    /// Sequence `i` draws from its own random stream derived from `seed`, so
    /// results do not depend on how prompts are batched.
    pub fn generate(
        &self,
        prompts: &[Vec<TokenId>],
        max_length: usize,
        top_k: usize,
        temperature: f64,
        seed: u64,
        eos: TokenId,
    ) -> Result<Vec<Vec<TokenId>>> {
        self.generate_from(prompts, 0, max_length, top_k, temperature, seed, eos)
    }

    /// As [`TinyLM::generate`], with prompt `i` using random stream `first_stream + i`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_from(
        &self,
        prompts: &[Vec<TokenId>],
        first_stream: u64,
        max_length: usize,
        top_k: usize,
        temperature: f64,
        seed: u64,
        eos: TokenId,
    ) -> Result<Vec<Vec<TokenId>>> {
        let Some(first) = prompts.first() else {
            return Ok(Vec::new());
        };
        let plen = first.len();
        if plen == 0 || prompts.iter().any(|p| p.len() != plen) {
            return Err(Error::data("prompts must be non-empty and share one length"));
        }
        if plen >= max_length {
            return Err(Error::data(format!(
                "prompt length {plen} must be shorter than max_length {max_length}"
            )));
        }
        if max_length > self.config().max_positions {
            return Err(Error::ContextLength {
                len: max_length,
                max: self.config().max_positions,
            });
        }
        if top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        let v = self.config().vocab_size;
        let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len() as u64)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(first_stream + i);
                r
            })
            .collect();
        let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
        let mut done = vec![false; prompts.len()];
        let mut dec = Decoder::new(self, prompts.len());
        for pos in 0..max_length - 1 {
            let toks: Vec<TokenId> = seqs.iter().map(|s| s[pos]).collect();
            let logits = dec.step(&toks)?;
            if pos + 1 < plen {
                continue;
            }
            for (b, seq) in seqs.iter_mut().enumerate() {
                let next = if done[b] {
                    eos
                } else {
                    sample_top_k(&logits[b * v..(b + 1) * v], top_k, temperature, &mut rngs[b]) as TokenId
                };
                done[b] |= next == eos;
                seq.push(next);
            }
            if done.iter().all(|&x| x) {
                for seq in &mut seqs {
                    seq.resize(max_length, eos);
                }
                break;
            }
        }
        Ok(seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenBatch;

    fn model() -> TinyLM {
        let cfg = ModelConfig {
            vocab_size: 23,
            d_model: 12,
            n_layers: 2,
            n_heads: 3,
            max_positions: 10,
            ffn_mult: 2,
        };
        let mut m = TinyLM::init(cfg, 7).unwrap();
        // Larger weights than the init so logits are far from uniform.
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        m
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn decoder_matches_full_forward() {
        let m = model();
        let rows = vec![vec![1, 5, 7, 2, 9, 22], vec![3, 3, 3, 0, 4, 1]];
        let full = m.logits(&TokenBatch::from_rows(&rows, None).unwrap()).unwrap();
        let mut dec = Decoder::new(&m, 2);
        for t in 0..6 {
            let step = dec.step(&[rows[0][t], rows[1][t]]).unwrap();
            for b in 0..2 {
                let want = &full.data()[(b * 6 + t) * 23..(b * 6 + t + 1) * 23];
                for (x, y) in step[b * 23..(b + 1) * 23].iter().zip(want) {
                    assert!((x - y).abs() < 1e-10, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn top_one_is_greedy_and_seed_free() {
        let m = model();
        let prompts = vec![vec![4, 2], vec![8, 1]];
        let a = m.generate(&prompts, 8, 1, 1.0, 1, 22).unwrap();
        let b = m.generate(&prompts, 8, 1, 1.0, 99, 22).unwrap();
        assert_eq!(a, b);
        for (s, p) in a.iter().zip(&prompts) {
            assert_eq!(s.len(), 8);
            assert_eq!(&s[..2], p.as_slice());
        }
    }

    #[test]
    fn sampling_is_seeded_and_batch_independent() {
        let m = model();
        let prompts = vec![vec![4, 2], vec![8, 1], vec![0, 0]];
        let a = m.generate(&prompts, 9, 5, 1.0, 3, 22).unwrap();
        let b = m.generate(&prompts, 9, 5, 1.0, 3, 22).unwrap();
        assert_eq!(a, b);
        let tail = m.generate_from(&prompts[1..], 1, 9, 5, 1.0, 3, 22).unwrap();
        assert_eq!(&a[1..], tail.as_slice());
    }

    #[test]
    fn eos_pads_the_rest() {
        let m = model();
        // With top_k = 1 every continuation is the argmax; make that eos.
        let prompts = vec![vec![4, 2]];
        let greedy = m.generate(&prompts, 6, 1, 1.0, 0, 22).unwrap();
        let eos = greedy[0][2];
        let out = m.generate(&prompts, 6, 1, 1.0, 0, eos).unwrap();
        assert_eq!(out[0][2..], [eos; 4]);
    }

    #[test]
    fn argument_validation() {
        let m = model();
        assert!(m.generate(&[vec![1, 2, 3]], 3, 5, 1.0, 0, 22).is_err());
        assert!(m.generate(&[vec![1]], 11, 5, 1.0, 0, 22).is_err());
        assert!(m.generate(&[vec![1]], 5, 0, 1.0, 0, 22).is_err());
        assert!(m.generate(&[vec![1]], 5, 3, 0.0, 0, 22).is_err());
        assert!(m.generate(&[vec![1], vec![1, 2]], 5, 3, 1.0, 0, 22).is_err());
    }

    #[test]
    fn top_k_distribution_renormalises() {
        let logits = [1.0, 3.0, 2.0, 3.0];
        let d = top_k_distribution(&logits, 2, 1.0);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 3]);
        assert!((d[0].1 - 0.5).abs() < 1e-15);
        let d = top_k_distribution(&logits, 10, 2.0);
        assert_eq!(d.len(), 4);
        assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
