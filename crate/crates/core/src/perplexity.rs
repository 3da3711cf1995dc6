//! Sliding-window perplexity on a held token stream.
//!
//! Windows start at `i = 0, stride, 2·stride, …`. Window `i` covers
//! `[max(i + stride − max_length, 0), min(i + stride, N))` and scores only its
//! last `trg_len = end − i` tokens as targets; earlier tokens are context.
//! When `trg_len` reaches the window length every target is scored, so with
//! `stride > max_length` each window scores its trailing `max_length − 1`
//! predictable tokens and skips the rest of the stride. The perplexity is
//! `exp` of the unweighted mean of the per-window mean NLLs.

use crate::error::{Error, Result};
use crate::model::{TinyLM, TokenBatch, TokenId};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PplConfig {
    pub stride: usize,
    pub max_length: usize,
    /// Only the first `eval_token_cap` tokens of the stream are evaluated.
    pub eval_token_cap: usize,
}

impl Default for PplConfig {
    fn default() -> Self {
        PplConfig {
            stride: 512,
            max_length: 128,
            eval_token_cap: 50_000,
        }
    }
}

impl PplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.max_length < 2 {
            return Err(Error::config("stride must be positive and max_length at least 2"));
        }
        if self.stride > 4 * self.max_length {
            return Err(Error::config(format!(
                "stride {} exceeds 4 x max_length {}",
                self.stride, self.max_length
            )));
        }
        if self.eval_token_cap < self.max_length {
            return Err(Error::config(format!(
                "eval_token_cap {} is below max_length {}",
                self.eval_token_cap, self.max_length
            )));
        }
        Ok(())
    }
}

/// One evaluation window over `tokens[begin..end]` scoring its last `trg_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub begin: usize,
    pub end: usize,
    pub trg_len: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.begin
    }

    /// Local positions `j ≥ 1` whose token is scored (predicted from `j − 1`).
    pub fn scored_positions(&self) -> std::ops::Range<usize> {
        let first = self.len().saturating_sub(self.trg_len).max(1);
        first..self.len()
    }
}

/// Windows over a stream of `n` tokens, in order.
pub fn windows(n: usize, stride: usize, max_length: usize) -> Vec<Window> {
    (0..n)
        .step_by(stride.max(1))
        .map(|i| {
            let begin = (i + stride).saturating_sub(max_length);
            let end = (i + stride).min(n);
            Window {
                begin,
                end,
                trg_len: end - i,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PplReport {
    /// `exp` of the mean of per-window mean NLLs.
    pub perplexity: f64,
    /// `exp` of the mean NLL over all scored tokens.
    pub token_weighted_perplexity: f64,
    /// Windows that scored at least one token.
    pub windows: usize,
    pub scored_tokens: usize,
}

/// Perplexity of `model` on `stream`; see the module docs.
pub fn sliding_window_ppl(model: &TinyLM, stream: &[TokenId], cfg: &PplConfig) -> Result<f64> {
    Ok(sliding_window_report(model, stream, cfg)?.perplexity)
}

pub fn sliding_window_report(model: &TinyLM, stream: &[TokenId], cfg: &PplConfig) -> Result<PplReport> {
    cfg.validate()?;
    let mc = model.config();
    if cfg.max_length > mc.max_positions {
        return Err(Error::ContextLength {
            len: cfg.max_length,
            max: mc.max_positions,
        });
    }
    let stream = &stream[..stream.len().min(cfg.eval_token_cap)];
    if stream.len() < 2 {
        return Err(Error::data("perplexity needs at least 2 tokens"));
    }
    if let Some(&id) = stream.iter().find(|&&t| t as usize >= mc.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: mc.vocab_size,
        });
    }
    let wins: Vec<Window> = windows(stream.len(), cfg.stride, cfg.max_length)
        .into_iter()
        .filter(|w| !w.scored_positions().is_empty())
        .collect();
    if wins.is_empty() {
        return Err(Error::DegenerateLoss);
    }
    let per_window = map_indexed(Execution::preferred(), wins.len(), |i| window_nll(model, stream, wins[i]));
    let mut mean_sum = 0.0;
    let mut nll_sum = 0.0;
    let mut scored = 0usize;
    for r in per_window {
        let (sum, count) = r?;
        mean_sum += sum / count as f64;
        nll_sum += sum;
        scored += count;
    }
    let report = PplReport {
        perplexity: (mean_sum / wins.len() as f64).exp(),
        token_weighted_perplexity: (nll_sum / scored as f64).exp(),
        windows: wins.len(),
        scored_tokens: scored,
    };
    if !report.perplexity.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(report)
}

/// Summed NLL and number of scored tokens for one window.
fn window_nll(model: &TinyLM, stream: &[TokenId], w: Window) -> Result<(f64, usize)> {
    let tokens = stream[w.begin..w.end].to_vec();
    let len = tokens.len();
    let scored = w.scored_positions();
    let targets: Vec<Option<usize>> = (0..len)
        .map(|t| scored.contains(&(t + 1)).then(|| tokens[t + 1] as usize))
        .collect();
    let count = scored.len();
    let batch = TokenBatch::new(tokens, 1, len)?;
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let out = model.forward(&mut g, &p, &batch)?;
    let loss = g.cross_entropy_mean(out.logits, &targets)?;
    Ok((g.scalar(loss) * count as f64, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 257,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 16,
            ffn_mult: 2,
        }
    }

    fn uniform_model() -> TinyLM {
        let mut m = TinyLM::init(tiny(), 3).unwrap();
        m.params_mut()[0].data_mut().fill(0.0);
        m
    }

    #[test]
    fn window_layout() {
        let w = windows(10, 4, 6);
        assert_eq!(
            w,
            vec![
                Window { begin: 0, end: 4, trg_len: 4 },
                Window { begin: 2, end: 8, trg_len: 4 },
                Window { begin: 6, end: 10, trg_len: 2 },
            ]
        );
        assert_eq!(w[0].scored_positions(), 1..4);
        assert_eq!(w[1].scored_positions(), 2..6);
        assert_eq!(w[2].scored_positions(), 2..4);
        // stride > max_length: only the trailing max_length tokens are seen.
        let w = windows(20, 8, 4);
        assert_eq!(w[0], Window { begin: 4, end: 8, trg_len: 8 });
        assert_eq!(w[0].scored_positions(), 1..4);
    }

    #[test]
    fn uniform_model_scores_vocab_size() {
        let m = uniform_model();
        let stream: Vec<TokenId> = (0..40).map(|i| (i * 37 % 256) as TokenId).collect();
        let cfg = PplConfig {
            stride: 8,
            max_length: 16,
            eval_token_cap: 100,
        };
        let r = sliding_window_report(&m, &stream, &cfg).unwrap();
        assert!((r.perplexity / 257.0 - 1.0).abs() < 1e-9, "{}", r.perplexity);
        assert!((r.token_weighted_perplexity / 257.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_window_matches_direct_nll() {
        let m = TinyLM::init(tiny(), 9).unwrap();
        let stream: Vec<TokenId> = b"hello world!".iter().map(|&b| b as TokenId).collect();
        let cfg = PplConfig {
            stride: 16,
            max_length: 16,
            eval_token_cap: 16,
        };
        let ppl = sliding_window_ppl(&m, &stream, &cfg).unwrap();
        let direct = m.loss_value(&TokenBatch::new(stream.clone(), 1, stream.len()).unwrap()).unwrap();
        assert!((ppl.ln() - direct).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let m = uniform_model();
        let cfg = PplConfig {
            stride: 8,
            max_length: 16,
            eval_token_cap: 16,
        };
        assert!(sliding_window_ppl(&m, &[1], &cfg).is_err());
        assert!(matches!(
            sliding_window_ppl(&m, &[1, 300], &cfg),
            Err(Error::TokenOutOfRange { id: 300, .. })
        ));
        let long = PplConfig {
            max_length: 32,
            eval_token_cap: 32,
            ..cfg.clone()
        };
        assert!(matches!(sliding_window_ppl(&m, &[1, 2, 3], &long), Err(Error::ContextLength { .. })));
        assert!(PplConfig { stride: 0, ..cfg }.validate().is_err());
    }
}
