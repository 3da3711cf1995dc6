//! The generational simulator: train on the current corpus, measure, sample
//! a synthetic corpus from the trained model, and train the next generation
//! on it.
//!
//! Generation 0 measures the freshly initialised model on real data. Each
//! later generation `g` trains the model on the current dataset (real for
//! `g = 1`, synthetic afterwards), then records perplexity on the real
//! stream, the effective rank of the pooled last hidden states over the
//! dataset it trained on, and distinct-2 of the samples it generates. Those
//! samples become the next dataset.

pub mod config;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::asnc::AsncConfig;
pub use config::{ExperimentConfig, SamplingConfig, TrainConfig, BUNDLED_CORPUS, CONFIG_KEYS};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};

use crate::asnc::asnc_loss;
use crate::corpus::{
    assemble_synthetic, build_prompt_pool, chunk, decode_lossy, derive_seed, load_corpus, sample_prompts,
    synthetic_row_count, ChunkedDataset, TokenStream, PAD_ID,
};
use crate::error::{Error, Result};
use crate::metrics::{distinct_n, effective_rank, pooled_last_hidden};
use crate::model::{TinyLM, TokenBatch, TokenId};
use crate::perplexity::sliding_window_ppl;
use crate::tensor::Graph;

const TAG_PROMPTS: u64 = 1;
const TAG_SAMPLING: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
/// Characters of decoded sample text kept in a record.
pub const SAMPLE_EXCERPT_CHARS: usize = 200;

/// Measurements of one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub effective_rank: f64,
    pub perplexity: f64,
    pub mean_lm_loss: f64,
    /// `lambda`-scaled regularizer value, logged whether or not it is optimised.
    pub mean_asnc_loss: f64,
    pub distinct_2: f64,
    pub sample_text: String,
}

/// Mean losses over the batches of one training or evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    pub mean_lm_loss: f64,
    pub mean_asnc_loss: f64,
    pub steps: usize,
}

#[derive(Default)]
struct LossAccumulator {
    lm: f64,
    asnc: f64,
    asnc_batches: usize,
    steps: usize,
}

impl LossAccumulator {
    fn push(&mut self, lm: f64, asnc: Option<f64>) {
        self.lm += lm;
        self.steps += 1;
        if let Some(a) = asnc {
            self.asnc += a;
            self.asnc_batches += 1;
        }
    }

    fn finish(self) -> LossStats {
        LossStats {
            mean_lm_loss: self.lm / self.steps.max(1) as f64,
            mean_asnc_loss: self.asnc / self.asnc_batches.max(1) as f64,
            steps: self.steps,
        }
    }
}

/// LM loss and regularizer for one batch on graph `g`. The regularizer needs
/// at least two sequences and is `None` for a single-row batch.
fn batch_losses(
    model: &TinyLM,
    g: &mut Graph,
    params: &[crate::tensor::Var],
    batch: &TokenBatch,
    asnc: &AsncConfig,
) -> Result<(crate::tensor::Var, Option<crate::tensor::Var>)> {
    let out = model.forward(g, params, batch)?;
    let lm = model.lm_loss(g, out.logits, batch)?;
    let reg = if batch.batch() >= 2 {
        Some(asnc_loss(g, &out.hidden_states, Some(batch.mask()), asnc)?)
    } else {
        None
    };
    Ok((lm, reg))
}

/// `epochs` passes over `data` in seeded shuffled order. Each step
/// backpropagates the LM loss, plus the regularizer when `mncis_enabled`,
/// clips the global gradient norm and applies AdamW. Optimizer state starts
/// fresh on every call.
pub fn train_generation(
    model: &mut TinyLM,
    data: &ChunkedDataset,
    train: &TrainConfig,
    asnc: &AsncConfig,
    mncis_enabled: bool,
    shuffle_seed: u64,
) -> Result<LossStats> {
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let mut opt = AdamW::new(train.optimizer.clone());
    let mut acc = LossAccumulator::default();
    for epoch in 0..train.epochs_per_gen {
        let order = data.shuffled_order(shuffle_seed, epoch as u64);
        for idx in order.chunks(train.batch_size) {
            let batch = data.batch(idx)?;
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let (lm, reg) = batch_losses(model, &mut g, &p, &batch, asnc)?;
            let lm_value = g.scalar(lm);
            let reg_value = reg.map(|r| g.scalar(r));
            let objective = match reg {
                Some(r) if mncis_enabled => g.add(lm, r)?,
                _ => lm,
            };
            if !g.scalar(objective).is_finite() {
                return Err(Error::NonFinite(format!("training loss (epoch {epoch})")));
            }
            g.backward(objective)?;
            model.zero_grad();
            model.accumulate_grads(&g, &p)?;
            clip_global_norm(model.params_mut(), train.clip_norm)?;
            opt.step(model.params_mut())?;
            acc.push(lm_value, reg_value);
        }
    }
    Ok(acc.finish())
}

/// Mean LM loss and regularizer of `model` over `data` without training.
pub fn evaluate_losses(model: &TinyLM, data: &ChunkedDataset, batch_size: usize, asnc: &AsncConfig) -> Result<LossStats> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut acc = LossAccumulator::default();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let (lm, reg) = batch_losses(model, &mut g, &p, &batch, asnc)?;
        acc.push(g.scalar(lm), reg.map(|r| g.scalar(r)));
    }
    Ok(acc.finish())
}

/// Effective rank of the mean-pooled last hidden states over `data`.
pub fn dataset_rank(model: &TinyLM, data: &ChunkedDataset, batch_size: usize) -> Result<f64> {
    let pooled = pooled_last_hidden(model, &data.rows(), Some(PAD_ID), batch_size)?;
    effective_rank(&pooled)
}

/// Distinct-2 over rows with trailing padding removed; rows left with
/// fewer than two tokens are skipped.
pub fn sample_distinct_2(rows: &[Vec<TokenId>]) -> Result<f64> {
    let trimmed: Vec<&[TokenId]> = rows
        .iter()
        .map(|r| {
            let end = r.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1);
            &r[..end]
        })
        .filter(|r| r.len() >= 2)
        .collect();
    distinct_n(&trimmed, 2)
}

fn excerpt(ids: &[TokenId]) -> String {
    decode_lossy(ids).chars().take(SAMPLE_EXCERPT_CHARS).collect()
}

/// Samples the synthetic rows produced by generation `generation`: prompts
/// are the first `prompt_len` tokens of random prompt-pool rows, continued
/// by top-k sampling to `seq_len` tokens with end-of-sequence padding.
pub fn generate_synthetic(
    model: &TinyLM,
    pool: &ChunkedDataset,
    cfg: &ExperimentConfig,
    generation: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let s = &cfg.sampling;
    let count = synthetic_row_count(cfg.subset_cap).max(s.batch);
    let count = count / s.batch * s.batch;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_PROMPTS, generation as u64]));
    let prompts = sample_prompts(pool, count, s.prompt_len, &mut rng)?;
    let seed = derive_seed(cfg.seed, &[TAG_SAMPLING, generation as u64]);
    let mut rows = Vec::with_capacity(count);
    for (b, group) in prompts.chunks(s.batch).enumerate() {
        rows.extend(model.generate_from(
            group,
            (b * s.batch) as u64,
            cfg.seq_len,
            s.top_k,
            s.temperature,
            seed,
            PAD_ID,
        )?);
    }
    Ok(rows)
}

/// Mutable state of a running experiment.
pub struct Experiment {
    cfg: ExperimentConfig,
    model: TinyLM,
    real: TokenStream,
    pool: ChunkedDataset,
    current: ChunkedDataset,
    generation: usize,
}

impl Experiment {
    /// Fresh state seeded from `cfg.seed`; the model is initialised and the
    /// real dataset chunked, but nothing is measured yet.
    pub fn new(cfg: ExperimentConfig, real: TokenStream) -> Result<Self> {
        cfg.validate()?;
        let model = TinyLM::init(cfg.model.clone(), cfg.seed)?;
        let current = chunk(&real, cfg.seq_len, cfg.subset_cap)?;
        if current.len() < 2 {
            return Err(Error::data("the corpus yields fewer than 2 training rows"));
        }
        let pool = build_prompt_pool(&real, cfg.seq_len, cfg.sampling.pool_tokens)?;
        Ok(Experiment {
            cfg,
            model,
            real,
            pool,
            current,
            generation: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    pub fn current_dataset(&self) -> &ChunkedDataset {
        &self.current
    }

    /// Index of the next record [`Experiment::step`] will produce.
    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Generation-0 metrics of the untrained model on real data.
    fn ground_truth(&mut self) -> Result<GenerationRecord> {
        let cfg = &self.cfg;
        let losses = evaluate_losses(&self.model, &self.current, cfg.train.batch_size, &cfg.asnc)?;
        let rows = self.current.rows();
        Ok(GenerationRecord {
            generation: 0,
            effective_rank: dataset_rank(&self.model, &self.current, cfg.train.batch_size)?,
            perplexity: sliding_window_ppl(&self.model, self.real.ids(), &cfg.ppl())?,
            mean_lm_loss: losses.mean_lm_loss,
            mean_asnc_loss: losses.mean_asnc_loss,
            distinct_2: sample_distinct_2(&rows)?,
            sample_text: excerpt(&rows[0]),
        })
    }

    /// Train, measure, and sample the next dataset.
    fn cycle(&mut self) -> Result<GenerationRecord> {
        let gen = self.generation;
        let cfg = &self.cfg;
        let losses = train_generation(
            &mut self.model,
            &self.current,
            &cfg.train,
            &cfg.asnc,
            cfg.mncis_enabled,
            derive_seed(cfg.seed, &[TAG_SHUFFLE, gen as u64]),
        )?;
        let perplexity = sliding_window_ppl(&self.model, self.real.ids(), &cfg.ppl())?;
        let effective_rank = dataset_rank(&self.model, &self.current, cfg.train.batch_size)?;
        let samples = generate_synthetic(&self.model, &self.pool, cfg, gen)?;
        let record = GenerationRecord {
            generation: gen,
            effective_rank,
            perplexity,
            mean_lm_loss: losses.mean_lm_loss,
            mean_asnc_loss: losses.mean_asnc_loss,
            distinct_2: sample_distinct_2(&samples)?,
            sample_text: excerpt(&samples[0]),
        };
        self.current = assemble_synthetic(&samples, cfg.seq_len, cfg.subset_cap, gen)?;
        Ok(record)
    }

    /// Produces the next record: generation 0 on the first call, then one
    /// full train → measure → sample cycle per call.
    pub fn step(&mut self) -> Result<GenerationRecord> {
        let record = if self.generation == 0 {
            self.ground_truth()?
        } else {
            self.cycle()?
        };
        for (name, v) in [
            ("effective rank", record.effective_rank),
            ("perplexity", record.perplexity),
            ("mean LM loss", record.mean_lm_loss),
            ("mean ASNC loss", record.mean_asnc_loss),
            ("distinct-2", record.distinct_2),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} of generation {}", record.generation)));
            }
        }
        self.generation += 1;
        Ok(record)
    }
}

/// Runs generations `0..=n_generations` on the stream, calling `on_record`
/// after each so callers can persist progress. A failing generation aborts
/// the run; records already passed to `on_record` stay with the caller.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    real: TokenStream,
    on_record: &mut dyn FnMut(&GenerationRecord) -> Result<()>,
) -> Result<Vec<GenerationRecord>> {
    let mut exp = Experiment::new(cfg.clone(), real)?;
    let mut records = Vec::with_capacity(cfg.n_generations + 1);
    for _ in 0..=cfg.n_generations {
        let r = exp.step()?;
        on_record(&r)?;
        records.push(r);
    }
    Ok(records)
}

/// [`run_experiment_on`] with the corpus read from `cfg.corpus_path`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    on_record: &mut dyn FnMut(&GenerationRecord) -> Result<()>,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    run_experiment_on(cfg, load_corpus(&cfg.corpus_path)?, on_record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;
    use crate::model::ModelConfig;

    fn micro() -> (ExperimentConfig, TokenStream) {
        let text = include_str!("../../data/corpus.txt");
        let real = TokenStream::from_documents(&[&text.as_bytes()[..6000]]);
        let cfg = ExperimentConfig {
            n_generations: 2,
            model: ModelConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                max_positions: 32,
                ..ModelConfig::default()
            },
            seq_len: 32,
            subset_cap: 24,
            train: TrainConfig {
                batch_size: 8,
                epochs_per_gen: 1,
                ..TrainConfig::default()
            },
            ppl_stride: 32,
            eval_token_cap: 512,
            asnc: AsncConfig { lambda: 0.5, k_layers: 2 },
            ..ExperimentConfig::default()
        };
        (cfg, real)
    }

    #[test]
    fn micro_run_shape_and_determinism() {
        let (cfg, real) = micro();
        let mut seen = 0;
        let a = run_experiment_on(&cfg, real.clone(), &mut |r| {
            assert_eq!(r.generation, seen);
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(a.len(), 3);
        for r in &a {
            assert!(r.perplexity >= 1.0 && r.effective_rank >= 1.0);
        }
        let b = run_experiment_on(&cfg, real.clone(), &mut |_| Ok(())).unwrap();
        assert_eq!(a, b);
        let mncis = ExperimentConfig {
            mncis_enabled: true,
            ..cfg.clone()
        };
        let m = run_experiment_on(&mncis, real, &mut |_| Ok(())).unwrap();
        assert_eq!(m[0], a[0]);
        assert_ne!(m[1], a[1]);
    }

    #[test]
    fn zero_generations_gives_ground_truth_only() {
        let (cfg, real) = micro();
        let cfg = ExperimentConfig { n_generations: 0, ..cfg };
        assert_eq!(run_experiment_on(&cfg, real, &mut |_| Ok(())).unwrap().len(), 1);
    }

    #[test]
    fn synthetic_rows_start_with_pool_prompts() {
        let (cfg, real) = micro();
        let model = TinyLM::init(cfg.model.clone(), 1).unwrap();
        let pool = build_prompt_pool(&real, cfg.seq_len, cfg.sampling.pool_tokens).unwrap();
        let rows = generate_synthetic(&model, &pool, &cfg, 1).unwrap();
        assert_eq!(rows.len(), 24);
        for r in &rows {
            assert_eq!(r.len(), cfg.seq_len);
            assert!((0..pool.len()).any(|i| pool.row(i)[..5] == r[..5]));
        }
        let data = assemble_synthetic(&rows, cfg.seq_len, cfg.subset_cap, 1).unwrap();
        assert_eq!(data.source(), Source::Synthetic(1));
    }

    #[test]
    fn distinct_2_ignores_padding() {
        let rows = vec![vec![1, 2, 1, 2, PAD_ID, PAD_ID], vec![PAD_ID; 6]];
        assert_eq!(sample_distinct_2(&rows).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn logging_the_regularizer_does_not_perturb_training() {
        let (cfg, real) = micro();
        let data = chunk(&real, cfg.seq_len, cfg.subset_cap).unwrap();
        let train = |asnc: &AsncConfig, on: bool| {
            let mut m = TinyLM::init(cfg.model.clone(), 5).unwrap();
            train_generation(&mut m, &data, &cfg.train, asnc, on, 9).unwrap();
            m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let base = train(&cfg.asnc, false);
        assert_eq!(base, train(&AsncConfig { lambda: 3.0, k_layers: 1 }, false));
        assert_eq!(base, train(&AsncConfig { lambda: 0.0, k_layers: 2 }, true));
        assert_ne!(base, train(&cfg.asnc, true));
    }
}
