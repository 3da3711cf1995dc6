//! Experiment configuration and its `key = value` file format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional and defaults to [`ExperimentConfig::default`];
//! unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::optim::AdamWConfig;
use crate::asnc::AsncConfig;
use crate::corpus::BYTE_VOCAB;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::perplexity::PplConfig;

/// The corpus shipped with the crate.
pub const BUNDLED_CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");

/// Every accepted configuration key, in canonical order.
pub const CONFIG_KEYS: [&str; 23] = [
    "seed",
    "n_generations",
    "mncis_enabled",
    "lambda",
    "k_layers",
    "learning_rate",
    "epochs_per_gen",
    "clip_norm",
    "batch_size",
    "weight_decay",
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "seq_len",
    "subset_cap",
    "top_k",
    "temperature",
    "prompt_len",
    "ppl_stride",
    "eval_token_cap",
    "corpus_path",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs_per_gen: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            epochs_per_gen: 2,
            clip_norm: 1.0,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub prompt_len: usize,
    /// Prompts decoded together; also the granularity of the synthetic row count.
    pub batch: usize,
    /// Tokens of the real stream from which prompts are drawn.
    pub pool_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_k: 50,
            temperature: 1.0,
            prompt_len: 5,
            batch: 8,
            pool_tokens: 5120,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_generations: usize,
    pub mncis_enabled: bool,
    pub asnc: AsncConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub seq_len: usize,
    pub subset_cap: usize,
    pub sampling: SamplingConfig,
    pub ppl_stride: usize,
    pub eval_token_cap: usize,
    pub corpus_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            n_generations: 15,
            mncis_enabled: false,
            asnc: AsncConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            seq_len: 128,
            subset_cap: 1500,
            sampling: SamplingConfig::default(),
            ppl_stride: 512,
            eval_token_cap: 50_000,
            corpus_path: PathBuf::from(BUNDLED_CORPUS),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Perplexity settings; windows span the model context.
    pub fn ppl(&self) -> PplConfig {
        PplConfig {
            stride: self.ppl_stride,
            max_length: self.model.max_positions,
            eval_token_cap: self.eval_token_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.asnc.validate(self.model.n_layers + 1)?;
        self.ppl().validate()?;
        let t = &self.train;
        let o = &t.optimizer;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && t.clip_norm > 0.0) {
            return Err(Error::config("learning_rate and clip_norm must be positive, weight_decay nonnegative"));
        }
        if t.epochs_per_gen == 0 || t.batch_size == 0 {
            return Err(Error::config("epochs_per_gen and batch_size must be positive"));
        }
        if self.model.vocab_size != BYTE_VOCAB {
            return Err(Error::config(format!(
                "the byte tokenizer needs vocab_size = {BYTE_VOCAB}, got {}",
                self.model.vocab_size
            )));
        }
        if self.seq_len < 2 || self.seq_len > self.model.max_positions {
            return Err(Error::config(format!(
                "seq_len {} must be in 2..={}",
                self.seq_len, self.model.max_positions
            )));
        }
        let s = &self.sampling;
        if s.prompt_len == 0 || s.prompt_len >= self.seq_len {
            return Err(Error::config("prompt_len must be in 1..seq_len"));
        }
        if s.top_k == 0 || !(s.temperature > 0.0 && s.temperature.is_finite()) {
            return Err(Error::config("top_k and temperature must be positive"));
        }
        if s.batch == 0 || self.subset_cap < s.batch.max(2) {
            return Err(Error::config(format!(
                "subset_cap must be at least {} so a full sampling batch fits",
                s.batch.max(2)
            )));
        }
        if s.pool_tokens < self.seq_len {
            return Err(Error::config("the prompt pool must hold at least one row"));
        }
        Ok(())
    }

    /// Parses a configuration file body. Relative paths are resolved
    /// against `base_dir` when given.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&canonical) = CONFIG_KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            };
            if seen.contains(&canonical) {
                return Err(Error::Parse {
                    line,
                    msg: format!("key `{key}` given twice"),
                });
            }
            seen.push(canonical);
            cfg.set(canonical, value, base_dir).map_err(|msg| Error::Parse { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| format!("bad value `{v}`: {e}"))
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key {
            "seed" => self.seed = num(value)?,
            "n_generations" => self.n_generations = num(value)?,
            "mncis_enabled" => {
                self.mncis_enabled = match value {
                    "true" | "on" => true,
                    "false" | "off" => false,
                    _ => return Err(format!("expected true/false, got `{value}`")),
                }
            }
            "lambda" => self.asnc.lambda = num(value)?,
            "k_layers" => self.asnc.k_layers = num(value)?,
            "learning_rate" => self.train.optimizer.learning_rate = num(value)?,
            "epochs_per_gen" => self.train.epochs_per_gen = num(value)?,
            "clip_norm" => self.train.clip_norm = num(value)?,
            "batch_size" => self.train.batch_size = num(value)?,
            "weight_decay" => self.train.optimizer.weight_decay = num(value)?,
            "vocab_size" => self.model.vocab_size = num(value)?,
            "d_model" => self.model.d_model = num(value)?,
            "n_layers" => self.model.n_layers = num(value)?,
            "n_heads" => self.model.n_heads = num(value)?,
            "seq_len" => {
                self.seq_len = num(value)?;
                self.model.max_positions = self.seq_len;
            }
            "subset_cap" => self.subset_cap = num(value)?,
            "top_k" => self.sampling.top_k = num(value)?,
            "temperature" => self.sampling.temperature = num(value)?,
            "prompt_len" => self.sampling.prompt_len = num(value)?,
            "ppl_stride" => self.ppl_stride = num(value)?,
            "eval_token_cap" => self.eval_token_cap = num(value)?,
            "corpus_path" => self.corpus_path = path(value),
            "out_dir" => self.out_dir = path(value),
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    /// Canonical file form listing every key; parses back to `self` when
    /// paths are absolute or no base directory is used.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("seed", self.seed.to_string());
        put("n_generations", self.n_generations.to_string());
        put("mncis_enabled", self.mncis_enabled.to_string());
        put("lambda", self.asnc.lambda.to_string());
        put("k_layers", self.asnc.k_layers.to_string());
        put("learning_rate", self.train.optimizer.learning_rate.to_string());
        put("epochs_per_gen", self.train.epochs_per_gen.to_string());
        put("clip_norm", self.train.clip_norm.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("weight_decay", self.train.optimizer.weight_decay.to_string());
        put("vocab_size", self.model.vocab_size.to_string());
        put("d_model", self.model.d_model.to_string());
        put("n_layers", self.model.n_layers.to_string());
        put("n_heads", self.model.n_heads.to_string());
        put("seq_len", self.seq_len.to_string());
        put("subset_cap", self.subset_cap.to_string());
        put("top_k", self.sampling.top_k.to_string());
        put("temperature", self.sampling.temperature.to_string());
        put("prompt_len", self.sampling.prompt_len.to_string());
        put("ppl_stride", self.ppl_stride.to_string());
        put("eval_token_cap", self.eval_token_cap.to_string());
        put("corpus_path", self.corpus_path.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}
