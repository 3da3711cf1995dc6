//! Times the pieces of one generation for a given model size, to size
//! desk configurations: `cargo run --release --example throughput -- 64 4 128`.

use std::time::Instant;

use collapse_core::autophagy::{train_generation, AsncConfig, ExperimentConfig, TrainConfig};
use collapse_core::corpus::{chunk, load_corpus};
use collapse_core::metrics::pooled_last_hidden;
use collapse_core::model::{ModelConfig, TinyLM};
use collapse_core::perplexity::{sliding_window_ppl, PplConfig};

fn main() -> collapse_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (d_model, n_layers, seq) = (args.first().copied().unwrap_or(64), args.get(1).copied().unwrap_or(4), args.get(2).copied().unwrap_or(128));
    let rows = 64;
    let cfg = ModelConfig { d_model, n_layers, max_positions: seq, ..ModelConfig::default() };
    let stream = load_corpus(std::path::Path::new(collapse_core::autophagy::BUNDLED_CORPUS))?;
    let data = chunk(&stream, seq, rows)?;
    let mut model = TinyLM::init(cfg.clone(), 0)?;
    let train = TrainConfig { epochs_per_gen: 1, ..TrainConfig::default() };
    for (label, on) in [("train (LM only)", false), ("train (LM + ASNC)", true)] {
        let t = Instant::now();
        train_generation(&mut model, &data, &train, &AsncConfig::default(), on, 1)?;
        let s = t.elapsed().as_secs_f64();
        println!("{label}: {rows} rows x {seq} tokens in {s:.3}s -> {:.1} ms/row", 1e3 * s / rows as f64);
    }
    let t = Instant::now();
    pooled_last_hidden(&model, &data.rows(), None, 16)?;
    println!("pool: {:.1} ms/row", 1e3 * t.elapsed().as_secs_f64() / rows as f64);
    let ppl = PplConfig { stride: seq, max_length: seq, eval_token_cap: 8192 };
    let t = Instant::now();
    sliding_window_ppl(&model, stream.ids(), &ppl)?;
    println!("ppl over 8192 tokens: {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let prompts: Vec<Vec<u32>> = (0..8).map(|i| data.row(i)[..5].to_vec()).collect();
    model.generate(&prompts, seq, 50, 1.0, 3, 256)?;
    println!("generate: {:.1} ms/row", 1e3 * t.elapsed().as_secs_f64() / 8.0);
    let _ = ExperimentConfig::default();
    Ok(())
}
