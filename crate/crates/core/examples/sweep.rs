//! Runs baseline and regularized trajectories for a config file and prints
//! them side by side: `cargo run --release --example sweep -- desk.conf`.

use collapse_core::autophagy::{run_experiment, ExperimentConfig};

fn main() -> collapse_core::Result<()> {
    let path = std::env::args().nth(1).expect("config path");
    let cfg = ExperimentConfig::from_file(std::path::Path::new(&path))?;
    for on in [false, true] {
        let cfg = ExperimentConfig { mncis_enabled: on, ..cfg.clone() };
        let t = std::time::Instant::now();
        println!("== mncis_enabled = {on}");
        run_experiment(&cfg, &mut |r| {
            println!(
                "gen {:2} rank {:7.4} ppl {:9.3} lm {:.4} asnc {:.5} d2 {:.4} [{:.0}s] {:?}",
                r.generation, r.effective_rank, r.perplexity, r.mean_lm_loss, r.mean_asnc_loss, r.distinct_2,
                t.elapsed().as_secs_f64(), r.sample_text.chars().take(60).collect::<String>()
            );
            Ok(())
        })?;
    }
    Ok(())
}
