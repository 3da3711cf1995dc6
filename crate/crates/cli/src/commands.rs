//! Subcommands and their exit-status mapping.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use collapse_core::autophagy::{run_experiment, ExperimentConfig, GenerationRecord};
use collapse_core::metrics::{distinct_n, spectrum, HiddenBatch};

use crate::plot::render_plot;
use crate::trajectory::{read_trajectory, write_trajectory, TrajectoryPoint};

#[derive(Debug, Parser)]
#[command(name = "collapse-lab", version, about = "Model-collapse laboratory: recursive training on self-generated text")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a configuration file.
    Run(RunArgs),
    /// Run the baseline and the regularized experiment with a shared seed and plot both.
    Compare(CompareArgs),
    /// Render the comparison figure from existing trajectory CSVs.
    Plot(PlotArgs),
    /// Effective rank of a matrix file, or distinct-n of token sequences.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Override `mncis_enabled`.
    #[arg(long, value_enum)]
    pub mncis: Option<Switch>,
    /// Override `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Baseline trajectory CSV.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Regularized trajectory CSV.
    #[arg(long)]
    pub mncis: Option<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
pub struct AnalyzeArgs {
    /// Matrix file: a `N D` header line, then N rows of D reals.
    #[arg(long, group = "input")]
    pub matrix: Option<PathBuf>,
    /// Token file: one sequence per line, ids separated by commas.
    #[arg(long, group = "input")]
    pub tokens: Option<PathBuf>,
    /// Text file: every non-empty line is a byte sequence.
    #[arg(long, group = "input")]
    pub text: Option<PathBuf>,
    /// n-gram order for token and text input.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Failure = 1,
    Usage = 2,
}

/// Marks an error caused by the invocation or configuration rather than by the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit status for an error returned by [`execute`].
pub fn classify(err: &anyhow::Error) -> ExitStatus {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return ExitStatus::Usage;
        }
        if let Some(e) = cause.downcast_ref::<collapse_core::Error>() {
            if matches!(e, collapse_core::Error::Config(_) | collapse_core::Error::Parse { .. }) {
                return ExitStatus::Usage;
            }
        }
    }
    ExitStatus::Failure
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path).map_err(|e| match e {
        collapse_core::Error::Io(io) => anyhow::Error::new(UsageError(format!("cannot read config {}: {io}", path.display()))),
        other => anyhow::Error::new(other).context(format!("invalid config {}", path.display())),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    Ok(cfg)
}

pub fn mode_label(cfg: &ExperimentConfig) -> &'static str {
    if cfg.mncis_enabled {
        "mncis"
    } else {
        "baseline"
    }
}

/// Runs one experiment, rewriting `<out_dir>/<label>.csv` and writing
/// `<out_dir>/<label>_samples/gen_<n>_sample.txt` after every generation so
/// a failed run leaves its completed generations on disk.
pub fn run_and_persist(cfg: &ExperimentConfig, console: &mut dyn Write) -> Result<Vec<TrajectoryPoint>> {
    let label = mode_label(cfg);
    let samples = cfg.out_dir.join(format!("{label}_samples"));
    std::fs::create_dir_all(&samples).with_context(|| format!("creating {}", samples.display()))?;
    std::fs::write(cfg.out_dir.join(format!("{label}.conf")), cfg.to_text())?;
    let csv = cfg.out_dir.join(format!("{label}.csv"));
    writeln!(console, "=== {} run (seed {}) ===", label.to_uppercase(), cfg.seed)?;
    let mut points = Vec::new();
    let mut persist = |r: &GenerationRecord| -> collapse_core::Result<()> {
        points.push(TrajectoryPoint::from(r));
        write_trajectory(&points, &csv).map_err(|e| collapse_core::Error::Data(format!("{e:#}")))?;
        std::fs::write(samples.join(format!("gen_{}_sample.txt", r.generation)), &r.sample_text)?;
        writeln!(
            console,
            "gen {:>2}: effective_rank={:.6} perplexity={:.4} mean_lm_loss={:.6} mean_asnc_loss={:.6} distinct_2={:.6}",
            r.generation, r.effective_rank, r.perplexity, r.mean_lm_loss, r.mean_asnc_loss, r.distinct_2
        )?;
        Ok(())
    };
    run_experiment(cfg, &mut persist).with_context(|| format!("{label} run failed; completed generations are in {}", csv.display()))?;
    writeln!(console, "trajectory written to {}", csv.display())?;
    Ok(points)
}

fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|t| t.trim().parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("line {}: bad token id", i + 1))
        })
        .collect()
}

/// Executes a parsed command, writing human-readable output to `console`.
pub fn execute(cli: Cli, console: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let mut cfg = load_config(&a.config, a.seed, a.out.as_deref())?;
            if let Some(m) = a.mncis {
                cfg.mncis_enabled = m == Switch::On;
            }
            run_and_persist(&cfg, console)?;
        }
        Command::Compare(a) => {
            let cfg = load_config(&a.config, a.seed, a.out.as_deref())?;
            let base = run_and_persist(&ExperimentConfig { mncis_enabled: false, ..cfg.clone() }, console)?;
            let reg = run_and_persist(&ExperimentConfig { mncis_enabled: true, ..cfg.clone() }, console)?;
            let svg = cfg.out_dir.join("comparison.svg");
            std::fs::write(&svg, render_plot(&base, Some(&reg))?)?;
            let (b, m) = (base.last().expect("gen 0 exists"), reg.last().expect("gen 0 exists"));
            writeln!(console, "final generation {}:", b.generation)?;
            writeln!(console, "  baseline effective_rank={:.6} distinct_2={:.6}", b.effective_rank, b.distinct_2)?;
            writeln!(console, "  mncis    effective_rank={:.6} distinct_2={:.6}", m.effective_rank, m.distinct_2)?;
            writeln!(console, "plot written to {}", svg.display())?;
        }
        Command::Plot(a) => {
            let base = read_trajectory(&a.baseline)?;
            let reg = a.mncis.as_deref().map(read_trajectory).transpose()?;
            std::fs::write(&a.out, render_plot(&base, reg.as_deref())?)
                .with_context(|| format!("writing {}", a.out.display()))?;
            writeln!(console, "plot written to {}", a.out.display())?;
        }
        Command::Analyze(a) => {
            if let Some(path) = a.matrix {
                let h = HiddenBatch::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let s = spectrum(&h)?;
                writeln!(console, "rows={} dim={}", h.rows(), h.dim())?;
                writeln!(console, "effective_rank={:.10}", s.effective_rank)?;
                let top: Vec<String> = s.eigenvalues.iter().take(8).map(|v| format!("{v:.6e}")).collect();
                writeln!(console, "leading_eigenvalues={}", top.join(" "))?;
            } else {
                let (path, seqs) = if let Some(p) = a.tokens {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let seqs = parse_token_lines(&text).with_context(|| format!("parsing {}", p.display()))?;
                    (p, seqs)
                } else {
                    let p = a.text.expect("clap requires one input");
                    let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                    let seqs = bytes
                        .split(|&b| b == b'\n')
                        .filter(|l| !l.is_empty())
                        .map(collapse_core::corpus::tokenize)
                        .collect();
                    (p, seqs)
                };
                if seqs.is_empty() {
                    bail!("{} holds no sequences", path.display());
                }
                writeln!(console, "sequences={}", seqs.len())?;
                writeln!(console, "distinct_{}={:.10}", a.n, distinct_n(&seqs, a.n)?)?;
            }
        }
    }
    Ok(())
}
