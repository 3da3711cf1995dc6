//! End-to-end tests of the `collapse-lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_collapse-lab"))
}

fn micro_config(dir: &Path) -> PathBuf {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/corpus.txt");
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/micro.conf")).unwrap();
    let text: String = text
        .lines()
        .filter(|l| !l.starts_with("corpus_path") && !l.starts_with("out_dir"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("micro.conf");
    std::fs::write(&path, format!("{text}corpus_path = {}\n", corpus.display())).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn compare_writes_two_trajectories_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("out");
    let o = run(bin().args(["compare", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(0));
    for f in ["baseline.csv", "mncis.csv", "comparison.svg", "baseline_samples/gen_2_sample.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("baseline.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let svg = std::fs::read_to_string(out.join("comparison.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn run_honours_overrides_and_plot_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("run");
    let o = run(bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--mncis", "on", "--seed", "3", "--out"])
        .arg(&out));
    assert_eq!(o.status.code(), Some(0));
    let conf = std::fs::read_to_string(out.join("mncis.conf")).unwrap();
    assert!(conf.contains("seed = 3") && conf.contains("mncis_enabled = true"));
    let svg = dir.path().join("p.svg");
    let o = run(bin().args(["plot", "--baseline"]).arg(out.join("mncis.csv")).arg("--out").arg(&svg));
    assert_eq!(o.status.code(), Some(0));
    assert!(svg.exists());
}

#[test]
fn plot_accepts_a_handwritten_two_row_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    std::fs::write(
        &csv,
        "generation,effective_rank,perplexity,mean_lm_loss,mean_asnc_loss,distinct_2\n0,3.6,80,4.0,0.1,0.5\n1,2.2,90,3.9,0.1,0.4\n",
    )
    .unwrap();
    let svg = dir.path().join("t.svg");
    let o = run(bin().args(["plot", "--baseline"]).arg(&csv).arg("--out").arg(&svg));
    assert_eq!(o.status.code(), Some(0));
    let one = dir.path().join("one.csv");
    std::fs::write(&one, "generation,effective_rank,perplexity,mean_lm_loss,mean_asnc_loss,distinct_2\n0,1,2,3,4,5\n").unwrap();
    let o = run(bin().args(["plot", "--baseline"]).arg(&one).arg("--out").arg(&svg));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_matrix_and_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    std::fs::write(&m, "4 2\n1 0\n-1 0\n0 1\n0 -1\n").unwrap();
    let o = run(bin().args(["analyze", "--matrix"]).arg(&m));
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("effective_rank=2.0000000000"), "{stdout}");
    let t = dir.path().join("t.csv");
    std::fs::write(&t, "1,2,1,2\n1,2,1,2\n").unwrap();
    let o = run(bin().args(["analyze", "--tokens"]).arg(&t));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("distinct_2=0.3333333333"), "{stdout}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(bin().arg("--bogus")).status.code(), Some(2));
    assert_eq!(run(bin().args(["run"])).status.code(), Some(2));
    assert_eq!(run(bin().args(["run", "--config", "/nonexistent.conf"])).status.code(), Some(2));
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "seed = 1\nlamda = 0.5\n").unwrap();
    let o = run(bin().args(["run", "--config"]).arg(&bad));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.conf");
    std::fs::write(&cfg, "corpus_path = /nonexistent/corpus.txt\nn_generations = 0\n").unwrap();
    let o = run(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
}
