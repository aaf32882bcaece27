use std::path::Path;
use std::process::{Command, Output};

fn kdcode(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_kdcode")).args(args).output().expect("runs");
    assert!(out.status.success(), "kdcode {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "vocab = 80\ndim = 8\nclusters = 8\nk = 4\ndims = 4\ncode_dim = 8\nepochs = 4\nbatch_size = 16\nlearning_rate = 0.01\nnn_k = 5\nprobe_trials = 20\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn fit_codes_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    kdcode(&["fit-codes", "-c", &cfg, "-o", a.to_str().unwrap()]);
    kdcode(&["fit-codes", "-c", &cfg, "-o", b.to_str().unwrap()]);
    for f in ["codes.txt", "codebook.kdcb", "report.jsonl", "report.txt", "metrics.jsonl"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
    let codes = String::from_utf8(read(&a, "codes.txt")).unwrap();
    assert!(codes.starts_with("#kd K=4 D=4 N=80\n"));

    let c = tmp.path().join("c");
    kdcode(&["fit-codes", "-c", &cfg, "--set", "seed=1", "-o", c.to_str().unwrap()]);
    assert_ne!(read(&a, "codebook.kdcb"), read(&c, "codebook.kdcb"));
}

#[test]
fn eval_reproduces_the_fit_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    kdcode(&["fit-codes", "-c", &cfg, "-o", run.to_str().unwrap()]);
    let report = tmp.path().join("eval.jsonl");
    kdcode(&["eval", "-c", &cfg, "-a", run.to_str().unwrap(), "-o", report.to_str().unwrap()]);
    assert_eq!(std::fs::read(&report).unwrap(), read(&run, "report.jsonl"));
}

#[test]
fn baseline_sweep_and_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = kdcode(&["baseline", "-c", &cfg, "-m", "full,pq,scalar", "--set", "pq_subspaces=2", "--set", "pq_centroids=4"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("pq-4x4") && table.contains("scalar-8bit") && table.contains("full"));

    let reports = tmp.path().join("sweep.jsonl");
    kdcode(&["sweep", "-c", &cfg, "--axis", "dims", "--values", "4,5", "--seeds", "0,1", "-o", reports.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&reports).unwrap().lines().count(), 4);

    let run = tmp.path().join("lossy");
    kdcode(&["fit-codes", "-c", &cfg, "--set", "k=3", "--set", "dims=2", "--set", "lossy=true", "-o", run.to_str().unwrap()]);
    let codes = run.join("codes.txt");
    let out = kdcode(&["probe-codes", "-c", &cfg, "--codes", codes.to_str().unwrap(), "--limit", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.split('\t').next().unwrap().contains('-'), "{first}");
    assert!(text.contains("intra-code cosine"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_kdcode")).args(["fit-codes", "--set", "k=1", "-o", "/tmp/never"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("K must be at least 2"));
    let out = Command::new(env!("CARGO_BIN_EXE_kdcode")).args(["fit-codes", "--set", "epoch=1", "-o", "/tmp/never"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for f in ["reconstruction.toml", "classification.toml"] {
        kdcode::config::ExperimentConfig::load(&dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
    }
    let out = kdcode(&["config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    kdcode::config::ExperimentConfig::from_toml(&text).unwrap();
}
