use std::fs;
use std::path::{Path, PathBuf};

use isoformer::cli::{run, EXIT_DATA, EXIT_NON_FINITE, EXIT_USAGE};
use tempfile::TempDir;

const TINY_MODEL: &str = "\
tokenizer.dna.k=3
tokenizer.rna.k=3
encoder.dna.embed_dim=8
encoder.rna.embed_dim=8
encoder.protein.embed_dim=8
encoder.dna.ffn_dim=16
encoder.rna.ffn_dim=16
encoder.protein.ffn_dim=16
encoder.dna.num_layers=1
encoder.rna.num_layers=2
encoder.protein.num_layers=1
encoder.dna.num_heads=2
encoder.rna.num_heads=2
encoder.protein.num_heads=2
aggregation.shared_dim=8
aggregation.num_heads=2
training.learning_rate=3e-3
training.batch_size=8
training.max_epochs=3
training.val_fraction=0.15
";

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/tiny")
        .join(name)
        .display()
        .to_string()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("isoformer").chain(args.iter().copied()))
}

fn record_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(String::from)
        .collect()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.conf"), TINY_MODEL).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synthetic(&self, name: &str, genes: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        let code = cli(&[
            "gen-synthetic",
            "--genes",
            genes,
            "--isoforms",
            "3",
            "--tissues",
            "3",
            "--seed",
            seed,
            "--set",
            "synthetic.dna_length=24",
            "--set",
            "synthetic.rna_length=24",
            "--out",
            &p(&out),
        ]);
        assert_eq!(code, 0);
        out
    }

    fn train(&self, dataset: &Path, out: &str, extra: &[&str]) -> i32 {
        let conf = p(&self.path("tiny.conf"));
        let out = p(&self.path(out));
        let mut args = vec!["train", "--dataset", dataset.to_str().unwrap(), "--out-dir", &out, "--config", &conf];
        args.extend_from_slice(extra);
        cli(&args)
    }
}

fn build_args(out: &Path, manifest: &str) -> Vec<String> {
    [
        "build-dataset",
        "--expression",
        &fixture("expression.tsv"),
        "--genome-fasta",
        &fixture("genome.fa"),
        "--rna-fasta",
        &fixture("rna.fa"),
        "--protein-fasta",
        &fixture("protein.fa"),
        "--manifest",
        &fixture(manifest),
        "--window",
        "10",
        "--out",
        &p(out),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn build_dataset_from_fixture() {
    let ws = Workspace::new();
    let out = ws.path("ds.tsv");
    let args = build_args(&out, "manifest.tsv");
    assert_eq!(run(std::iter::once("isoformer".to_string()).chain(args)), 0);
    let lines = record_lines(&out);
    assert_eq!(lines.len(), 3);
    let t3: Vec<&str> = lines[2].split('\t').collect();
    assert_eq!(t3[0], "T3");
    assert_eq!(t3[4], "", "T3 has no protein");
    assert!(fs::read_to_string(&out).unwrap().starts_with("#tissues\tliver\tlung\n"));
    assert!(ws.path("ds.tsv.manifest.txt").exists());
}

#[test]
fn build_dataset_skips_out_of_bounds_window() {
    let ws = Workspace::new();
    let out = ws.path("ds.tsv");
    let args = build_args(&out, "manifest_oob.tsv");
    assert_eq!(run(std::iter::once("isoformer".to_string()).chain(args)), 0);
    assert_eq!(record_lines(&out).len(), 2);
    let skipped = fs::read_to_string(ws.path("ds.tsv.skipped.tsv")).unwrap();
    assert!(skipped.lines().any(|l| l.starts_with("T3\t")), "{skipped}");
}

#[test]
fn build_dataset_missing_argument_is_usage_error() {
    let ws = Workspace::new();
    let mut args = build_args(&ws.path("ds.tsv"), "manifest.tsv");
    let i = args.iter().position(|a| a == "--expression").unwrap();
    args.drain(i..i + 2);
    assert_eq!(run(std::iter::once("isoformer".to_string()).chain(args)), EXIT_USAGE);
    assert!(!ws.path("ds.tsv").exists());
}

#[test]
fn gen_synthetic_counts_and_determinism() {
    let ws = Workspace::new();
    let a = ws.synthetic("a.tsv", "50", "7");
    let b = ws.synthetic("b.tsv", "50", "7");
    let c = ws.synthetic("c.tsv", "50", "8");
    assert_eq!(record_lines(&a).len(), 150);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(ws.path("a.tsv.truth.txt")).unwrap(), fs::read(ws.path("b.tsv.truth.txt")).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn gen_synthetic_corpus_requires_output() {
    let ws = Workspace::new();
    let out = p(&ws.path("a.tsv"));
    assert_eq!(cli(&["gen-synthetic", "--genes", "5", "--isoforms", "2", "--out", &out, "--corpus-genes", "4"]), EXIT_USAGE);
}

#[test]
fn train_is_deterministic() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "20", "1");
    assert_eq!(ws.train(&ds, "r1", &["--seed", "4"]), 0);
    assert_eq!(ws.train(&ds, "r2", &["--seed", "4"]), 0);
    for f in ["metrics.tsv", "checkpoint.isof", "history.csv", "split.tsv", "stats.tsv", "run.conf"] {
        assert_eq!(
            fs::read(ws.path("r1").join(f)).unwrap(),
            fs::read(ws.path("r2").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let metrics = fs::read_to_string(ws.path("r1/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("condition\tseed\ttissue\tr2\tspearman\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 + 1);
}

#[test]
fn train_records_provenance() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "1");
    assert_eq!(ws.train(&ds, "r", &["--modalities", "rna", "--epochs", "2", "--set", "training.patience=5"]), 0);
    let manifest = fs::read_to_string(ws.path("r/manifest.txt")).unwrap();
    assert!(manifest.contains("# source training.max_epochs: flag"), "{manifest}");
    assert!(manifest.contains("# source training.patience: flag"));
    assert!(manifest.contains("# source encoder.rna.embed_dim: file"));
    assert!(manifest.contains("# source training.adam_beta1: default"));
    assert!(manifest.contains("# source model.num_tissues: derived"));
    assert!(manifest.contains("input.dataset.sha256="));
    let conf = fs::read_to_string(ws.path("r/run.conf")).unwrap();
    assert!(conf.contains("model.modalities=rna\n"), "{conf}");
    let history = fs::read_to_string(ws.path("r/history.csv")).unwrap();
    assert!(history.lines().count() <= 3);
}

#[test]
fn train_rejects_unknown_key_and_bad_modality() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "5", "1");
    assert_eq!(ws.train(&ds, "r1", &["--set", "training.no_such_key=1"]), EXIT_USAGE);
    assert_eq!(ws.train(&ds, "r2", &["--modalities", "dna+xyz"]), EXIT_USAGE);
}

#[test]
fn train_reports_non_finite_loss() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "1");
    assert_eq!(ws.train(&ds, "r", &["--learning-rate", "1e30", "--epochs", "3"]), EXIT_NON_FINITE);
}

#[test]
fn evaluate_fits_training_partition_of_overfit_run() {
    let ws = Workspace::new();
    // Every gene is copied under several ids so that validation genes repeat
    // training genes and memorizing them is rewarded.
    let base = ws.synthetic("base.tsv", "3", "2");
    let text = fs::read_to_string(&base).unwrap();
    let mut lines: Vec<String> = text.lines().filter(|l| l.starts_with('#')).map(String::from).collect();
    for copy in 0..8 {
        for line in record_lines(&base) {
            let mut f: Vec<String> = line.split('\t').map(String::from).collect();
            f[0] = format!("{}.c{copy}", f[0]);
            f[1] = format!("{}.c{copy}", f[1]);
            lines.push(f.join("\t"));
        }
    }
    let ds = ws.path("ds.tsv");
    fs::write(&ds, lines.join("\n") + "\n").unwrap();
    let code = ws.train(
        &ds,
        "r",
        &[
            "--epochs",
            "200",
            "--set",
            "training.patience=200",
            "--set",
            "training.val_fraction=0.1",
            "--set",
            "training.test_fraction=0.2",
            "--set",
            "training.batch_size=2",
        ],
    );
    assert_eq!(code, 0);
    let out = ws.path("train_metrics.tsv");
    let code = cli(&[
        "evaluate",
        "--run-dir",
        &p(&ws.path("r")),
        "--dataset",
        &p(&ds),
        "--partition",
        "train",
        "--out",
        &p(&out),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let mean: Vec<&str> = text.lines().last().unwrap().split('\t').collect();
    assert_eq!(mean[2], "macro_mean");
    let r2: f64 = mean[3].parse().unwrap();
    assert!(r2 > 0.99, "train R2 {r2}\n{text}");
}

#[test]
fn evaluate_rejects_corrupt_checkpoint() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "1");
    assert_eq!(ws.train(&ds, "r", &["--epochs", "1"]), 0);
    let ckpt = ws.path("r/checkpoint.isof");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ckpt, bytes).unwrap();
    let code = cli(&["evaluate", "--run-dir", &p(&ws.path("r")), "--dataset", &p(&ds)]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn evaluate_rejects_unknown_partition() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "5", "1");
    let code = cli(&["evaluate", "--run-dir", &p(&ws.path("missing")), "--dataset", &p(&ds), "--partition", "holdout"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn ablate_single_seed_has_zero_spread() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "3");
    let out = ws.path("abl");
    let code = cli(&[
        "ablate",
        "--dataset",
        &p(&ds),
        "--out-dir",
        &p(&out),
        "--conditions",
        "rna;dna+rna",
        "--seeds",
        "1",
        "--config",
        &p(&ws.path("tiny.conf")),
        "--set",
        "training.max_epochs=1",
    ]);
    assert_eq!(code, 0);
    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "rna");
    assert_eq!(rows[1][0], "dna+rna");
    for r in &rows {
        assert_eq!(r[1], "1");
        assert_eq!(r[3], "0.0000");
        assert_eq!(r[5], "0.0000");
    }
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
}

fn region_table(ws: &Workspace, ds: &Path) -> PathBuf {
    let mut text = String::from("transcript_id\tregion_name\tstart\tend\n");
    for line in record_lines(ds) {
        let f: Vec<&str> = line.split('\t').collect();
        let len = f[3].len();
        text.push_str(&format!("{}\tCDS\t0\t{}\n", f[0], len / 2));
    }
    let out = ws.path("regions.tsv");
    fs::write(&out, text).unwrap();
    out
}

fn analyze(ws: &Workspace, a: &str, b: &str, ds: &Path, regions: &Path, out: &str, extra: &[&str]) -> i32 {
    let a = p(&ws.path(a).join("checkpoint.isof"));
    let b = p(&ws.path(b).join("checkpoint.isof"));
    let out = p(&ws.path(out));
    let mut args = vec![
        "analyze-attention",
        "--checkpoint-a",
        &a,
        "--checkpoint-b",
        &b,
        "--dataset",
        ds.to_str().unwrap(),
        "--regions",
        regions.to_str().unwrap(),
        "--out",
        &out,
    ];
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn analyze_identical_checkpoints_selects_nothing() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "5");
    assert_eq!(ws.train(&ds, "r", &["--epochs", "1"]), 0);
    let regions = region_table(&ws, &ds);
    let code = analyze(&ws, "r", "r", &ds, &regions, "delta.tsv", &["--mu", "0.02", "--matrix-out", &p(&ws.path("m.txt"))]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(ws.path("delta.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 2);
    for r in &rows {
        assert_eq!(r[6], "false", "{text}");
        assert!(r[4] == "0" || r[4] == "NA", "{text}");
    }
    let manifest = fs::read_to_string(ws.path("delta.tsv.manifest.txt")).unwrap();
    assert!(manifest.contains("analysis.mu=0.02\n"), "{manifest}");
    assert!(manifest.contains("# source analysis.mu: flag"));
    assert_eq!(fs::read_to_string(ws.path("m.txt")).unwrap().lines().count(), 2);
}

#[test]
fn analyze_rejects_mismatched_layouts() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "5");
    assert_eq!(ws.train(&ds, "a", &["--epochs", "1"]), 0);
    assert_eq!(ws.train(&ds, "b", &["--epochs", "1", "--set", "encoder.rna.num_layers=1"]), 0);
    let regions = region_table(&ws, &ds);
    assert_eq!(analyze(&ws, "a", "b", &ds, &regions, "delta.tsv", &[]), EXIT_DATA);
}

#[test]
fn rerun_reproduces_outputs() {
    let ws = Workspace::new();
    let ds = ws.synthetic("ds.tsv", "10", "1");
    assert_eq!(ws.train(&ds, "r", &["--seed", "2", "--epochs", "2"]), 0);
    let dir = ws.path("r");
    let before: Vec<Vec<u8>> =
        ["metrics.tsv", "checkpoint.isof"].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    let manifest = ws.path("saved_manifest.txt");
    fs::copy(dir.join("manifest.txt"), &manifest).unwrap();
    fs::remove_dir_all(&dir).unwrap();
    assert_eq!(cli(&["rerun", "--manifest", &p(&manifest)]), 0);
    let after: Vec<Vec<u8>> =
        ["metrics.tsv", "checkpoint.isof"].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn help_lists_configuration_keys() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_isoformer"))
        .args(["train", "--help"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("training.learning_rate"), "{text}");
    assert!(text.contains("warmup.modalities"));
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_isoformer")).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
