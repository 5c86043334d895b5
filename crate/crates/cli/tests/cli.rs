use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protocurate"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = "warmup_samples = 600\nsuperbatch_size = 320\nepochs = 2\nknn_k = 5\n";

/// Small corpus, prompts and a config that fits it.
fn setup(dir: &Path) {
    fs::write(dir.join("c.conf"), SMALL_CONFIG).unwrap();
    let out = run(dir, &["generate", "--n-samples", "1600", "--seed", "3", "--out", "c.emb", "--prompts-out", "p.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn curate_writes_selection_and_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = run(
        dir.path(),
        &["curate", "--config", "c.conf", "--corpus", "c.emb", "--out", "sel.csv", "--proto-out", "p.bin"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sel = fs::read_to_string(dir.path().join("sel.csv")).unwrap();
    assert!(sel.starts_with("id,iteration,reason,proto,distance\n"));
    assert!(sel.lines().count() > 1);
    assert!(fs::read(dir.path().join("p.bin")).unwrap().starts_with(b"XFICPRO1"));
    assert!(fs::read(dir.path().join("c.emb.manifest.json")).is_ok());
}

#[test]
fn target_size_caps_the_selection() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = run(
        dir.path(),
        &[
            "curate", "--config", "c.conf", "--corpus", "c.emb", "--out", "sel.csv", "--proto-out", "p.bin",
            "--target-size", "50",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.path().join("sel.csv")).unwrap().lines().count(), 51);
}

#[test]
fn missing_corpus_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["curate", "--corpus", "nowhere.emb", "--out", "s.csv", "--proto-out", "p.bin"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere.emb"));
}

#[test]
fn short_corpus_fails_warm_up() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["generate", "--n-samples", "100", "--out", "c.emb"]);
    assert_eq!(code(&out), 0);
    let out = run(dir.path(), &["curate", "--corpus", "c.emb", "--out", "s.csv", "--proto-out", "p.bin"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("insufficient warm-up"), "{}", stderr(&out));
}

#[test]
fn corrupt_corpus_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut bytes = fs::read(dir.path().join("c.emb")).unwrap();
    bytes[0] ^= 0xff;
    fs::write(dir.path().join("bad.emb"), bytes).unwrap();
    let out = run(dir.path(), &["analyze", "--corpus", "bad.emb", "--out", "an"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
}

#[test]
fn transport_non_convergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    fs::write(dir.path().join("tight.conf"), format!("{SMALL_CONFIG}sinkhorn_max_iters = 1\n")).unwrap();
    let out = run(
        dir.path(),
        &["curate", "--config", "tight.conf", "--corpus", "c.emb", "--out", "s.csv", "--proto-out", "p.bin"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["curate", "--corpus", "x"])), 1);
    fs::write(dir.path().join("bad.conf"), "colour = blue\n").unwrap();
    let out = run(dir.path(), &["analyze", "--config", "bad.conf", "--corpus", "x", "--out", "an"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("colour"));
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

fn pipeline(dir: &Path) {
    setup(dir);
    let steps: &[&[&str]] = &[
        &["curate", "--config", "c.conf", "--corpus", "c.emb", "--out", "sel.csv", "--proto-out", "p.bin", "--stats-out", "st.json"],
        &["train", "--config", "c.conf", "--corpus", "c.emb", "--out", "joint.bin", "--loss-out", "joint.csv", "--selection-out", "jsel.csv"],
        &["train", "--config", "c.conf", "--corpus", "c.emb", "--selection", "sel.csv", "--out", "h.bin", "--loss-out", "loss.csv"],
        &["eval", "--config", "c.conf", "--corpus", "c.emb", "--head", "h.bin", "--prompts", "p.json", "--out", "r.json", "--per-class-out", "pc.csv"],
        &["analyze", "--config", "c.conf", "--corpus", "c.emb", "--selection", "sel.csv", "--out", "an"],
    ];
    for args in steps {
        let out = run(dir, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        files.push((rel, fs::read(&entry).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (la, lb) = (listing(a.path()), listing(b.path()));
    assert_eq!(la.len(), 20);
    for ((na, ba), (nb, bb)) in la.iter().zip(&lb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}
