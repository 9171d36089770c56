use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use semidense::io::{load_dataset, parse_loss_curve, MatchDump};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semidense"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and a briefly trained model, built once per test binary.
fn fixture() -> &'static (PathBuf, PathBuf) {
    static F: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let weights = root.join("toy.sdw");
        assert!(run(&["synth", "--count", "40", "--size", "64", "--seed", "1", "--out", s(&data)]).status.success());
        let out = run(&["train-toy", "--data", s(&data), "--out", s(&weights), "--steps", "300"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (data, weights)
    })
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for d in [&x, &y] {
        assert!(run(&["synth", "--count", "3", "--size", "32", "--seed", "9", "--out", s(d)]).status.success());
    }
    for name in ["00000_a.pgm", "00001_b.pgm", "00002_H.csv"] {
        assert_eq!(std::fs::read(x.join(name)).unwrap(), std::fs::read(y.join(name)).unwrap());
    }
    assert_eq!(std::fs::read_dir(&x).unwrap().count(), 9);
}

#[test]
fn synth_pairs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--count", "5", "--size", "64", "--seed", "2", "--out", s(dir.path())]).status.success());
    for p in load_dataset(dir.path()).unwrap() {
        let c = p.h.apply((31.5, 31.5)).unwrap();
        assert!((0.0..64.0).contains(&c.0) && (0.0..64.0).contains(&c.1));
        for corner in semidense::geometry::image_corners(64, 64) {
            let q = p.h.apply(corner).unwrap();
            assert!(q.0.is_finite() && q.1.is_finite());
        }
    }
}

#[test]
fn synth_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    assert!(run(&["synth", "--count", "0", "--out", s(&empty)]).status.success());
    assert_eq!(std::fs::read_dir(&empty).unwrap().count(), 0);
    assert_eq!(run(&["synth", "--count", "1", "--size", "4", "--out", s(&empty)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["match", "--image-a", "a.pgm"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.kv");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = run(&["train-toy", "--data", s(dir.path()), "--config", s(&cfg), "--out", s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn train_writes_weights_and_curve() {
    let (_, weights) = fixture();
    assert!(weights.exists());
    let mut curve = weights.clone().into_os_string();
    curve.push(".loss.csv");
    let recs = parse_loss_curve(&std::fs::read_to_string(&curve).unwrap(), Path::new("curve")).unwrap();
    assert_eq!(recs.len(), 300);
    assert!(recs.iter().all(|r| r.total.is_finite()));
}

#[test]
fn training_divergence_exits_with_three() {
    let (data, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.kv");
    std::fs::write(&cfg, "lr = 1e30\nwarmup = 0\n").unwrap();
    let w = dir.path().join("w.sdw");
    let out = run(&["train-toy", "--data", s(data), "--config", s(&cfg), "--out", s(&w), "--steps", "20"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!w.exists());
}

#[test]
fn match_writes_a_dump_with_header() {
    let (data, weights) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let viz = dir.path().join("m.ppm");
    let (a, b) = (data.join("00000_a.pgm"), data.join("00000_b.pgm"));
    let r = run(&["match", "--image-a", s(&a), "--image-b", s(&b), "--weights", s(weights), "--mode", "optimized", "--out", s(&out), "--viz", s(&viz)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# mode=optimized"));
    let dump = MatchDump::parse(&text, &out).unwrap();
    assert_eq!((dump.dims_a, dump.dims_b), ((64, 64), (64, 64)));
    assert!(std::fs::read(&viz).unwrap().starts_with(b"P6\n128 64\n255\n"));
}

#[test]
fn missing_weights_exit_with_two_and_write_nothing() {
    let (data, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let a = data.join("00000_a.pgm");
    let r = run(&["match", "--image-a", s(&a), "--image-b", s(&a), "--weights", s(&dir.path().join("nope.sdw")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let garbage = dir.path().join("garbage.sdw");
    std::fs::write(&garbage, b"not weights").unwrap();
    let r = run(&["match", "--image-a", s(&a), "--image-b", s(&a), "--weights", s(&garbage), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn self_pair_matches_land_on_themselves() {
    let (data, weights) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let a = data.join("00003_a.pgm");
    assert!(run(&["match", "--image-a", s(&a), "--image-b", s(&a), "--weights", s(weights), "--out", s(&out)]).status.success());
    let dump = MatchDump::parse(&std::fs::read_to_string(&out).unwrap(), &out).unwrap();
    assert!(dump.rows.len() >= 16, "{} matches", dump.rows.len());
    let close = dump.rows.iter().filter(|r| ((r[0] - r[2]).powi(2) + (r[1] - r[3]).powi(2)).sqrt() < 1.0).count();
    assert!(close as f64 >= 0.95 * dump.rows.len() as f64, "{close} of {}", dump.rows.len());
}

#[test]
fn eval_reports_monotone_auc_for_both_modes() {
    let (data, weights) = fixture();
    let dir = tempfile::tempdir().unwrap();
    for mode in ["full", "optimized"] {
        let csv = dir.path().join(format!("{mode}.csv"));
        let r = run(&["eval-homography", "--data", s(data), "--weights", s(weights), "--mode", mode, "--out", s(&csv)]);
        assert!(r.status.success());
        let text = String::from_utf8(r.stdout).unwrap();
        assert!(text.contains(&format!("mode            {mode}")));
        let line = text.lines().find(|l| l.starts_with("auc@3/5/10")).unwrap();
        let v: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        assert_eq!(v.len(), 3);
        assert!(v[0] <= v[1] && v[1] <= v[2]);
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 40 + 3);
    }
}

#[test]
fn bench_prints_every_stage() {
    let (data, weights) = fixture();
    let a = data.join("00000_a.pgm");
    let r = run(&["bench", "--image-a", s(&a), "--image-b", s(&a), "--weights", s(weights), "--repetitions", "3", "--warmup", "0"]);
    assert!(r.status.success());
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("3 repetitions"));
    for name in ["backbone", "transform", "coarse_matching", "fine_fusion", "refinement", "end_to_end"] {
        assert!(text.contains(name), "{text}");
    }
    assert_eq!(run(&["bench", "--image-a", s(&a), "--image-b", s(&a), "--weights", s(weights), "--repetitions", "0"]).status.code(), Some(1));
}

/// On self pairs the trained model finds the same matches in both modes, so
/// the per-pair rows of the two reports agree.
#[test]
fn full_and_optimized_reports_agree_on_easy_pairs() {
    let (data, weights) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let easy = dir.path().join("easy");
    std::fs::create_dir(&easy).unwrap();
    for i in 0..5 {
        let a = data.join(format!("{i:05}_a.pgm"));
        std::fs::copy(&a, easy.join(format!("{i:05}_a.pgm"))).unwrap();
        std::fs::copy(&a, easy.join(format!("{i:05}_b.pgm"))).unwrap();
        std::fs::write(easy.join(format!("{i:05}_H.csv")), "1,0,0\n0,1,0\n0,0,1\n").unwrap();
    }
    let rows = |mode: &str| {
        let csv = dir.path().join(format!("{mode}.csv"));
        assert!(run(&["eval-homography", "--data", s(&easy), "--weights", s(weights), "--mode", mode, "--out", s(&csv)]).status.success());
        std::fs::read_to_string(&csv).unwrap()
    };
    assert_eq!(rows("full"), rows("optimized"));
}
