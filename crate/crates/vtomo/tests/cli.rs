use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::{tempdir, TempDir};

fn vtomo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtomo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// 24³ phantom plus its 12-view IP and top-2 stacks.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempdir().unwrap();
        let f = Self { dir };
        let r = vtomo(&[
            "phantom",
            "--dims",
            "24",
            "24",
            "24",
            "--seed",
            "3",
            "--mask",
            s(&f.p("mask.vol")),
            "--ct",
            s(&f.p("ct.vol")),
        ]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        for (cmd, input, out, extra) in
            [("project-ip", "mask.vol", "gt.stk", &[][..]), ("project-topk", "ct.vol", "cond.stk", &["--k", "2"][..])]
        {
            let (input, out) = (f.p(input), f.p(out));
            let mut args = vec![cmd, "--input", s(&input), "--out", s(&out), "--views", "12"];
            args.extend(extra);
            let r = vtomo(&args);
            assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        }
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&vtomo(&["--help"])), 0);
    assert_eq!(code(&vtomo(&["--version"])), 0);
    assert_eq!(code(&vtomo(&["segment", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vtomo(&[])), 1);
    assert_eq!(code(&vtomo(&["frobnicate"])), 1);
    assert_eq!(code(&vtomo(&["segment", "--input", "a.vol"])), 1);
    let f = Fixture::new();
    let r = vtomo(&["estimate", "--cond", s(&f.p("cond.stk")), "--spec", "magic", "--out", s(&f.p("e.stk"))]);
    assert_eq!(code(&r), 1);
    let r = vtomo(&["segment", "--input", s(&f.p("ct.vol")), "--out", s(&f.p("s.vol")), "--percentile", "101"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn io_errors_exit_two() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nope.vol");
    let r = vtomo(&["project-ip", "--input", s(&missing), "--out", s(&dir.path().join("o.stk"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.vol"));

    let f = Fixture::new();
    let small = dir.path().join("small.vol");
    let r = vtomo(&["phantom", "--dims", "8", "8", "8", "--mask", s(&small), "--ct", s(&dir.path().join("c.vol"))]);
    assert_eq!(code(&r), 0);
    let r = vtomo(&["metrics", "--pred", s(&small), "--gt", s(&f.p("mask.vol"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn divergent_step_exits_three_and_keeps_trace() {
    let f = Fixture::new();
    let r = vtomo(&["fbp", "--input", s(&f.p("gt.stk")), "--out", s(&f.p("fbp.vol")), "--dims", "24", "24", "24"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let trace = f.p("trace.csv");
    let r = vtomo(&[
        "optimize",
        "--target",
        s(&f.p("gt.stk")),
        "--init",
        s(&f.p("fbp.vol")),
        "--out",
        s(&f.p("opt.vol")),
        "--step",
        "1000",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    let rows = fs::read_to_string(&trace).unwrap().lines().count();
    assert!(rows >= 3, "{rows}");
}

#[test]
fn optimize_segment_metrics_chain() {
    let f = Fixture::new();
    let run = |args: &[&str]| {
        let r = vtomo(args);
        assert_eq!(code(&r), 0, "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        r
    };
    run(&["fbp", "--input", s(&f.p("gt.stk")), "--out", s(&f.p("fbp.vol")), "--dims", "24", "24", "24"]);
    run(&[
        "optimize",
        "--target",
        s(&f.p("gt.stk")),
        "--init",
        s(&f.p("fbp.vol")),
        "--out",
        s(&f.p("opt.vol")),
        "--trace",
        s(&f.p("trace.csv")),
    ]);
    assert_eq!(fs::read_to_string(f.p("trace.csv")).unwrap().lines().count(), 12);
    run(&["segment", "--input", s(&f.p("opt.vol")), "--out", s(&f.p("seg.vol")), "--components", s(&f.p("cc.csv"))]);
    run(&["metrics", "--pred", s(&f.p("seg.vol")), "--gt", s(&f.p("mask.vol")), "--out", s(&f.p("m.json"))]);
    let m = json(&f.p("m.json"));
    assert!(m["dsc"].as_f64().unwrap() > 0.3, "{m}");

    let r = run(&["metrics", "--pred", s(&f.p("mask.vol")), "--gt", s(&f.p("mask.vol"))]);
    let m: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(m["dsc"], 1.0);
    assert_eq!(m["cldice"], 1.0);
    assert!(String::from_utf8_lossy(&r.stderr).contains("DSC 100.00%"));

    let r = run(&[
        "metrics",
        "--pred",
        s(&f.p("mask.vol")),
        "--gt",
        s(&f.p("mask.vol")),
        "--pred-stack",
        s(&f.p("gt.stk")),
        "--gt-stack",
        s(&f.p("gt.stk")),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(m["psnr"], "inf");
}

#[test]
fn topk_is_reproducible() {
    let f = Fixture::new();
    let out = f.p("again.stk");
    let r = vtomo(&[
        "--workers",
        "3",
        "project-topk",
        "--input",
        s(&f.p("ct.vol")),
        "--out",
        s(&out),
        "--views",
        "12",
        "--k",
        "2",
    ]);
    assert_eq!(code(&r), 0);
    assert_eq!(fs::read(&out).unwrap(), fs::read(f.p("cond.stk")).unwrap());
    assert_eq!(fs::read(header_of(&out)).unwrap(), fs::read(header_of(&f.p("cond.stk"))).unwrap());
}

fn header_of(p: &Path) -> PathBuf {
    vtomo::io::header_path(p)
}

#[test]
fn oracle_estimators() {
    let f = Fixture::new();
    let gt = f.p("gt.stk");
    let est = |spec: String, out: &str| {
        let r = vtomo(&["estimate", "--cond", s(&f.p("cond.stk")), "--spec", &spec, "--out", s(&f.p(out))]);
        assert_eq!(code(&r), 0, "{spec}: {}", String::from_utf8_lossy(&r.stderr));
        fs::read(f.p(out)).unwrap()
    };
    let oracle = est(format!("oracle:gt={}", s(&gt)), "o.stk");
    assert_eq!(oracle, fs::read(&gt).unwrap());
    assert_eq!(est(format!("noisy-oracle:gt={},sigma=0", s(&gt)), "n0.stk"), oracle);
    assert_ne!(est(format!("noisy-oracle:gt={},sigma_rel=0.1,seed=4", s(&gt)), "n1.stk"), oracle);

    let r = vtomo(&["estimate", "--cond", s(&f.p("cond.stk")), "--spec", "oracle", "--out", s(&f.p("x.stk"))]);
    assert_eq!(code(&r), 1);
}

#[test]
fn export_writes_images() {
    let f = Fixture::new();
    let png = f.p("v.png");
    assert_eq!(code(&vtomo(&["export", "--input", s(&f.p("gt.stk")), "--view", "3", "--out", s(&png)])), 0);
    assert!(fs::read(&png).unwrap().starts_with(b"\x89PNG"));
    let pgm = f.p("c.pgm");
    let r = vtomo(&["export", "--input", s(&f.p("cond.stk")), "--view", "1", "--channel", "1", "--out", s(&pgm)]);
    assert_eq!(code(&r), 0);
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n24 24\n255\n"));
    let r = vtomo(&["export", "--input", s(&f.p("gt.stk")), "--view", "12", "--out", s(&pgm)]);
    assert_ne!(code(&r), 0);
}

fn pipeline(dir: &Path, name: &str, config: serde_json::Value, extra: &[&str]) -> serde_json::Value {
    let cfg = dir.join(format!("{name}.json"));
    fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.join(name);
    let mut args = vec!["pipeline", "--config", s(&cfg), "--out-dir", s(&out)];
    args.extend(extra);
    let r = vtomo(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    json(&out.join("manifest.json"))
}

#[test]
fn pipeline_manifest_and_config_hash() {
    let dir = tempdir().unwrap();
    let base = serde_json::json!({"seed": 5, "working_dims": [20, 20, 20], "export_views": [0]});
    let m = pipeline(dir.path(), "a", base.clone(), &[]);
    assert!(m["metrics"]["dsc"].as_f64().unwrap() > 0.0);
    assert_eq!(m["tool"], "vtomo");
    let hash = m["config_hash"].as_str().unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    for f in ["manifest.json", "metrics.json", "trace.csv", "segmentation.vol", "topk.stk", "views"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    let mut explicit = base.clone();
    explicit["k"] = 32.into();
    explicit["estimator"] = "oracle".into();
    explicit["output_dir"] = "elsewhere".into();
    assert_eq!(pipeline(dir.path(), "b", explicit, &["--workers", "2"])["config_hash"], hash.as_str());

    let mut other = base;
    other["k"] = 8.into();
    assert_ne!(pipeline(dir.path(), "c", other, &[])["config_hash"], hash.as_str());

    let seg_a = fs::read(dir.path().join("a/segmentation.vol")).unwrap();
    assert_eq!(seg_a, fs::read(dir.path().join("b/segmentation.vol")).unwrap());
}

#[test]
fn pipeline_rejects_unknown_keys() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let r = vtomo(&["pipeline", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert!(matches!(code(&r), 1 | 2), "{}", code(&r));
    assert!(String::from_utf8_lossy(&r.stderr).contains("colour"));
}
