use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfs_core::formats::FeatureMatrix;
use hfs_core::synthdata::{FEATURES_FILE, MANIFEST_FILE};
use serde_json::Value;
use tempfile::TempDir;

const SPEC: &str = r#"{"n":16,"d":8,"c":4,"k_star":2,"n_dup":2,"duplicate_window":3}"#;
const CONFIG: &str = r#"{"n_frames":16,"k_sel":4,"dim":8,"scorer_hidden":8,"teacher_hidden":8,
"teacher_mlp_hidden":6,"encoder_mlp_hidden":8,"vocab_size":10,"prompt_len":5,"batch_size":4,
"epochs":2,"lr":0.001,"metrics_every":3}"#;

fn hfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfs")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
        std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, out: &str, count: usize, seed: u64) -> Output {
        hfs(&[
            "gen-data",
            "--spec",
            s(&self.path("spec.json")),
            "--out",
            s(&self.path(out)),
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
        ])
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.path("cfg.json"), self.path(data), self.path(out));
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        hfs(&args)
    }
}

#[test]
fn gen_data_is_deterministic_and_guards_output() {
    let f = Fixture::new();
    let summary = stdout_json(&f.gen("a", 12, 5));
    assert_eq!(summary["episodes"], 12);
    stdout_json(&f.gen("b", 12, 5));
    for name in [MANIFEST_FILE, FEATURES_FILE] {
        let a = std::fs::read(f.path("a").join(name)).unwrap();
        let b = std::fs::read(f.path("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let c = stdout_json(&f.gen("c", 12, 6));
    assert_eq!(c["episodes"], 12);
    assert_ne!(
        std::fs::read(f.path("a").join(FEATURES_FILE)).unwrap(),
        std::fs::read(f.path("c").join(FEATURES_FILE)).unwrap()
    );

    let again = f.gen("a", 3, 5);
    assert_eq!(again.status.code(), Some(2));
    let forced = hfs(&[
        "gen-data",
        "--spec",
        s(&f.path("spec.json")),
        "--out",
        s(&f.path("a")),
        "--count",
        "3",
        "--force",
    ]);
    assert_eq!(stdout_json(&forced)["episodes"], 3);

    let tail = hfs(&[
        "gen-data",
        "--spec",
        s(&f.path("spec.json")),
        "--out",
        s(&f.path("tail")),
        "--count",
        "4",
        "--first",
        "8",
        "--seed",
        "5",
    ]);
    stdout_json(&tail);
    let full = hfs_core::synthdata::read_dataset(&f.path("b")).unwrap().episodes;
    let part = hfs_core::synthdata::read_dataset(&f.path("tail")).unwrap().episodes;
    assert_eq!(part, full[8..]);
}

#[test]
fn gen_data_empty_and_default_sizes() {
    let f = Fixture::new();
    let empty = stdout_json(&f.gen("empty", 0, 0));
    assert_eq!(empty["episodes"], 0);
    let manifest = std::fs::read_to_string(f.path("empty").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert_eq!(std::fs::metadata(f.path("empty").join(FEATURES_FILE)).unwrap().len(), 0);

    let out = f.path("default");
    let summary = stdout_json(&hfs(&["gen-data", "--out", s(&out), "--count", "2000", "--seed", "1"]));
    let (n, d) = (128u64, 64u64);
    let per_episode = 16 + 4 * n * d + 4 * n;
    let size = std::fs::metadata(out.join(FEATURES_FILE)).unwrap().len();
    assert_eq!(size, 2000 * per_episode);
    assert_eq!(summary["feature_bytes"], 2000 * per_episode);
    let payload = 2000 * n * d * 4;
    assert!((size as f64 / payload as f64 - 1.0).abs() < 0.02);
}

#[test]
fn train_is_deterministic_and_resumes_exactly() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 20, 2));
    stdout_json(&f.train("data", "one.hfsc", &[]));
    stdout_json(&f.train("data", "two.hfsc", &[]));
    let one = std::fs::read(f.path("one.hfsc.metrics.jsonl")).unwrap();
    assert_eq!(one, std::fs::read(f.path("two.hfsc.metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(f.path("one.hfsc")).unwrap(), std::fs::read(f.path("two.hfsc")).unwrap());
    let steps: Vec<u64> = String::from_utf8(one.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 3, 6, 9]);

    let half = stdout_json(&f.train("data", "part.hfsc", &["--until", "4"]));
    assert_eq!(half["step"], 4);
    let resumed = hfs(&[
        "train",
        "--data",
        s(&f.path("data")),
        "--resume",
        s(&f.path("part.hfsc")),
        "--out",
        s(&f.path("part.hfsc")),
    ]);
    assert_eq!(stdout_json(&resumed)["step"], 10);
    assert_eq!(std::fs::read(f.path("part.hfsc.metrics.jsonl")).unwrap(), one);
    assert_eq!(std::fs::read(f.path("part.hfsc")).unwrap(), std::fs::read(f.path("one.hfsc")).unwrap());
}

#[test]
fn train_rejects_bad_inputs() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 8, 2));
    let missing = hfs(&["train", "--data", s(&f.path("nowhere")), "--out", s(&f.path("x.hfsc"))]);
    assert_eq!(missing.status.code(), Some(4));
    let mismatch = hfs(&["train", "--data", s(&f.path("data")), "--out", s(&f.path("x.hfsc"))]);
    assert_eq!(mismatch.status.code(), Some(2));
    std::fs::write(f.path("bad.json"), r#"{"lr": 0.001, "bogus": 1}"#).unwrap();
    let unknown = hfs(&[
        "train",
        "--config",
        s(&f.path("bad.json")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("x.hfsc")),
    ]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn train_aborts_on_divergence() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 8, 2));
    let cfg: Value = serde_json::from_str(CONFIG).unwrap();
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("lr".into(), Value::from(1e300));
    std::fs::write(f.path("cfg.json"), Value::Object(cfg).to_string()).unwrap();
    let out = f.train("data", "nan.hfsc", &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non_finite"), "{err}");
    assert!(!f.path("nan.hfsc").exists());
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 8, 2));
    stdout_json(&f.train("data", "abl.hfsc", &["--ablate", "kl", "--ablate", "sep", "--until", "1"]));
    let ck = hfs_core::checkpoint::Checkpoint::load(&f.path("abl.hfsc")).unwrap();
    assert!(ck.config.disable_kl && ck.config.disable_sep);
    assert!(!ck.config.disable_cot_query && !ck.config.disable_set_objective);
    let metrics = std::fs::read_to_string(f.path("abl.hfsc.metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["loss"]["kl"], 0.0);
    assert_eq!(first["loss"]["sep"], 0.0);
}

#[test]
fn eval_writes_a_deterministic_report() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 12, 2));
    stdout_json(&f.train("data", "m.hfsc", &["--until", "2"]));
    let args = |r: &str| {
        vec![
            "eval".to_string(),
            "--ckpt".into(),
            s(&f.path("m.hfsc")).into(),
            "--data".into(),
            s(&f.path("data")).into(),
            "--report".into(),
            s(&f.path(r)).into(),
        ]
    };
    let run = |r: &str| {
        let a = args(r);
        hfs(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let printed = stdout_json(&run("r1.json"));
    stdout_json(&run("r2.json"));
    let r1 = std::fs::read(f.path("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read(f.path("r2.json")).unwrap());
    let report: Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report, printed);
    for key in [
        "oracle_accuracy",
        "evidence_recall",
        "mean_pairwise_kernel_similarity",
        "mean_f",
        "mean_rel",
        "mean_cov",
        "mean_red",
        "duplicate_fraction",
    ] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(report["episodes"], 12);
}

fn write_features(path: &Path, n: usize, d: usize, phase: f64) {
    let features = (0..n * d).map(|i| ((i as f64 * 0.37 + phase).sin() as f32) as f64).collect();
    let timestamps = (0..n).map(|i| i as f64).collect();
    FeatureMatrix::new(n, d, features, timestamps).unwrap().write_file(path).unwrap();
}

#[test]
fn select_prints_top_k_of_its_scores() {
    let f = Fixture::new();
    stdout_json(&f.gen("data", 8, 2));
    stdout_json(&f.train("data", "m.hfsc", &["--until", "2"]));
    write_features(&f.path("frames.hfsf"), 30, 8, 0.0);
    write_features(&f.path("query.hfsf"), 1, 8, 1.5);
    let run = |k: &str, frames: &Path| {
        hfs(&[
            "select",
            "--ckpt",
            s(&f.path("m.hfsc")),
            "--features",
            s(frames),
            "--query",
            s(&f.path("query.hfsf")),
            "--k",
            k,
        ])
    };
    let out = stdout_json(&run("5", &f.path("frames.hfsf")));
    let scores: Vec<f64> = serde_json::from_value(out["scores"].clone()).unwrap();
    let selected: Vec<usize> = serde_json::from_value(out["selected"].clone()).unwrap();
    assert_eq!(scores.len(), 30);
    assert!(selected.windows(2).all(|w| w[0] < w[1]));
    let mut order: Vec<usize> = (0..30).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order[..5].to_vec();
    top.sort();
    assert_eq!(selected, top);
    assert_eq!(stdout_json(&run("5", &f.path("frames.hfsf"))), out);

    assert_eq!(run("31", &f.path("frames.hfsf")).status.code(), Some(2));
    assert_eq!(run("0", &f.path("frames.hfsf")).status.code(), Some(2));

    let good = std::fs::read(f.path("frames.hfsf")).unwrap();
    let cases: [(&str, Vec<u8>); 3] = [
        ("bad_magic", [b"HFSX".as_slice(), &good[4..]].concat()),
        ("bad_version", [&good[..4], &2u32.to_le_bytes(), &good[8..]].concat()),
        ("truncated", good[..good.len() - 3].to_vec()),
    ];
    for (code, bytes) in cases {
        let p = f.path(&format!("{code}.hfsf"));
        std::fs::write(&p, bytes).unwrap();
        let out = run("5", &p);
        assert_eq!(out.status.code(), Some(2), "{code}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("[{code}]")), "{code}: {err}");
    }
}

#[test]
fn gradcheck_passes() {
    let out = stdout_json(&hfs(&["gradcheck", "--seed", "3"]));
    assert_eq!(out["passed"], true);
    let terms = out["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 8);
    for t in terms {
        assert!(t["max_rel_error"].as_f64().unwrap() < 1e-4, "{t}");
    }
}

#[test]
fn oracle_check_cases() {
    let rel_only = stdout_json(&hfs(&[
        "oracle-check",
        "--n",
        "10",
        "--k",
        "3",
        "--trials",
        "20",
        "--lambda-cov",
        "0",
        "--lambda-red",
        "0",
    ]));
    assert_eq!(rel_only["exact"], 20);
    let vacuous = stdout_json(&hfs(&["oracle-check", "--trials", "0"]));
    assert_eq!(vacuous["trials"], 0);
    assert_eq!(vacuous["fraction_within_5pct"], 1.0);
    assert_eq!(hfs(&["oracle-check", "--n", "13", "--trials", "1"]).status.code(), Some(2));
    assert_eq!(hfs(&["oracle-check", "--n", "4", "--k", "5", "--trials", "1"]).status.code(), Some(2));
}
