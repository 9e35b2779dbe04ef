use std::path::Path;
use std::process::{Command, Output};

use crd_core::crd_format::{CrdFile, DType, Payload};
use crd_core::lab::tasks::lookup_benchmark;

fn crd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crd"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: &[&str] = &[
    "--set",
    "model.n_layers=2",
    "--set",
    "model.d_model=32",
    "--set",
    "model.max_context=48",
    "--set",
    "model.n_kv_heads=2",
    "--set",
    "train.steps=3",
    "--set",
    "data.size=50",
    "--set",
    "generation.max_new=4",
    "--set",
    "curate.calibration_size=2",
];

fn train(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["train", "--name", name, "--seed", seed];
    args.extend_from_slice(TINY);
    let o = crd(dir, &args);
    assert!(o.status.success(), "{}", text(&o));
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "anchor.ckpt", "1");
    let bench = dir.path().join("bench.jsonl");
    std::fs::write(&bench, lookup_benchmark(12, 3).to_jsonl()).unwrap();
    let mut args = vec!["curate", "--benchmark", bench.to_str().unwrap(), "--model"];
    let anchor = dir.path().join("anchor.ckpt").to_str().unwrap().to_string();
    args.push(&anchor);
    args.extend_from_slice(TINY);
    let o = crd(dir.path(), &args);
    assert!(o.status.success(), "{}", text(&o));
    (dir, bench.to_str().unwrap().to_string(), anchor)
}

#[test]
fn storage_reports_the_llama_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = crd(dir.path(), &["storage", "--dtype", "f16", "--retain", "1.0,0.007"]);
    assert!(o.status.success());
    let out = text(&o);
    assert!(out.contains("llama-2-7b"));
    assert!(out.contains("52.4") && out.contains("GB"), "{out}");
    assert!(out.contains("367.") && out.contains("MB"), "{out}");
}

#[test]
fn curate_verify_evaluate_translate() {
    let (dir, bench, anchor) = setup();
    let d = dir.path();
    let crd_path = d.join("benchmark.crd");
    assert!(d.join("benchmark.datacard").exists());

    let o = crd(d, &["verify", "--benchmark", &bench, "--crd", crd_path.to_str().unwrap(), "--model", &anchor]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("agreement            1.0000"), "{}", text(&o));
    assert!(d.join("verification.jsonl").exists());

    train(d, "other.ckpt", "2");
    let other = d.join("other.ckpt").to_str().unwrap().to_string();
    let o = crd(d, &["evaluate", "--crd", crd_path.to_str().unwrap(), "--model", &other]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("incompatible model"));

    let o = crd(
        d,
        &[
            "translate",
            "--crd",
            crd_path.to_str().unwrap(),
            "--anchor",
            &anchor,
            "--target",
            &other,
            "--set",
            "translate.rank=32",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let translated = d.join("benchmark.subspace.crd");
    let o = crd(d, &["evaluate", "--crd", translated.to_str().unwrap(), "--model", &other]);
    assert!(o.status.success(), "{}", text(&o));
    let pre = std::fs::read_to_string(d.join("evaluation.jsonl")).unwrap();
    let map = d.join("benchmark.subspace.map");
    let o = crd(
        d,
        &["evaluate", "--crd", crd_path.to_str().unwrap(), "--model", &other, "--map", map.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", text(&o));
    let on_the_fly = std::fs::read_to_string(d.join("evaluation.jsonl")).unwrap();
    let items = |s: &str| {
        s.lines()
            .filter(|l| l.contains("\"generated\""))
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["tokens"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(items(&pre), items(&on_the_fly));
    assert_eq!(items(&pre).len(), 10);

    let o = crd(d, &["translate", "--crd", crd_path.to_str().unwrap(), "--anchor", &anchor, "--target", &other, "--paradigm", "relative", "--set", "translate.anchors=16"]);
    assert!(o.status.success(), "{}", text(&o));

    let o = crd(d, &["attack", "--crd", crd_path.to_str().unwrap(), "--model", &anchor]);
    assert!(o.status.success(), "{}", text(&o));
    let report = std::fs::read_to_string(d.join("attack.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 11);
}

#[test]
fn tampered_release_fails_the_gate() {
    let (dir, bench, anchor) = setup();
    let path = dir.path().join("benchmark.crd");
    let mut file = CrdFile::read(&path).unwrap();
    for r in &mut file.records {
        let h: Vec<f32> = r.h.to_f32().iter().map(|v| -v).collect();
        r.h = Payload::encode(&h, DType::F32);
    }
    file.write(&path).unwrap();
    let o = crd(dir.path(), &["verify", "--benchmark", &bench, "--crd", path.to_str().unwrap(), "--model", &anchor]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, bench, anchor) = setup();
    let first = std::fs::read(dir.path().join("benchmark.crd")).unwrap();
    let again = tempfile::tempdir().unwrap();
    let mut args = vec!["curate", "--benchmark", bench.as_str(), "--model", anchor.as_str()];
    args.extend_from_slice(TINY);
    assert!(crd(again.path(), &args).status.success());
    assert_eq!(first, std::fs::read(again.path().join("benchmark.crd")).unwrap());

    train(again.path(), "anchor.ckpt", "1");
    assert_eq!(
        std::fs::read(dir.path().join("anchor.ckpt")).unwrap(),
        std::fs::read(again.path().join("anchor.ckpt")).unwrap()
    );
}

#[test]
fn bad_configuration_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = crd(dir.path(), &["storage", "--set", "model.d_modle=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("d_modle"), "{}", text(&o));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nstepz = 4\n").unwrap();
    let o = crd(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = crd(dir.path(), &["evaluate", "--crd", "missing.crd", "--model", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let o = crd(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lab_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.toml");
    std::fs::write(
        &cfg,
        "[lab]\nbenchmark_size = 6\ncorpus_size = 20\nheld_out_size = 4\n[lab.train]\nsteps = 2\n",
    )
    .unwrap();
    let o = crd(dir.path(), &["lab", "--config", cfg.to_str().unwrap(), "--seed", "4", "--jobs", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("lab.json")).unwrap()).unwrap();
    assert_eq!(report["arms"].as_array().unwrap().len(), 3);
    assert!(text(&o).contains("crd_payload"));
}
