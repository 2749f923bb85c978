use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bos(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bos"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .env_remove("BOS_OUT_DIR")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_set(dir: &Path, id: &str, lines: &[&str]) -> PathBuf {
    std::fs::write(dir.join(format!("{id}.jsonl")), lines.join("\n") + "\n").unwrap();
    let manifest = format!(
        r#"{{"set_id":"{id}","source_name":"src","detector_id":"det","image_count":{},"dump_paths":["{id}.jsonl"]}}"#,
        lines.len()
    );
    let path = dir.join(format!("{id}.manifest.json"));
    std::fs::write(&path, manifest).unwrap();
    path
}

const GOOD: &str = r#"{"image_id":"a","original":[[0,0,10,10,0.9,0],[20,20,40,40,0.8,1]],"perturbed":[[0,0,10,10,0.9,0],[20,20,40,40,0.8,1]],"ground_truth":[[0,0,10,10,0]]}"#;

#[test]
fn validate_reports_the_corrupted_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{"image_id":"b","original":[[0,0,10,10,1.7,0]],"perturbed":[]}"#;
    let m = write_set(dir.path(), "set", &[GOOD, bad]);
    let out = bos(&["validate", s(&m)], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("set.jsonl:2:"), "{stdout}");
    let report = std::fs::read_to_string(dir.path().join("out/validation.json")).unwrap();
    assert!(report.contains("\"line\": 2"), "{report}");
}

#[test]
fn validate_accepts_a_clean_set() {
    let dir = tempfile::tempdir().unwrap();
    write_set(dir.path(), "set", &[GOOD]);
    let out = bos(&["validate", s(dir.path())], &dir.path().join("out"));
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn identical_passes_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_set(dir.path(), "set", &[GOOD]);
    let out = bos(&["score", s(&m), "--kind", "bos"], &dir.path().join("out"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("out/scores.csv")).unwrap();
    assert_eq!(
        csv,
        "set_id,source_name,role,images,bos\nset,src,train,1,1\n"
    );
}

#[test]
fn errors_are_json_records_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bos(
        &["score", s(&dir.path().join("missing.manifest.json"))],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    let out = bos(&["score", "x", "--kind", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");

    // Too few sets to fit a line is a computation failure.
    let m = write_set(dir.path(), "set", &[GOOD]);
    let out_dir = dir.path().join("o");
    assert!(bos(&["score", s(&m)], &out_dir).status.success());
    assert!(bos(&["map", s(&m)], &out_dir).status.success());
    let out = bos(
        &[
            "fit",
            "--scores",
            s(&out_dir.join("scores.csv")),
            "--maps",
            s(&out_dir.join("maps.csv")),
        ],
        &out_dir,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_set(dir.path(), "set", &[GOOD]);
    let target = dir.path().join("env-out");
    let out = Command::new(env!("CARGO_BIN_EXE_bos"))
        .args(["map", s(&m)])
        .env("BOS_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("maps.csv").exists());
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_is_accurate_deterministic_and_leaves_inputs_alone() {
    let root = tempfile::tempdir().unwrap();
    let world = root.path().join("world");
    let run = |out: &Path| {
        let ok = |args: &[&str]| {
            let o = bos(args, out);
            assert!(
                o.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        };
        let scores = out.join("scores.csv");
        let maps = out.join("maps.csv");
        ok(&["validate", s(&world)]);
        ok(&[
            "score",
            s(&world),
            "--kind",
            "bos,ac,ps,fd",
            "--fd-reference",
            s(&world.join("reference_stats.json")),
        ]);
        ok(&["map", s(&world)]);
        ok(&["loo", "--scores", s(&scores), "--maps", s(&maps)]);
        std::fs::rename(out.join("loo.json"), out.join("loo_bos.json")).unwrap();
        ok(&[
            "loo",
            "--scores",
            s(&scores),
            "--maps",
            s(&maps),
            "--features",
            "ac",
        ]);
        ok(&[
            "fit",
            "--scores",
            s(&scores),
            "--maps",
            s(&maps),
            "--features",
            "bos,ps",
        ]);
        ok(&[
            "predict",
            "--model",
            s(&out.join("model.json")),
            "--scores",
            s(&scores),
        ]);
        ok(&["report", "--scores", s(&scores), "--maps", s(&maps)]);
        ok(&["stats", s(&world)]);
        ok(&[
            "tune",
            s(&world),
            "--kind",
            "atc",
            "--candidates",
            "0.4,0.5,0.6",
        ]);
    };

    let o = bos(&["synth", "--seed", "0"], &world);
    assert!(o.status.success());
    let world_before = snapshot(&world);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run(&a);
    run(&b);
    assert_eq!(snapshot(&world), world_before);
    assert_eq!(snapshot(&a), snapshot(&b));

    let again = root.path().join("world2");
    assert!(bos(&["synth", "--seed", "0"], &again).status.success());
    assert_eq!(snapshot(&again), world_before);

    let loo_rmse = |name: &str| {
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(a.join(name)).unwrap()).unwrap();
        v["average_rmse"].as_f64().unwrap()
    };
    let (bos_rmse, ac_rmse) = (loo_rmse("loo_bos.json"), loo_rmse("loo.json"));
    assert!(bos_rmse <= 0.05, "{bos_rmse}");
    assert!(bos_rmse <= ac_rmse, "{bos_rmse} vs {ac_rmse}");
}
