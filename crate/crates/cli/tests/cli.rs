use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dscnn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dscnn"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dscnn(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn toy_pipeline(out: &Path) {
    ok(out, &["generate", "--arch", "toy", "--resolution", "16"]);
    ok(out, &["fuse"]);
    ok(out, &["calibrate"]);
    ok(out, &["quantize"]);
    ok(out, &["compile"]);
}

fn manifests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn toy_pipeline_runs_end_to_end_and_matches_the_oracle() {
    let t = tempfile::tempdir().unwrap();
    toy_pipeline(t.path());
    let stdout = ok(t.path(), &["simulate", "--count", "4", "--trace", "--perf", "--oracle-check"]);
    assert!(stdout.contains("4 of 4 inputs bit-exact"), "{stdout}");
    for f in ["model/model.json", "fused/model.json", "calibration.json", "qnet/qnet.json", "plan.json", "plan.txt", "inference.json", "trace.csv", "perf.txt"] {
        assert!(t.path().join(f).exists(), "{f} missing");
    }
    let inf: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("inference.json")).unwrap()).unwrap();
    assert_eq!(inf["results"].as_array().unwrap().len(), 4);
    assert_eq!(inf["oracle_check"], serde_json::Value::Bool(true));
    let csv = fs::read_to_string(t.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("invocation,kind,direction,role,op,bytes"));
}

#[test]
fn compiling_mobilenet_maps_sixteen_body_invocations() {
    let t = tempfile::tempdir().unwrap();
    let m = manifests().join("mobilenet_v2_0.5.json");
    ok(t.path(), &["compile", "--model", m.to_str().unwrap()]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("plan.json")).unwrap()).unwrap();
    let invs = doc["plan"]["invocations"].as_array().unwrap();
    assert_eq!(invs.len(), 19);
    let body = invs.iter().filter(|i| i["cu"] == "body").count();
    assert_eq!(body, 16);
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(dscnn(t.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dscnn(t.path(), &["simulate", "--count", "x"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_one_and_leave_nothing_behind() {
    let t = tempfile::tempdir().unwrap();
    let o = dscnn(t.path(), &["fuse"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 0);
}

#[test]
fn failed_simulate_keeps_previous_artifacts_intact() {
    let t = tempfile::tempdir().unwrap();
    toy_pipeline(t.path());
    let before = listing(t.path());
    // a plan for another network must be rejected before anything is written
    let m = manifests().join("mobilenet_v2_0.35.json");
    let other = tempfile::tempdir().unwrap();
    ok(other.path(), &["compile", "--model", m.to_str().unwrap()]);
    let plan = other.path().join("plan.json");
    let o = dscnn(t.path(), &["simulate", "--plan", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(listing(t.path()), before);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        toy_pipeline(d);
        ok(d, &["simulate", "--count", "2", "--trace", "--perf"]);
        ok(d, &["report", "--arch", "toy"]);
    }
    let (la, lb) = (listing(a.path()), listing(b.path()));
    assert_eq!(la.len(), lb.len());
    for ((pa, ca), (pb, cb)) in la.iter().zip(&lb) {
        assert_eq!(pa, pb);
        assert!(ca == cb, "{} differs between runs", pa.display());
    }
    // and rerunning in place changes nothing
    toy_pipeline(a.path());
    ok(a.path(), &["simulate", "--count", "2", "--trace", "--perf"]);
    ok(a.path(), &["report", "--arch", "toy"]);
    assert_eq!(listing(a.path()), la);
}

#[test]
fn seeds_change_generated_weights() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["generate", "--arch", "toy", "--resolution", "16"]);
    ok(b.path(), &["--seed", "7", "generate", "--arch", "toy", "--resolution", "16"]);
    assert!(listing(&a.path().join("model")) != listing(&b.path().join("model")));
}

#[test]
fn report_numbers_match_the_library() {
    use dscnn_core::compiler::plan::CompileOptions;
    use dscnn_core::ir::manifest::load_model;
    use dscnn_core::runtime::perf::PerfParams;
    use dscnn_core::sweep::{sweep_row, SweepRow, RESOLUTIONS};

    let t = tempfile::tempdir().unwrap();
    let models = manifests();
    ok(t.path(), &["report", "--models", models.to_str().unwrap()]);
    let rows: Vec<SweepRow> = serde_json::from_str(&fs::read_to_string(t.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 20);
    let g = load_model(&models.join("mobilenet_v2_0.75.json")).unwrap();
    for &h in &RESOLUTIONS {
        let want = sweep_row(&g, h, 4, &CompileOptions::default(), PerfParams::default()).unwrap();
        let got = rows.iter().find(|r| r.alpha == 0.75 && r.resolution == h).unwrap();
        assert_eq!(got, &want);
    }
}

#[test]
fn config_file_drives_the_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.toml");
    fs::write(&cfg, "arch = \"toy\"\nresolution = 16\nbw = 6\ndriver = \"threaded\"\nmap_classifier = false\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = t.path().join("out");
    let o = out.as_path();
    for step in ["generate", "fuse", "calibrate", "quantize", "compile"] {
        ok(o, &["--config", c, step]);
    }
    let stdout = ok(o, &["--config", c, "simulate", "--count", "2", "--oracle-check"]);
    assert!(stdout.contains("2 of 2 inputs bit-exact"), "{stdout}");
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "bw = 12\n").unwrap();
    assert_eq!(dscnn(o, &["--config", bad.to_str().unwrap(), "compile"]).status.code(), Some(1));
}
