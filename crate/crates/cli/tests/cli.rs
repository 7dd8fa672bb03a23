use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const GAMMA_E: f64 = 2.802495;

struct Run {
    code: i32,
    stderr: String,
}

fn spinforge(out: &Path, args: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_spinforge"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn spinforge");
    Run {
        code: o.status.code().expect("exit code"),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

/// Loads `<out>/<name>.json` and checks it against the shipped schema.
fn report(out: &Path, name: &str) -> Value {
    let text = std::fs::read_to_string(out.join(format!("{name}.json"))).expect("report written");
    let doc: Value = serde_json::from_str(&text).unwrap();
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(schema_dir().join(format!("{name}.schema.json"))).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}.json violates its schema: {errors:#?}");
    doc
}

fn num(v: &Value, ptr: &str) -> f64 {
    v.pointer(ptr).and_then(Value::as_f64).unwrap_or_else(|| panic!("no number at {ptr}"))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn schemas_are_valid_draft_2020_12() {
    let mut n = 0;
    for entry in std::fs::read_dir(schema_dir()).unwrap() {
        let p = entry.unwrap().path();
        let schema: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        jsonschema::meta::validate(&schema).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert_eq!(n, 6);
}

#[test]
fn field_solve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["synth", "--kind", "eseem", "--b0", "250", "--tilt", "12"]).code, 0);
    let truth = report(&fx, "synth");
    let resonance = num(&truth, "/result/truth/resonance_mhz").to_string();

    let out = dir.path().join("solve");
    let spectrum = fx.join("eseem.csv");
    let r = spinforge(&out, &["field-solve", "--spectrum", path_str(&spectrum), "--resonance", &resonance]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = report(&out, "field_solve");
    assert_eq!(rep["status"], "ok");
    assert!((num(&rep, "/result/solution/field/b0") - 250.0).abs() < 0.5);
    assert!((num(&rep, "/result/solution/field/theta") - num(&truth, "/result/truth/field/theta")).abs() < 0.5);
    assert!(out.join("field_overlay.svg").is_file());
}

#[test]
fn field_solve_missing_file_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = spinforge(dir.path(), &["field-solve", "--spectrum", "nope.csv", "--resonance", "2800"]);
    assert_eq!(r.code, 1);
    let rep = report(dir.path(), "field_solve");
    assert_eq!(rep["status"], "input-error");
    assert!(rep["result"].is_null());
}

#[test]
fn field_solve_flat_spectrum_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    let mut text = String::from("frequency_mhz,amplitude\n");
    for k in 0..512 {
        text.push_str(&format!("{},1.0\n", k as f64 * 0.02));
    }
    std::fs::write(&csv, text).unwrap();
    let r = spinforge(dir.path(), &["field-solve", "--spectrum", path_str(&csv), "--resonance", "2800"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert_eq!(report(dir.path(), "field_solve")["status"], "degenerate");
}

#[test]
fn hyperfine_fit_recovers_x1_values() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["--seed", "11", "synth", "--kind", "hyperfine", "--noise", "0.2"]).code, 0);
    assert_eq!(report(&fx, "synth")["seed"], 11);

    let out = dir.path().join("fit");
    let data = fx.join("hyperfine.csv");
    let r = spinforge(&out, &["hyperfine-fit", "--data", path_str(&data)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = report(&out, "hyperfine_fit");
    assert!((num(&rep, "/result/fit/params/a_perp") - 17.2).abs() < 0.6, "{rep}");
    assert!((num(&rep, "/result/fit/params/a_par") - 29.4).abs() < 0.9, "{rep}");
    assert!((num(&rep, "/result/fit/params/beta") - 87.0).abs() < 6.0, "{rep}");
    assert!(out.join("hyperfine_fit.svg").is_file());
}

#[test]
fn hyperfine_full_model_reports_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["synth", "--kind", "hyperfine", "--third-plane"]).code, 0);
    let out = dir.path().join("fit");
    let data = fx.join("hyperfine.csv");
    let r = spinforge(&out, &["hyperfine-fit", "--data", path_str(&data), "--model", "full"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = report(&out, "hyperfine_fit");
    assert_eq!(rep["result"]["fit"]["model"], "full");
    assert_eq!(rep["result"]["alternative"]["model"], "axial");
    assert_eq!(rep["result"]["comparison"]["ranking"].as_array().unwrap().len(), 2);
    // axial data: the axial model wins or ties
    assert_eq!(rep["result"]["comparison"]["preferred"], "axial");
}

#[test]
fn hyperfine_empty_csv_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    std::fs::write(&csv, "").unwrap();
    assert_eq!(spinforge(dir.path(), &["hyperfine-fit", "--data", path_str(&csv)]).code, 1);
    assert_eq!(report(dir.path(), "hyperfine_fit")["exit_code"], 1);
}

#[test]
fn locate_x1_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["synth", "--kind", "dipolar", "--defect", "X1"]).code, 0);
    let out = dir.path().join("loc");
    let data = fx.join("dipolar.csv");
    let r = spinforge(&out, &["locate", "--data", path_str(&data)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = report(&out, "locate");
    assert!((num(&rep, "/result/geometry/fit/params/r") - 9.23).abs() < 0.03, "{rep}");
    // one field plane leaves a sign-flipped partner
    assert!(!rep["result"]["geometry"]["equivalent"].as_array().unwrap().is_empty());
    for f in ["locate_map.csv", "locate_xy.svg", "locate_xz.svg", "locate_yz.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn locate_single_point_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    std::fs::write(&csv, "theta_deg,phi_deg,b0_gauss,coupling_khz,sigma_khz\n54.7,0,171.8,0.06,0.003\n").unwrap();
    let r = spinforge(dir.path(), &["locate", "--data", path_str(&csv)]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let rep = report(dir.path(), "locate");
    assert!(rep["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("degenerate")));
    assert!(dir.path().join("locate_map.csv").is_file());
}

#[test]
fn locate_zero_resolution_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["synth", "--kind", "dipolar"]).code, 0);
    let data = fx.join("dipolar.csv");
    assert_eq!(spinforge(dir.path(), &["locate", "--data", path_str(&data), "--resolution", "0"]).code, 1);
    report(dir.path(), "locate");
}

#[test]
fn ghz_ideal_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spinforge(dir.path(), &["ghz-sim"]).code, 0);
    let rep = report(dir.path(), "ghz_sim");
    assert!((num(&rep, "/result/amplitudes/8") - 1.0).abs() < 1e-9);
    assert!(num(&rep, "/result/leakage") < 1e-9);
    assert_eq!(rep["result"]["report"]["verdict"], "entangled");
    assert!(dir.path().join("ghz_signal.csv").is_file());
    assert!(dir.path().join("ghz_signal.svg").is_file());
}

#[test]
fn ghz_error_model_reports_leakage() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spinforge(dir.path(), &["ghz-sim", "--over-rotation", "0.05", "--depolarizing", "0.01"]).code, 0);
    let rep = report(dir.path(), "ghz_sim");
    let a8 = num(&rep, "/result/amplitudes/8");
    assert!(a8 < 0.99, "a8 {a8}");
    assert!(num(&rep, "/result/leakage") > 1e-3);
}

#[test]
fn ghz_custom_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq.json");
    std::fs::write(&seq, r#"{"elements":[{"type":"polarize"}]}"#).unwrap();
    assert_eq!(spinforge(dir.path(), &["ghz-sim", "--sequence", path_str(&seq)]).code, 0);
    let rep = report(dir.path(), "ghz_sim");
    // no entangler: no three-spin coherence
    assert!(num(&rep, "/result/amplitudes/8").abs() < 1e-9);
    assert_eq!(rep["result"]["report"]["verdict"], "not-demonstrated");

    std::fs::write(&seq, r#"{"elements":[{"type":"teleport"}]}"#).unwrap();
    assert_eq!(spinforge(dir.path(), &["ghz-sim", "--sequence", path_str(&seq)]).code, 1);
}

#[test]
fn sedor_doublets_center_on_electron_resonance() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spinforge(dir.path(), &["sedor-sim", "--b0", "171.8"]).code, 0);
    let rep = report(dir.path(), "sedor_sim");
    let nu_e = GAMMA_E * 171.8;
    let defects = rep["result"]["defects"].as_array().unwrap();
    assert_eq!(defects.len(), 2);
    for d in defects {
        assert!((num(d, "/center_mhz") - nu_e).abs() < 0.3, "{d}");
        assert!((num(d, "/electron_larmor_mhz") - nu_e).abs() < 1e-9);
    }
    let split = |label: &str| {
        let d = defects.iter().find(|d| d["defect"] == label).unwrap();
        num(d, "/splitting_mhz")
    };
    // X1 is the outer doublet
    assert!(split("X1") > split("X2"));
    assert!(dir.path().join("sedor_spectrum.csv").is_file());
}

#[test]
fn synth_noise_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let r = spinforge(dir.path(), &["synth", "--kind", "dipolar", "--noise", "0.05"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("--seed"), "{}", r.stderr);
    report(dir.path(), "synth");
}

#[test]
fn zero_threads_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spinforge(dir.path(), &["--threads", "0", "ghz-sim"]).code, 1);
}

#[test]
fn config_file_supplies_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(spinforge(&fx, &["synth", "--kind", "dipolar", "--defect", "X2"]).code, 0);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "out = \"cfg_out\"\n[locate]\ndata = \"fx/dipolar.csv\"\nresolution = 0.5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spinforge"))
        .args(["--config", path_str(&cfg), "locate"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = report(&dir.path().join("cfg_out"), "locate");
    assert_eq!(num(&rep, "/result/map/resolution_nm"), 0.5);
    assert!((num(&rep, "/result/geometry/fit/params/r") - 6.58).abs() < 0.02);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["--seed", "5", "synth", "--kind", "dipolar", "--noise", "0.05"],
        vec!["--seed", "5", "synth", "--kind", "two-tone", "--noise", "0.01"],
        vec!["sedor-sim"],
        vec!["ghz-sim", "--over-rotation", "0.03"],
    ];
    for (k, args) in runs.iter().enumerate() {
        let a = dir.path().join(format!("a{k}"));
        let b = dir.path().join(format!("b{k}"));
        let mut one = vec!["--threads", "1"];
        one.extend(args);
        let mut two = vec!["--threads", "2"];
        two.extend(args);
        assert_eq!(spinforge(&a, &one).code, 0);
        assert_eq!(spinforge(&b, &two).code, 0);
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        assert!(sa.len() >= 2, "{args:?}");
        assert_eq!(sa, sb, "{args:?}");
    }

    // locate fans out over threads
    let data = dir.path().join("a0/dipolar.csv");
    let la = dir.path().join("la");
    let lb = dir.path().join("lb");
    assert_eq!(spinforge(&la, &["--threads", "1", "locate", "--data", path_str(&data)]).code, 0);
    assert_eq!(spinforge(&lb, &["--threads", "2", "locate", "--data", path_str(&data)]).code, 0);
    assert_eq!(snapshot(&la), snapshot(&lb));
    report(&la, "locate");
}
