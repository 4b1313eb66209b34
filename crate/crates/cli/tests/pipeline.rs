use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sfgs::dataset::Dataset;
use sfgs::ply::load_ply;

fn sfgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfgs")).args(args).env("SFGS_THREADS", "1").output().expect("spawn sfgs")
}

fn ok(args: &[&str]) -> String {
    let out = sfgs(args);
    assert!(out.status.success(), "sfgs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_sample_recover_mdist_closes_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.sfgs");
    let clouds = dir.path().join("clouds.sfgs");
    let recovered = dir.path().join("recovered.ply");
    let report = dir.path().join("mdist.json");
    ok(&["gen", "--out", p(&data), "--count", "40", "--seed", "5"]);
    ok(&["sample", "--in", p(&data), "--n", "12", "--out", p(&clouds)]);
    ok(&["recover", "--in", p(&clouds), "--out", p(&recovered)]);
    assert_eq!(load_ply(&recovered).unwrap().color_offset, Some(true));
    ok(&["mdist", "--a", p(&data), "--b", p(&recovered), "--report", p(&report)]);

    let r = json(&report);
    assert_eq!(r["pairs"].as_array().unwrap().len(), 40);
    assert_eq!(r["config"]["solver"], "exact");
    assert_eq!(r["config"]["metric"]["lambda"], 1.0);
    assert_eq!(r["config"]["sampling"]["n"], 12);
    assert!(r["distance"]["mean"].as_f64().unwrap() <= 1e-5, "{}", r["distance"]);
}

#[test]
fn mdist_broadcasts_a_single_record_and_supports_sinkhorn() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.sfgs");
    let many = dir.path().join("many.sfgs");
    let report = dir.path().join("r.json");
    ok(&["gen", "--out", p(&one), "--count", "1", "--seed", "1"]);
    ok(&["gen", "--out", p(&many), "--count", "5", "--seed", "2"]);
    ok(&["mdist", "--a", p(&one), "--b", p(&many), "--n", "6", "--sinkhorn", "--report", p(&report)]);
    let r = json(&report);
    let pairs = r["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 5);
    assert!(pairs.iter().all(|x| x["a"] == 0 && x["solver"] == "entropic" && x["epsilon"].as_f64().unwrap() > 0.0));
    assert_eq!(r["config"]["eps_scale"], 0.01);
}

#[test]
fn qsign_equivalence_has_zero_distance_and_known_parameter_gap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.sfgs");
    let report = dir.path().join("equiv.json");
    ok(&["gen", "--out", p(&data), "--count", "12", "--seed", "9"]);
    ok(&["equiv", "--in", p(&data), "--mode", "qsign", "--probes", "200", "--report", p(&report)]);
    let r = json(&report);
    assert_eq!(r["all_fields_equal"], true);
    for rec in r["records"].as_array().unwrap() {
        assert_eq!(rec["mdist"].as_f64().unwrap(), 0.0);
        assert_eq!(rec["field_max_deviation"].as_f64().unwrap(), 0.0);
        let gap = rec["param_l1"].as_f64().unwrap();
        let expected = 2.0 * rec["quat_l1"].as_f64().unwrap();
        assert!((gap - expected).abs() <= 1e-12 * expected, "{gap} vs {expected}");
    }
}

#[test]
fn flip_equivalence_keeps_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.sfgs");
    let report = dir.path().join("equiv.json");
    ok(&["gen", "--out", p(&data), "--count", "10", "--seed", "3"]);
    ok(&["equiv", "--in", p(&data), "--mode", "flip", "--probes", "200", "--report", p(&report)]);
    let r = json(&report);
    assert_eq!(r["all_fields_equal"], true);
    assert!(r["max_mdist"].as_f64().unwrap() <= 1e-5);
    assert!(r["min_param_l1"].as_f64().unwrap() > 1e-3);
}

const TINY_MODEL: &str = r#"{"point_widths":[8,16],"head_widths":[16],"param_widths":[16],"decoder_widths":[16]}"#;

#[test]
fn train_eval_interp_perturb_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.sfgs");
    let cfg = dir.path().join("model.json");
    let run = dir.path().join("run");
    std::fs::write(&cfg, TINY_MODEL).unwrap();
    ok(&["gen", "--out", p(&data), "--count", "60", "--seed", "4", "--n", "4"]);

    ok(&["train", "--dataset", p(&data), "--model", "sf", "--model-config", p(&cfg), "--epochs", "0", "--ckpt", p(&run)]);
    assert!(run.join("model.ckpt").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.lines().next().unwrap().contains("heldout_mdist"));

    ok(&["train", "--dataset", p(&data), "--model", "sf", "--model-config", p(&cfg), "--epochs", "2", "--ckpt", p(&run), "--batch-size", "8"]);
    let report = json(&run.join("train_report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(report["heldout_records"], 6);
    assert_eq!(report["train_records"], 54);
    assert_eq!(report["sampling"]["n"], 4);

    let eval = dir.path().join("eval.json");
    ok(&["eval", "--ckpt", p(&run), "--dataset", p(&data), "--report", p(&eval)]);
    let e = json(&eval);
    assert_eq!(e["records"].as_array().unwrap().len(), 6);
    assert_eq!(e["checkpoint"]["epoch"], 2);
    assert!(e["result"]["mdist"]["mean"].as_f64().unwrap().is_finite());

    let interp = dir.path().join("interp.ply");
    ok(&["interp", "--ckpt", p(&run), "--dataset", p(&data), "--a", "0", "--b", "1", "--steps", "5", "--out", p(&interp)]);
    assert_eq!(load_ply(&interp).unwrap().gaussians.len(), 5);

    let curve = dir.path().join("perturb.csv");
    ok(&["perturb", "--ckpt", p(&run), "--dataset", p(&data), "--trials", "2", "--report", p(&curve)]);
    let text = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("model,checkpoint_step,split,seed,lambda"));
}

#[test]
fn repeated_runs_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    std::fs::write(&cfg, TINY_MODEL).unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let data = dir.path().join(format!("d{k}.sfgs"));
        let run = dir.path().join(format!("run{k}"));
        let report = dir.path().join(format!("m{k}.json"));
        ok(&["gen", "--out", p(&data), "--count", "30", "--seed", "8", "--n", "4", "--clouds"]);
        ok(&["mdist", "--a", p(&data), "--b", p(&data), "--n", "5", "--report", p(&report)]);
        ok(&["train", "--dataset", p(&data), "--model", "param-mlp", "--model-config", p(&cfg), "--epochs", "1", "--ckpt", p(&run), "--batch-size", "4"]);
        let mdist = std::fs::read_to_string(&report).unwrap().replace(&format!("d{k}.sfgs"), "");
        outputs.push((std::fs::read(&data).unwrap(), mdist, std::fs::read(run.join("model.ckpt")).unwrap(), std::fs::read(run.join("train_log.csv")).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
    let ds = Dataset::load(&dir.path().join("d0.sfgs")).unwrap();
    assert_eq!(ds.records.len(), 30);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sfgs(&["gen"]).status.code(), Some(2));
    let data = dir.path().join("data.sfgs");
    ok(&["gen", "--out", p(&data), "--count", "3"]);
    assert_eq!(sfgs(&["mdist", "--a", p(&data), "--b", p(&data), "--lambda", "-1"]).status.code(), Some(2));

    let mut bytes = std::fs::read(&data).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0xff;
    bytes.truncate(n - 1);
    std::fs::write(&data, &bytes).unwrap();
    let out = sfgs(&["mdist", "--a", p(&data), "--b", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());

    let missing = dir.path().join("nope.ply");
    assert_eq!(sfgs(&["mdist", "--a", p(&missing), "--b", p(&missing)]).status.code(), Some(3));

    // Clouds are required for recovery.
    let fresh = dir.path().join("fresh.sfgs");
    ok(&["gen", "--out", p(&fresh), "--count", "3"]);
    let out = sfgs(&["recover", "--in", p(&fresh), "--out", p(&dir.path().join("x.ply"))]);
    assert_eq!(out.status.code(), Some(3));
}
