//! End-to-end checks of the `tnt` binary: exit codes, output formats, and
//! the train -> eval -> export flow.

use std::path::Path;
use std::process::{Command, Output};

fn tnt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnt")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_field(value: &serde_json::Value, key: &str) -> f64 {
    value.get(key).and_then(|v| v.as_f64()).unwrap_or_else(|| panic!("field {key} in {value}"))
}

#[test]
fn describe_tnt_s_matches_published_sizes() {
    let out = tnt(&["describe", "--preset", "tnt-s", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let params = json_field(&report, "exhaustive_params_total");
    let flops = json_field(&report, "formula_flops_total");
    assert!((params - 23.8e6).abs() <= 0.02 * 23.8e6, "params {params}");
    assert!((flops - 5.2e9).abs() <= 0.05 * 5.2e9, "flops {flops}");

    let table = tnt(&["describe", "--preset", "tnt-s"]);
    let text = stdout(&table);
    assert!(text.contains("1.14x") && text.contains("1.08x"), "{text}");
}

#[test]
fn describe_with_single_index_matches_table() {
    let out = tnt(&["describe", "--preset", "tnt-s", "--indices", "1", "--json"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let flops = json_field(&report, "formula_flops_total");
    assert!((flops - 4.6e9).abs() <= 0.05 * 4.6e9, "flops {flops}");
}

#[test]
fn describe_rejects_unknown_preset_with_exit_1() {
    let out = tnt(&["describe", "--preset", "tnt-xxl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("tnt-xxl"));
}

#[test]
fn describe_set_overrides_and_rejects_unknown_keys() {
    let out = tnt(&["describe", "--set", "depth=6", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["per_layer"].as_array().unwrap().len(), 6);

    let bad = tnt(&["describe", "--set", "bogus_field=3"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("bogus_field"));

    let nested = tnt(&["describe", "--set", "pos_enc.word=false", "--json"]);
    assert!(nested.status.success());
}

#[test]
fn config_file_overrides_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"depth": 2, "tnt_block_indices": [1]}"#).unwrap();
    let out = tnt(&["describe", "--config", cfg_path.to_str().unwrap(), "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let layers = report["per_layer"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0]["kind"], "tnt");
    assert_eq!(layers[1]["kind"], "standard");
}

#[test]
fn check_passes_and_reports_eps_override() {
    let out = tnt(&["check", "--entries", "2", "--eps", "1e-7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("eps 1.0e-7"), "{text}");
    assert!(text.contains("check: PASS"));
}

#[test]
fn check_with_injected_fault_exits_2_and_names_op() {
    let out = tnt(&["check", "--entries", "2", "--inject-fault", "layer_norm"]);
    assert_eq!(out.status.code(), Some(2));
    let all = format!("{}{}", stdout(&out), stderr(&out));
    assert!(all.contains("layer_norm"), "{all}");
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn train_eval_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = tnt(&[
        "train",
        "--steps",
        "25",
        "--batch",
        "8",
        "--train-size",
        "32",
        "--heldout-size",
        "16",
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    // Metrics: one JSON object per line with the schedule recorded.
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 25);
    for (i, line) in lines.iter().enumerate() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["step"].as_u64().unwrap(), i as u64);
        for key in ["lr", "loss", "acc"] {
            assert!(rec[key].is_f64() || rec[key].is_u64() || rec[key].is_i64(), "{line}");
        }
    }

    let ckpt = out_dir.join("model.tntc");
    assert!(ckpt.exists());

    let eval = tnt(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "train",
        "--seed",
        "7",
        "--train-size",
        "32",
        "--heldout-size",
        "16",
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert!(stdout(&eval).contains("top-1 on train"), "{}", stdout(&eval));

    // Export each kind from the trained checkpoint.
    let attn = out_dir.join("inner.tnta");
    let export = tnt(&[
        "export",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--kind",
        "inner-attn",
        "--layer",
        "1",
        "--sentence",
        "2",
        "--head",
        "0",
        "--sample",
        "0",
        "--seed",
        "7",
        "--out",
        attn.to_str().unwrap(),
        "--csv",
    ]);
    assert!(export.status.success(), "{}", stderr(&export));
    assert!(attn.exists() && out_dir.join("inner.csv").exists());
    assert_tnta_rows_stochastic(&attn);

    let class = out_dir.join("class.tnta");
    let export = tnt(&[
        "export",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--kind",
        "class-attn",
        "--layer",
        "4",
        "--sample",
        "1",
        "--seed",
        "7",
        "--out",
        class.to_str().unwrap(),
    ]);
    assert!(export.status.success(), "{}", stderr(&export));
    assert!(stdout(&export).contains("self-weight"));

    let maps = out_dir.join("words.tnta");
    let export = tnt(&[
        "export",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--kind",
        "word-maps",
        "--layer",
        "0",
        "--sample",
        "0",
        "--seed",
        "7",
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert!(export.status.success(), "{}", stderr(&export));

    // Out-of-range layer is a usage error.
    let bad = tnt(&[
        "export",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--kind",
        "inner-attn",
        "--layer",
        "9",
        "--sample",
        "0",
        "--out",
        dir.path().join("x.tnta").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
}

fn assert_tnta_rows_stochastic(path: &Path) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"TNTA");
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    assert_eq!(rank, 2);
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let data: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(data.len(), rows * cols);
    for row in data.chunks(cols) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_missing_checkpoint_exits_3() {
    let out = tnt(&["eval", "--ckpt", "/nonexistent/path.tntc"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn threads_env_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_tnt"))
        .args(["describe", "--preset", "tnt-micro"])
        .env("TNT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let ok = Command::new(env!("CARGO_BIN_EXE_tnt"))
        .args(["describe", "--preset", "tnt-micro"])
        .env("TNT_THREADS", "1")
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn train_accepts_ppm_image_exports() {
    // A PPM written by hand feeds the export path end to end.
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = tnt(&[
        "train",
        "--steps",
        "3",
        "--batch",
        "4",
        "--train-size",
        "8",
        "--heldout-size",
        "4",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let mut ppm = b"P6\n32 32\n255\n".to_vec();
    for i in 0..32 * 32 * 3 {
        ppm.push((i % 251) as u8);
    }
    let img_path = dir.path().join("input.ppm");
    std::fs::write(&img_path, &ppm).unwrap();

    let export = tnt(&[
        "export",
        "--ckpt",
        out_dir.join("model.tntc").to_str().unwrap(),
        "--kind",
        "outer-attn",
        "--layer",
        "2",
        "--image",
        img_path.to_str().unwrap(),
        "--out",
        dir.path().join("outer.tnta").to_str().unwrap(),
    ]);
    assert!(export.status.success(), "{}", stderr(&export));
    assert_tnta_rows_stochastic(&dir.path().join("outer.tnta"));
}
