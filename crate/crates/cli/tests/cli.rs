use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_int8flow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SMALL_TRAIN: &str = r#"{
  "version": 1,
  "task": {"kind": "copy-sequence", "vocab": 8, "length": 8, "noise": 0.1},
  "base": {"layers": 1, "hidden": 32, "heads": 2, "mlp_ratio": 2, "steps": 30, "batch_size": 4,
           "lr": 0.003, "eval_every": 10, "eval_sequences": 8, "dropout": 0.1},
  "schemes": ["fp32", "per-block"],
  "seeds": [3]
}"#;

#[test]
fn quant_error_writes_both_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "q.json",
        r#"{"version": 1, "sizes": [[64, 128]], "matrices": 2, "outlier_factors": [30]}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["quant-error", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&out.join("quant_error.csv")), "scheme,rows,cols,outlier_factor,outlier_fraction,matrix,mse,mean_abs");
    assert_eq!(
        header(&out.join("quant_error_summary.csv")),
        "scheme,rows,cols,outlier_factor,outlier_fraction,matrices,mean_mse,max_mse,mean_abs"
    );
    assert_eq!(fs::read_to_string(out.join("quant_error.csv")).unwrap().lines().count(), 1 + 2 * 4);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "quant-error");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let cases = [
        r#"{"sizes": [[64, 64]]}"#,
        r#"{"version": 2}"#,
        r#"{"version": 1, "bogus": 3}"#,
        r#"{"version": 1, "sizes": [[60, 64]]}"#,
        "not json",
    ];
    for (i, json) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{i}.json"), json);
        let o = run(&["quant-error", "--config", &cfg, "--out", out]);
        assert_eq!(code(&o), 2, "{json}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&run(&["quant-error", "--scheme", "per-galaxy", "--out", out])), 2);
    assert_eq!(code(&run(&["bench", "--mode", "fp64", "--out", out])), 2);
    assert_eq!(code(&run(&["bench", "--scheme", "per-block", "--out", out])), 2);
    assert_eq!(code(&run(&["selftest", "--block-size", "32", "--out", out])), 2);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/cfg.json", "--out", out])), 2);
}

#[test]
fn bench_counters_and_traffic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        r#"{"version": 1, "gemm_sizes": [[64, 64, 96]], "elementwise_sizes": [[64, 64]], "repeats": 1}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["bench", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        header(&out.join("bench_counters.csv")),
        "op_name,N,C,D,B,mode,int8_ls,fp16_ls,int_mac,dequant,quant,bytes"
    );
    let traffic = fs::read_to_string(out.join("bench_traffic.csv")).unwrap();
    assert_eq!(traffic.lines().next().unwrap(), "op_name,N,C,D,int8_bytes,qcd_bytes,ratio");
    for line in traffic.lines().skip(1) {
        assert!(line.ends_with(",0.5"), "{line}");
    }
}

#[test]
fn selftest_passes_and_flags_a_corrupted_fixture() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&["selftest", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("selftest.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "check,passed,detail");
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{csv}");

    let mut bytes = fs::read(out.join("fixture.bin")).unwrap();
    let last = bytes.len() - 100;
    bytes[last] ^= 0x5a;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let cfg = write_config(dir.path(), "s.json", &format!(r#"{{"version": 1, "fixture": {:?}}}"#, bad.to_str().unwrap()));
    let out2 = dir.path().join("out2");
    let o = run(&["selftest", "--config", &cfg, "--out", out2.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fixture_roundtrip"));
}

#[test]
fn train_csv_is_byte_identical_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.json", SMALL_TRAIN);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        let o = run(&["train", "--config", &cfg, "--threads", threads, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(out.join("records.csv")).unwrap(), fs::read(out.join("summary.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let records = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(records.lines().next().unwrap(), "run,step,train_loss,val_loss,grad_norm,scheme,diverged");
    assert_eq!(
        String::from_utf8(outputs[0].1.clone()).unwrap().lines().next().unwrap(),
        "seed,run,scheme,reference,final_step,final_val_loss,best_val_loss,final_train_loss,rel_gap,diverged"
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.json", SMALL_TRAIN);
    let full = dir.path().join("full");
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", full.to_str().unwrap()])), 0);

    let split = dir.path().join("split");
    let split_s = split.to_str().unwrap();
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", split_s, "--stop-after", "17"])), 0);
    assert!(split.join("checkpoints/per-block-seed3/checkpoint.json").is_file());
    let o = run(&["train", "--config", &cfg, "--out", split_s, "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(full.join("records.csv")).unwrap(), fs::read(split.join("records.csv")).unwrap());
    assert_eq!(fs::read(full.join("summary.csv")).unwrap(), fs::read(split.join("summary.csv")).unwrap());
}

#[test]
fn divergence_exits_3_unless_allowed() {
    let dir = TempDir::new().unwrap();
    let json = SMALL_TRAIN.replace("\"lr\": 0.003", "\"lr\": 1e30").replace("\"dropout\": 0.1", "\"dropout\": 0.0");
    let cfg = write_config(dir.path(), "t.json", &json);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--scheme", "fp32", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["train", "--config", &cfg, "--scheme", "fp32", "--allow-divergence", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().contains(",true"));
}
