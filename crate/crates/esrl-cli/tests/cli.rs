//! CLI behavior: exit codes, config file handling, and flag precedence.

use std::path::Path;
use std::process::Command;

fn esrl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_esrl"))
        .args(args)
        .output()
        .expect("spawn esrl")
}

fn gen_data(dir: &Path) {
    let out = esrl(&[
        "gen-data",
        "--task",
        "copy",
        "--n_pairs",
        "60",
        "--min_len",
        "2",
        "--max_len",
        "5",
        "--vocab_size",
        "16",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
}

#[test]
fn invalid_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = esrl(&[
        "gen-data",
        "--task",
        "copy",
        "--n_pairs",
        "10",
        "--min_len",
        "2",
        "--max_len",
        "5",
        "--vocab_size",
        "16",
        "--out",
        dir.path().to_str().unwrap(),
        "--beta",
        "1.0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "beta = 0.3\nbogus_knob = 1\n").unwrap();
    let out = esrl(&[
        "eval",
        "--data",
        dir.path().to_str().unwrap(),
        "--ckpt",
        "nope.ckpt",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_knob"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = esrl(&[
        "pretrain",
        "--data",
        dir.path().join("nonexistent").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "mle_epochs = 1\nbatch_size = 16\nlearning_rate = 1e-3  # file value\n",
    )
    .unwrap();
    let out_dir = dir.path().join("mle");
    let out = esrl(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--mle_epochs",
        "2",
        "--d_model",
        "8",
        "--n_heads",
        "2",
        "--n_enc_layers",
        "1",
        "--n_dec_layers",
        "1",
        "--d_ff",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.jsonl")).unwrap();
    assert_eq!(
        report.lines().count(),
        2,
        "flag --mle_epochs 2 must override the file's 1"
    );
}

#[test]
fn eval_runs_on_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let out_dir = dir.path().join("mle");
    let out = esrl(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--mle_epochs",
        "1",
        "--d_model",
        "8",
        "--n_heads",
        "2",
        "--n_enc_layers",
        "1",
        "--n_dec_layers",
        "1",
        "--d_ff",
        "16",
    ]);
    assert!(out.status.success());
    let out = esrl(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--ckpt",
        out_dir.join("best.ckpt").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"bleu\""), "{text}");
    assert!(text.contains("\"rouge_l\""), "{text}");
}
