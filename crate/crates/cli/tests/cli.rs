//! End-to-end checks of the `carft` binary: determinism of dataset
//! generation, config validation, the reft/positive metrics contrast, and
//! the eval/export surfaces.

use std::path::Path;
use std::process::{Command, Output};

fn carft(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carft"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn carft")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fails(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got success");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_MODEL: &[&str] = &[
    "--d_model", "16", "--n_layers", "1", "--n_heads", "2", "--d_ff", "16",
    "--max_seq_len", "64", "--d_proj", "8", "--max_new_tokens", "10",
];

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.tsv", "b.tsv"] {
        ok(&carft(
            &["gen-data", "--n", "100", "--seed", "7", "--split", "train", "--out", name],
            dir.path(),
        ));
    }
    let a = std::fs::read(dir.path().join("a.tsv")).unwrap();
    let b = std::fs::read(dir.path().join("b.tsv")).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
fn out_of_range_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&carft(
        &["gen-data", "--n", "10", "--out", "x.tsv", "--epsilon", "1.5"],
        dir.path(),
    ));
    assert!(err.contains("epsilon"), "stderr: {err}");
    let err = fails(&carft(
        &["gen-data", "--n", "10", "--out", "x.tsv", "--bogus_key", "1"],
        dir.path(),
    ));
    assert!(err.contains("bogus_key"), "stderr: {err}");
    let err = fails(&carft(&["train", "--dataset", "missing.tsv"], dir.path()));
    assert!(err.contains("missing.tsv") || err.contains("test_dataset"), "stderr: {err}");
}

#[test]
fn config_file_plus_override_echoes_resolved_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "tau=0.5\nseed=9\n").unwrap();
    let stdout = ok(&carft(
        &[
            "gen-data", "--config", "run.cfg", "--tau", "0.25", "--n", "10",
            "--out", "d.tsv",
        ],
        dir.path(),
    ));
    assert!(stdout.contains("tau=0.25"), "stdout: {stdout}");
    assert!(stdout.contains("seed=9"), "stdout: {stdout}");
    assert!(stdout.contains("kl_beta=0.05"), "stdout: {stdout}");
}

fn small_train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train", "--dataset", "train.tsv", "--test_dataset", "test.tsv",
        "--sft_epochs", "1", "--rl_steps", "3", "--batch_size", "4",
        "--eval_interval", "2", "--seed", "11",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    args
}

#[test]
fn reft_and_positive_modes_share_sft_and_differ_in_contrast_column() {
    let dir = tempfile::tempdir().unwrap();
    ok(&carft(
        &["gen-data", "--n", "16", "--seed", "3", "--split", "train", "--out", "train.tsv"],
        dir.path(),
    ));
    ok(&carft(
        &["gen-data", "--n", "8", "--seed", "3", "--split", "test", "--out", "test.tsv"],
        dir.path(),
    ));
    ok(&carft(
        &small_train_args(&["--signal_mode", "reft", "--metrics_out", "reft.jsonl"]),
        dir.path(),
    ));
    ok(&carft(
        &small_train_args(&[
            "--signal_mode", "positive", "--reward_mode", "embedding-partial",
            "--metrics_out", "pos.jsonl",
        ]),
        dir.path(),
    ));

    let reft = std::fs::read_to_string(dir.path().join("reft.jsonl")).unwrap();
    let pos = std::fs::read_to_string(dir.path().join("pos.jsonl")).unwrap();
    let sft_lines = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.contains("\"sft_epoch\"") || l.contains("\"sft_eval\""))
            .map(String::from)
            .collect()
    };
    assert_eq!(sft_lines(&reft), sft_lines(&pos));
    assert!(!sft_lines(&reft).is_empty());

    let contrasts = |text: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| l.contains("\"rl_step\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["loss_contrast"].as_f64().unwrap()
            })
            .collect()
    };
    let reft_c = contrasts(&reft);
    let pos_c = contrasts(&pos);
    assert_eq!(reft_c.len(), 3);
    assert!(reft_c.iter().all(|&c| c == 0.0));
    assert!(pos_c.iter().any(|&c| c != 0.0));
}

#[test]
fn sft_eval_and_export_surface_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    ok(&carft(
        &["gen-data", "--n", "12", "--seed", "5", "--split", "train", "--out", "train.tsv"],
        dir.path(),
    ));
    ok(&carft(
        &["gen-data", "--n", "6", "--seed", "5", "--split", "test", "--out", "test.tsv"],
        dir.path(),
    ));
    let mut sft_args = vec![
        "sft", "--dataset", "train.tsv", "--test_dataset", "test.tsv",
        "--sft_epochs", "1", "--batch_size", "4", "--seed", "2",
        "--checkpoint_out", "model.ckpt", "--metrics_out", "sft.jsonl",
    ];
    sft_args.extend_from_slice(TINY_MODEL);
    ok(&carft(&sft_args, dir.path()));
    assert!(dir.path().join("model.ckpt").exists());

    let stdout = ok(&carft(
        &[
            "eval", "--checkpoint_in", "model.ckpt", "--dataset", "test.tsv",
            "--max_new_tokens", "10",
        ],
        dir.path(),
    ));
    let acc_line = stdout
        .lines()
        .find(|l| l.starts_with("accuracy: "))
        .expect("accuracy line");
    let acc: f64 = acc_line["accuracy: ".len()..].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(acc_line["accuracy: ".len()..].split('.').nth(1).unwrap().len(), 4);

    // A 3-step train writes eval rows that export to two columns.
    ok(&carft(
        &small_train_args(&["--metrics_out", "train.jsonl"]),
        dir.path(),
    ));
    ok(&carft(
        &["export-metrics", "--metrics_in", "train.jsonl", "--out", "curve.tsv"],
        dir.path(),
    ));
    let curve = std::fs::read_to_string(dir.path().join("curve.tsv")).unwrap();
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let mut cols = row.split('\t');
        let step: usize = cols.next().unwrap().parse().unwrap();
        let acc: f64 = cols.next().unwrap().parse().unwrap();
        assert!(step >= 1 && (0.0..=1.0).contains(&acc));
        assert!(cols.next().is_none());
    }
}
