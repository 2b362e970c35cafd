//! End-to-end checks of the `vireid` binary: exit codes, file outputs,
//! determinism of generated artifacts, and the full tiny pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vireid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let text = format!(
        r#"
[dataset]
kind = "synthetic"
num_identities = 4
train_images_per_id_per_modality = 4
test_images_per_id_per_modality = 2
image_height = 12
image_width = 8
seed = 3

[model]
feature_dim = 8
token_dim = 8
prompt_tokens = 2
stem_channels = [4, 6]
trunk_channels = [8, 8]

[train]
mode = "csdn_full"
seed = 9
epochs_mspl = 2
epochs_sii = 2
epochs_hse = 3
batch_identities = 4
batch_visible_per_identity = 2
batch_infrared_per_identity = 2
batches_per_epoch = 2

[train.schedule_mspl]
kind = "cosine"
base_lr = 0.05

[train.schedule_sii]
kind = "cosine"
base_lr = 0.02

[train.schedule_hse]
kind = "warmup_step"
base_lr = 0.01
warmup_epochs = 1
decay_epochs = [2]

[eval]
trials = 2
trial_seed = 7

[output]
dir = "{}"
"#,
        dir.join("out").display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn generate_is_deterministic_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["generate-data", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train_path = dir.path().join("out/train_manifest.jsonl");
    let first = std::fs::read(&train_path).unwrap();

    // rerun without --force: refused with the config exit code
    let out = run(&["generate-data", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));

    // rerun with --force: byte-identical output
    let out = run(&["generate-data", "--config", &cfg, "--force"]);
    assert!(out.status.success());
    let second = std::fs::read(&train_path).unwrap();
    assert_eq!(first, second);
}

#[test]
fn train_without_manifests_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate-data"));
}

#[test]
fn evaluate_without_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(run(&["generate-data", "--config", &cfg]).status.success());
    let out = run(&["evaluate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_config_key_names_the_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nlamda1 = 0.2\n").unwrap();
    let out = run(&["train", "--config", &path.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lamda1"), "{err}");
}

#[test]
fn full_tiny_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");

    assert!(run(&["generate-data", "--config", &cfg]).status.success());
    let out = run(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stage mspl"), "{stdout}");
    assert!(stdout.contains("trainable parameters"), "{stdout}");

    for file in [
        "train_manifest.jsonl",
        "test_manifest.jsonl",
        "metrics.jsonl",
        "freeze_audit.jsonl",
        "checkpoint_stage_mspl.json",
        "checkpoint_stage_sii.json",
        "checkpoint_stage_hse.json",
        "checkpoint_final.json",
        "parameter_counts.txt",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }

    // evaluate under both gallery protocols with plots
    let out = run(&[
        "evaluate",
        "--config",
        &cfg,
        "--protocol",
        "single-shot",
        "--protocol",
        "multi-shot",
        "--plots",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("ir->vis").count(), 2, "{stdout}");
    for file in [
        "report_all_single_ir2vis.json",
        "report_all_multi_ir2vis.json",
        "cmc_all_single_ir2vis.svg",
        "cmc_all_multi_ir2vis.svg",
        "results.tsv",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }

    // evaluating the same checkpoint twice is bit-for-bit reproducible
    let report_path = out_dir.join("report_all_single_ir2vis.json");
    let first = std::fs::read(&report_path).unwrap();
    assert!(run(&["evaluate", "--config", &cfg, "--protocol", "single-shot"]).status.success());
    let second = std::fs::read(&report_path).unwrap();
    assert_eq!(first, second);

    // resume is accepted once a checkpoint exists
    let out = run(&["train", "--config", &cfg, "--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_emits_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(run(&["generate-data", "--config", &cfg]).status.success());
    let out = run(&[
        "sweep",
        "--config",
        &cfg,
        "--param",
        "lambda2",
        "--values",
        "0,0.05",
        "--plots",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    let table = std::fs::read_to_string(out_dir.join("sweep_lambda2.tsv")).unwrap();
    assert!(table.starts_with("value\tR1\tmAP"));
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(out_dir.join("sweep_lambda2.svg").exists());

    // invalid sweep parameter is a config error
    let out = run(&["sweep", "--config", &cfg, "--param", "gamma", "--values", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
}
