use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedpai");

const TINY: &str = r#"
strategy = ["fedavg", "fedpai_u_client"]
rounds = 2
num_clients = 4
clients_per_round = 0.5
kappa = [0.5]
alpha = 1.0
seeds = [0]
output_dir = "configured"

[dataset]
kind = "synthetic"
num_classes = 3
samples_per_class = 20
input_dim = 4

[model]
kind = "mlp"
hidden = [8]

[training]
local_epochs = 1
batch_size = 8
grasp_batch = 16
"#;

fn fedpai(dir: &Path, args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn");
    match env_root {
        Some(p) => cmd.env("FEDPAI_OUTPUT_ROOT", p),
        None => cmd.env_remove("FEDPAI_OUTPUT_ROOT"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn validate_reports_cells_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = fedpai(dir.path(), &["validate", &cfg], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 cells"));

    let bad = write_config(dir.path(), &TINY.replace("kappa = [0.5]", "kappa = [1.5]"));
    let out = fedpai(dir.path(), &["validate", &bad], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa"));

    let out = fedpai(dir.path(), &["validate", "missing.toml"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fedpai(dir.path(), &["bogus"], None).status.code(), Some(1));
    assert_eq!(fedpai(dir.path(), &["--help"], None).status.code(), Some(0));
}

#[test]
fn run_honours_output_precedence_then_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);

    let out = fedpai(dir.path(), &["run", &cfg], None);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("configured/manifest.json").exists());

    let env_root = dir.path().join("from_env");
    assert_eq!(
        fedpai(dir.path(), &["run", &cfg], Some(&env_root))
            .status
            .code(),
        Some(0)
    );
    assert!(env_root.join("manifest.json").exists());

    let flag = dir.path().join("from_flag");
    let out = fedpai(
        dir.path(),
        &["run", &cfg, "--output", flag.to_str().unwrap()],
        Some(&env_root),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(flag.join("manifest.json").exists());
    assert_eq!(fs::read_dir(flag.join("cells")).unwrap().count(), 4);

    let out = fedpai(dir.path(), &["curves", flag.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(flag.join("plots/acc_vs_round.dat").exists());
    assert!(flag.join("plots/acc_vs_sparsity.svg").exists());
}

#[test]
fn failed_cells_exit_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY
        .replace("num_clients = 4", "num_clients = 50")
        .replace("samples_per_class = 20", "samples_per_class = 3");
    let cfg = write_config(dir.path(), &body);
    assert_eq!(
        fedpai(dir.path(), &["run", &cfg], None).status.code(),
        Some(2)
    );
}

#[test]
fn partition_stats_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedpai(
        dir.path(),
        &["partition-stats", "--alpha", "0.1", "--clients", "10"],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.is_object());
    let out = fedpai(dir.path(), &["partition-stats", "--alpha", "-1"], None);
    assert_eq!(out.status.code(), Some(1));
}
