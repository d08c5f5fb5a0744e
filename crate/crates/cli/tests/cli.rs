use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
generator = rings
n = 200
epsilon = 0.3
epochs = 2
batch_size = 32
slots = 8
cache_capacity = 64
methods = ce,arnet
epsilons = 0.3
n_seeds = 1
slot_list = 4,8
";

fn protomem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protomem"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_writes_dataset_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let o = protomem(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(out.join("dataset.meta").exists());
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("epsilon = 0.3"), "{echo}");
}

#[test]
fn train_then_export_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    let o = protomem(&["train", "--config", &cfg, "--out", out_s, "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("model.ckpt").exists());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(fs::read_to_string(out.join("metrics.txt")).unwrap().contains("accuracy = "));
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("seed = 9"));

    let o = protomem(&["export-embeddings", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    assert!(header.starts_with("idx,dim_0,"), "{header}");
    assert!(header.ends_with(",dim_15,y_clean,y_noisy,pred"), "{header}");
    assert_eq!(emb.lines().count(), 201);
    let mem = fs::read_to_string(out.join("memory.csv")).unwrap();
    assert_eq!(mem.lines().count(), 9);
}

#[test]
fn export_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    assert!(protomem(&["train", "--config", &cfg, "--out", out_s]).status.success());
    let other = write_config(dir.path(), "input_dim = 3\n");
    let o = protomem(&["export-embeddings", "--config", &other, "--out", out_s]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}

#[test]
fn bench_writes_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = protomem(&["bench", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<String> = ["bench.csv", "slots.csv", "runs.csv", "purity.csv"]
            .iter()
            .map(|f| fs::read_to_string(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    let bench = &outputs[0][0];
    assert!(bench.starts_with("method,epsilon,acc_mean,acc_sd,f1_mean,f1_sd\n"));
    assert_eq!(bench.lines().count(), 3);
    assert_eq!(outputs[0][1].lines().count(), 3);
}

#[test]
fn unknown_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 1\n");
    let o = protomem(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains(":12:"), "{err}");
}

#[test]
fn verify_exit_status_matches_report() {
    let o = protomem(&["--verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains(" gradient ")).count(), 20);
    assert!(stdout.lines().any(|l| l.contains(" sinkhorn ")));
    assert_eq!(o.status.success(), !stdout.contains("FAIL"));
}

#[test]
fn missing_subcommand_fails() {
    assert!(!protomem(&[]).status.success());
}
