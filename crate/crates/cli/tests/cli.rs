use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
seed = 0

[head]
num_layers = 1
num_queries = 6
dim = 16
heads = 2
num_classes = 3
ffn_hidden = 32
points = 2

[train]
epochs = 1
batch_size = 4
probe_samples = 2

[data]
train_scenes = 4
eval_scenes = 2
max_objects = 3
image_size = 64

[ablation]
seeds = [0]

[sweep]
layers = [1, 2]
min_map50 = 0.0
"#;

fn csdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csdn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let out = dir.path().join("run");
    let o = csdn(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.log", "checkpoint.bin", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 2"));

    let o = csdn(&["eval", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mAP50"));
}

#[test]
fn truncated_checkpoint_exits_with_checkpoint_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let out = dir.path().join("run");
    assert!(csdn(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status
        .success());
    let ckpt = out.join("checkpoint.bin");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    let o = csdn(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[checkpoint]"));
}

#[test]
fn config_errors_exit_with_config_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "[bogus]\nx = 1\n");
    assert_eq!(csdn(&["train", "--config", &cfg]).status.code(), Some(2));
    let cfg = tiny(dir.path(), "");
    assert_eq!(
        csdn(&["train", "--config", &cfg, "--topology", "q+d"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_files_exit_with_io_category() {
    let o = csdn(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(3));
    let o = csdn(&["eval", "--checkpoint", "/nonexistent/c.bin"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_divergence_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        "\n[optimizer]\nlr = 1e300\ngrad_clip = 0.0\nwarmup_steps = 0\n",
    );
    let cfg_text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("epochs = 1", "epochs = 4");
    std::fs::write(&cfg, cfg_text).unwrap();
    let o = csdn(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn grad_check_passes() {
    let o = csdn(&["grad-check", "--seed", "5", "--topology", "s-d"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("deformable_attention") && text.contains("head s-d"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let out = dir.path().join("abl");
    let o = csdn(&[
        "ablate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--topology",
        "n+b+d",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().filter(|l| l.starts_with("n+b+d\t")).count(), 1);

    let o = csdn(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), std::fs::read_to_string(out.join("ablation.txt")).unwrap());
}

#[test]
fn sweep_layers_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let out = dir.path().join("sw");
    let o = csdn(&["sweep-layers", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.txt")).unwrap();
    assert!(text.contains("Layers") && text.contains("parameter count non-decreasing in depth holds"));
}
