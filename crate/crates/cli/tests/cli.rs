use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sogclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sogclr"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "# tiny run\ndata.n = 12\ndata.d_in = 3\naug.k = 2\nencoder.hidden = 4\nencoder.embed_dim = 3\n\
         bimodal.text_dim = 3\noptimizer.batch_size = 4\noptimizer.steps = 20\nmetrics.cadence = 5\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let metrics = dir.path().join("m.csv");
    let ckpt = dir.path().join("ckpt");
    let out = sogclr(&[
        "train",
        &cfg,
        "--metrics",
        metrics.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("step,objective_value,oracle_grad_norm_sq"));
    // steps 0, 5, 10, 15, 20
    assert_eq!(text.lines().count(), 6);
    assert!(ckpt.join("encoder.ckpt").exists());
    assert!(ckpt.join("optimizer.ckpt").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let paths: Vec<_> = (0..2)
        .map(|i| dir.path().join(format!("m{i}.jsonl")))
        .collect();
    for p in &paths {
        assert!(
            sogclr(&["bimodal-train", &cfg, "--metrics", p.to_str().unwrap()])
                .status
                .success()
        );
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn gradcheck_passes_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = sogclr(&["gradcheck", &small_config(dir.path())]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.matches("pass").count(), 6, "{table}");
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let summary = dir.path().join("sweep.csv");
    let out = sogclr(&[
        "sweep",
        &cfg,
        "--batch-sizes",
        "2,4",
        "--seeds",
        "0,1",
        "--out",
        summary.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(fs::read_to_string(&summary).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let metrics = dir.path().join("m.csv");
    let metrics = metrics.to_str().unwrap();
    assert_eq!(
        sogclr(&["train", &cfg, "--metrics", metrics, "--set", "no.such=1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sogclr(&[
            "train",
            &cfg,
            "--metrics",
            metrics,
            "--set",
            "optimizer.gamma=2"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        sogclr(&["gradcheck", &cfg, "--set", "encoder.hidden=100"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sogclr(&["train", "/nonexistent/run.cfg", "--metrics", metrics])
            .status
            .code(),
        Some(3)
    );
    let blocked = dir.path().join("missing_dir/m.csv");
    assert_eq!(
        sogclr(&["train", &cfg, "--metrics", blocked.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
}
