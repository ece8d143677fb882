use std::path::Path;
use std::process::Command;

fn dmsn(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dmsn")).args(args).output().expect("spawn dmsn");
    assert!(
        out.status.success(),
        "dmsn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dmsn(&["generate", "--out", arg(&data), "--images", "3", "--test-images", "2", "--seed", "4"]);
    assert!(data.join("train/manifest.json").exists());
    assert!(data.join("test/manifest.json").exists());

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "epochs = 2\nphase2_start_epoch = 1\nlr = 0.01\nn_proposals = 16\nlmb_capacity = 2\n\
             probe_every = 0\ndata_root = {:?}\n\n[detector]\ng1_channels = [4, 6, 6]\n\
             g2_channels = [6, 8, 8]\nrpn_channels = 6\nroi_hidden = 8\nrpn_batch = 16\nroi_batch = 8\n\
             train_proposals = 16\ntest_proposals = 16\n",
            arg(&data)
        ),
    )
    .unwrap();
    let runs = dir.path().join("runs");
    let run = runs.join("tiny");
    let summary: serde_json::Value =
        serde_json::from_str(&dmsn(&["train", "--config", arg(&config), "--out", arg(&run)])).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["steps"], 6);

    let report = run.join("report.json");
    let ckpt = run.join("final.dmsn");
    let printed = dmsn(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&data), "--out", arg(&report)]);
    assert!(printed.starts_with("mAP "));
    assert!(report.exists());

    let printed = dmsn(&["report", "--runs", arg(&runs)]);
    assert!(printed.contains("1 runs"), "{printed}");
}
