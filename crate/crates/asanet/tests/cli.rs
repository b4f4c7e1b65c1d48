use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn asanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_train_then_eval_both_setups() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    let out = asanet(&["gen", "--out", s(&data), "--identities", "2", "--tracklets", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let t0 = Instant::now();
    let out = asanet(&["train", "--preset", "smoke", "--data", s(&data), "--out", s(&run), "--epochs", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t0.elapsed().as_secs() < 60);
    for f in ["config.json", "train_log.csv", "epochs.csv", "checkpoint/manifest.json", "checkpoint/weights.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("checkpoint");
    for setup in ["usual", "mixing"] {
        let ev = dir.path().join(setup);
        let out = asanet(&[
            "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--setup", setup, "--masks", "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("mAP"));
        for f in ["metrics.json", "cmc.csv", "cmc.svg", "ranked_lists.csv", "features.bin", "features.json"] {
            assert!(ev.join(f).exists(), "{setup}: missing {f}");
        }
    }
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(asanet(&["gen", "--out", s(&data), "--identities", "2"]).status.success());
    let out = asanet(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope")),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("ev")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn single_tracklet_identities_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = asanet(&["gen", "--out", s(&dir.path().join("d")), "--identities", "2", "--tracklets", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("config"));
}

#[test]
fn gradcheck_reports_injected_fault() {
    let ok = asanet(&["gradcheck", "--scope", "ops", "--seeds", "1"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = asanet(&["gradcheck", "--scope", "ops", "--seeds", "1", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn bad_flag_is_rejected() {
    assert!(!asanet(&["train", "--fusion", "c", "--out", "x"]).status.success());
}
