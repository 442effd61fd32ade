use std::path::Path;
use std::process::{Command, Output};

use everest::videodata::{save_clip, VideoClip};

fn everest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_everest")).args(args).env("EVEREST_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn static_clip_heatmap_is_black() {
    let dir = tempfile::tempdir().unwrap();
    let frame: Vec<u8> = (0..3 * 32 * 32).map(|i| (i % 200) as u8).collect();
    let clip = dir.path().join("still.evc");
    save_clip(&VideoClip::new(16, 3, 32, 32, frame.repeat(16)).unwrap(), &clip).unwrap();
    let out = dir.path().join("mask");
    let r = everest(&["mask", "--clip", s(&clip), "--rho-pre", "0.3", "--rho-post", "0.3333333333333333", "--metric", "l2", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let pgm = std::fs::read(out.join("pair_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert!(pgm[13..].iter().all(|&p| p == 0));
    assert_eq!(pgm.len(), 13 + 32 * 32);
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("mask.json")).unwrap()).unwrap();
    assert_eq!(dump["selected"].as_array().unwrap().len(), 154);
    assert_eq!(dump["visible"].as_array().unwrap().len(), 51);
    assert!(out.join("resolved_config.json").exists() && out.join("metrics.json").exists());
}

#[test]
fn flops_vit_s_row() {
    let r = everest(&["flops", "--arch", "vit-s", "--visible", "0.1", "--rho-pre", "0.3", "--batch", "256", "--format", "csv"]);
    assert_eq!(code(&r), 0);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.starts_with("arch,method,phase,flops,reduction_pct,activation_bytes\n"));
    assert!(text.lines().any(|l| l.starts_with("vit-s,everest,pretrain,")));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&everest(&["nonsense"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"rho_pre": 0.5, "rho_post": 0.5, "patch": 5}"#).unwrap();
    let r = everest(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&r), 1);
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    let fields: Vec<&str> = err["violations"].as_array().unwrap().iter().map(|v| v["field"].as_str().unwrap()).collect();
    assert_eq!(fields, vec!["height", "rho_pre*rho_post"]);
    let r = everest(&["mask", "--clip", s(&dir.path().join("missing.evc")), "--out", s(dir.path())]);
    assert_eq!(code(&r), 2);
    let r = everest(&["pretrain", "--out", s(&dir.path().join("run")), "--set", "manifest=/nonexistent/manifest.json"]);
    assert_eq!(code(&r), 2);
    let r = everest(&["pretrain", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&r), 1, "missing manifest is a configuration error");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = everest(&["gradcheck", "--seeds", "5", "--out", s(dir.path())]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["pass"] == true));
    let r = everest(&["gradcheck", "--seeds", "1", "--h", "1e-1"]);
    assert_eq!(code(&r), 1, "a coarse step must miss the threshold");
}

#[test]
fn identical_configs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&everest(&["gen", "--kind", "dataset", "--out", s(&data), "--clips", "8", "--frames", "8", "--seed", "3"])), 0);
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "tau": 4, "enc_dim": 16, "enc_depth": 1, "enc_heads": 2, "dec_dim": 8, "dec_depth": 1, "dec_heads": 2,
            "total_steps": 6, "warmup_steps": 2, "batch_size": 4, "alpha": 1.0,
            "manifest": data.join("manifest.json"), "test_manifest": data.join("manifest.json"),
        })
        .to_string(),
    )
    .unwrap();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = everest(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        let ckpt = out.join("model.evck");
        let r = everest(&["finetune", "--config", s(&cfg), "--out", s(&out.join("ft")), "--ckpt", s(&ckpt), "--order", "ascending"]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for f in ["metrics.json", "loss.csv", "model.evck", "ft/metrics.json", "ft/loss.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("ft/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["order"], "ascending");
    assert_eq!(resolved["beta2"], 0.999);
    assert_eq!(resolved["num_classes"], 4);
    assert!(resolved["checkpoint"].as_str().unwrap().ends_with("model.evck"));
}

#[test]
fn frames_writes_selection() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&everest(&["gen", "--kind", "square", "--out", s(dir.path()), "--frames", "24", "--vx", "-1"])), 0);
    let out = dir.path().join("sel").join("selected.json");
    let r = everest(&["frames", "--clip", s(&dir.path().join("square.evc")), "--tau", "8", "--alpha", "1.5", "--seed", "4", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(v["candidate_indices"].as_array().unwrap().len(), 24);
    assert_eq!(v["counts"].as_array().unwrap().len(), 12);
    let pairs: Vec<u64> = v["selected_pairs"].as_array().unwrap().iter().map(|p| p.as_u64().unwrap()).collect();
    assert_eq!(pairs.len(), 8);
    assert!(pairs.windows(2).all(|w| w[0] < w[1]));
}
