use std::process::Command;

use msmc_cli::config::RunConfig;

fn msmc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msmc"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

#[test]
fn export_config_round_trips_overrides() {
    let out = msmc().args(["export-config", "--stride", "4", "--shots", "2", "--text-free"]).output().unwrap();
    assert!(out.status.success());
    let cfg: RunConfig = toml::from_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.windows.stride_small, 4);
    assert_eq!(cfg.windows.stride_middle, 4);
    assert_eq!(cfg.bank.shots, 2);
    assert!(cfg.fewshot.text_free);
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[windows]\ncanonical_size = 250\n").unwrap();
    let out = msmc().args(["export-config", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn end_to_end_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let status = msmc().args(["synth", "--normal", "2", "--defects", "2", "--out"]).arg(&data).status().unwrap();
    assert!(status.success());

    let test = |extra: &[&str]| {
        msmc()
            .args(["test", "--mock-providers", "0", "--text-free", "--stride", "4", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .args(extra)
            .output()
            .unwrap()
    };
    // no banks yet
    assert!(!test(&[]).status.success());
    let built = msmc()
        .args(["build-bank", "--mock-providers", "0", "--text-free", "--stride", "4", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(built.success());
    let ok = test(&[]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(out.join("metrics.json").is_file());
    assert!(out.join("config.toml").is_file());
    assert!(out.join("disk/maps/noise_001.raw").is_file());
}
