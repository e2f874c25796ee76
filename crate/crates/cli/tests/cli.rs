use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mvfbm");

fn mvfbm(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .arg(args[0])
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[model]\nkind = \"nondegenerate\"\npreset = \"pure-noise\"\n\n[sim]\nhurst = 0.7\nn_steps = 32\nn_particles = 4000\nseed = 3\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = mvfbm(&["simulate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "simulate");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("terminal.csv").exists());
}

#[test]
fn overrides_change_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let hash = |extra: &[&str], tag: &str| {
        let out = dir.path().join(tag);
        let mut args = vec!["simulate"];
        args.extend_from_slice(extra);
        let o = mvfbm(&args, &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_owned()
    };
    let base = hash(&[], "a");
    assert_eq!(base, hash(&[], "b"));
    assert_ne!(base, hash(&["--sim.seed=4"], "c"));
}

#[test]
fn bad_configs_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("x");

    let o = mvfbm(&["simulate", "--sim.hurst=0.4"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.hurst"));

    let o = mvfbm(&["warp"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[model]\npreset = \"pure-noise\"\nkind = \"nondegenerate\"\n\n[sim]\nhurts = 0.7\n").unwrap();
    let o = mvfbm(&["simulate"], &typo, &out);
    assert_eq!(o.status.code(), Some(2));

    let o = mvfbm(&["simulate"], &dir.path().join("missing.toml"), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            mvfbm_cli::parse(&text, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
