use std::path::Path;
use std::process::Command;

fn pearl(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pearl")).args(args).output().expect("spawn pearl");
    assert!(
        out.status.success(),
        "pearl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, env: &str) -> String {
    let body = format!(
        r#"env = "{env}"
n_layers = 2
phase2_steps = 400
eval_steps = 240
outdir = "{out}"

[train]
steps_per_layer = 300
learn_start = 50

[heads]
epochs = 2

[mi]
window = 100

[sweep]
u_values = [0.75]
p_values = [0.9]
"#,
        out = dir.join("runs").display()
    );
    let path = dir.join(format!("{env}.toml"));
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

#[test]
fn thermal_train_infer_attack_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "thermal");
    let out = pearl(&["train", "--config", &cfg]);
    assert!(out.contains("best branch: L"), "{out}");
    let run = tmp.path().join("runs/thermal-H1-seed1");
    for f in ["checkpoint.bin", "manifest.json", "eligibility.csv", "phase2.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = pearl(&["infer", "--config", &cfg, "--u", "0.75", "--p", "0.9"]);
    assert!(out.contains("accuracy"), "{out}");
    for f in ["trace.csv", "mi_series_fine.csv", "mi_series_coarse.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = pearl(&["attack", "--config", &cfg]);
    assert!(out.contains("elbow k = "), "{out}");
    assert!(run.join("wcss.csv").exists());

    let out = pearl(&["sweep", "--config", &cfg]);
    assert!(out.contains("u=0.75 p=0.9"), "{out}");

    let out = pearl(&["report", "--config", &cfg]);
    assert!(out.contains("## Branch utility"), "{out}");
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("checkpoint_hash"));
}

#[test]
fn vr_train_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "vr");
    let out = pearl(&["train", "--config", &cfg, "--seed", "3"]);
    assert!(out.contains("phase-2 I_max"), "{out}");
    assert!(tmp.path().join("runs/vr-P1-seed3/checkpoint.bin").exists());
}

#[test]
fn bad_budget_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_pearl"))
        .args(["infer", "--u", "1.5", "--outdir", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
