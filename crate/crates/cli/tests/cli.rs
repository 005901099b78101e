use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn envtwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_envtwin"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "scenario.ris.n1=2",
    "--set",
    "scenario.ris.n2=2",
    "--set",
    "scenario.rx_grid.rows=5",
    "--set",
    "scenario.rx_grid.cols=4",
    "--set",
    "model.conv_filters=[2]",
    "--set",
    "model.kernel_sizes=[3]",
    "--set",
    "model.fc_widths=[4]",
    "--set",
    "model.max_epochs=2",
    "--set",
    "eval.n_train=10",
];

fn init_tiny(dir: &Path) {
    let mut args = vec!["init", "--out", "run"];
    args.extend_from_slice(TINY);
    let o = envtwin(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_without_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    init_tiny(dir.path());
    for step in ["scenario", "dataset"] {
        assert!(envtwin(dir.path(), &[step]).status.success());
    }
    let o = envtwin(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("missing artifact") && stderr(&o).contains("model.bin"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = envtwin(dir.path(), &["scenario", "--config", "nope.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    init_tiny(dir.path());
    let o = envtwin(dir.path(), &["scenario", "--set", "model.learning_rat=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
    let o = envtwin(dir.path(), &["scenario", "--set", "no_equals_sign"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn env_override_reaches_config() {
    let dir = tempfile::tempdir().unwrap();
    init_tiny(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_envtwin"))
        .current_dir(dir.path())
        .env("ENVTWIN__SCENARIO__NUM_SUBCARRIERS", "0")
        .arg("scenario")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn run_twice_gives_identical_manifest_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    init_tiny(dir.path());
    // config.json records the output directory; every other artifact must match
    let manifests: Vec<serde_json::Value> = ["a", "b"]
        .iter()
        .map(|out| {
            let o = envtwin(dir.path(), &["run", "--out", out, "--threads", "1"]);
            assert!(o.status.success(), "{}", stderr(&o));
            let text = fs::read_to_string(dir.path().join(out).join("manifest.json")).unwrap();
            let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
            v["artifacts"]
                .as_object_mut()
                .unwrap()
                .remove("config.json");
            v
        })
        .collect();
    assert_eq!(manifests[0], manifests[1]);
    assert_eq!(manifests[0]["artifacts"].as_object().unwrap().len(), 9);
    let o = envtwin(dir.path(), &["verify", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.path().join("a/model.bin"), b"junk").unwrap();
    let o = envtwin(dir.path(), &["verify", "--out", "a"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_flag_changes_split() {
    let dir = tempfile::tempdir().unwrap();
    init_tiny(dir.path());
    for (out, seed) in [("s1", "1"), ("s2", "2")] {
        for step in ["scenario", "dataset"] {
            let o = envtwin(dir.path(), &[step, "--out", out, "--seed", seed]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
    }
    let a = fs::read(dir.path().join("s1/dataset.bin")).unwrap();
    let b = fs::read(dir.path().join("s2/dataset.bin")).unwrap();
    assert_ne!(a, b);
}
