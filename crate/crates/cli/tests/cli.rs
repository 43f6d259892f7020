use autocluster::pipeline::{Manifest, PipelineConfig};
use std::path::Path;
use std::process::{Command, Output};

fn autocluster(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autocluster"))
        .current_dir(dir)
        .env_remove("AUTOCLUSTER_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(dir: &Path) {
    ok(&autocluster(
        dir,
        &["synth", "--out", "traffic.csv", "--lanes", "2", "--vehicles-per-lane", "15", "--frames", "700"],
    ));
}

const SMALL: &str = r#"
workdir = "run"
seed = 3

[input]
path = "traffic.csv"

[stability]
replicates = 3

[screen]
algorithms = ["kmeans_pp", "ward", "birch"]
k_values = [3, 4]

[selection]
k = 3

[search]
k_values = [3, 4]

[tune]
iterations = 15

[decode]
k = 3
"#;

#[test]
fn defaults_round_trip_in_both_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let toml_text = ok(&autocluster(tmp.path(), &["defaults"]));
    let json_text = ok(&autocluster(tmp.path(), &["defaults", "--format", "json"]));
    let a: PipelineConfig = toml::from_str(&toml_text).unwrap();
    let b: PipelineConfig = serde_json::from_str(&json_text).unwrap();
    assert_eq!(a, PipelineConfig::default());
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "seed = 1\n[tune]\niters = 5\n").unwrap();
    let out = autocluster(tmp.path(), &["-c", "c.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_of_domain_value_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"stability": {"tau": -1.0}}"#).unwrap();
    let out = autocluster(tmp.path(), &["-c", "c.json", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = autocluster(tmp.path(), &["run", "--input", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("autocluster-run/manifest.json")).unwrap())
            .unwrap();
    assert!(manifest.stages.is_empty());
}

#[test]
fn zero_iterations_is_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    std::fs::write(tmp.path().join("c.toml"), SMALL.replace("iterations = 15", "iterations = 0")).unwrap();
    let out = autocluster(tmp.path(), &["-c", "c.toml", "run"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no trials"));
    assert!(tmp.path().join("run/manifest.json").exists());
}

#[test]
fn seed_from_environment_overrides_config_and_runs_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    std::fs::write(tmp.path().join("c.toml"), SMALL).unwrap();
    let run = |workdir: &str, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_autocluster"))
            .current_dir(tmp.path())
            .env("AUTOCLUSTER_SEED", seed)
            .args(["-c", "c.toml", "--threads", "2", "run", "--workdir", workdir])
            .output()
            .unwrap();
        let text = ok(&out);
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(tmp.path().join(workdir).join("manifest.json")).unwrap())
                .unwrap();
        (text, manifest)
    };
    let (a, ma) = run("a", "42");
    let (b, mb) = run("b", "42");
    assert_eq!(ma.seed, 42);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(ma.stages.len(), 8);
}

#[test]
fn resume_reports_identical_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    std::fs::write(tmp.path().join("c.toml"), SMALL).unwrap();
    let first = ok(&autocluster(tmp.path(), &["-c", "c.toml", "run"]));
    let second = ok(&autocluster(tmp.path(), &["-c", "c.toml", "run", "--resume"]));
    assert_eq!(first, second);
}

#[test]
fn stage_subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    std::fs::write(dir.join("c.toml"), SMALL).unwrap();
    let c = ["-c", "c.toml"];
    let with = |args: &[&str]| -> String {
        let mut all = c.to_vec();
        all.extend_from_slice(args);
        ok(&autocluster(dir, &all))
    };
    with(&["ingest", "--input", "traffic.csv", "--unit", "feet", "--out", "tracks.bin"]);
    with(&["features", "--tracks", "tracks.bin", "--out", "features.csv", "--raw-out", "raw.csv"]);
    assert!(dir.join("features.json").exists());
    let screen = with(&["screen", "--features", "features.csv", "--out", "screen.json"]);
    assert_eq!(screen.lines().count(), 3);
    let sel = with(&[
        "select-features",
        "--features",
        "features.csv",
        "--screen",
        "screen.json",
        "--out",
        "importance.csv",
        "--selected-out",
        "selected.csv",
    ]);
    assert!(sel.starts_with("selected: "));
    let best = with(&[
        "tune",
        "--features",
        "selected.csv",
        "--screen",
        "screen.json",
        "--iters",
        "12",
        "--seed",
        "7",
        "--out",
        "trials.jsonl",
    ]);
    assert!(best.starts_with("k,algorithm"));
    assert_eq!(std::fs::read_to_string(dir.join("trials.jsonl")).unwrap().lines().count(), 12);
    with(&[
        "decode",
        "--trials",
        "trials.jsonl",
        "--features",
        "selected.csv",
        "--k",
        "3",
        "--tracks",
        "tracks.bin",
        "--out",
        "labels.csv,thresholds.csv,sankey.csv,profile.csv",
    ]);
    let labels = std::fs::read_to_string(dir.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().next(), Some("vehicle_id,risk_level"));
    assert_eq!(labels.lines().count(), 31);
    with(&["profile", "--labels", "labels.csv", "--tracks", "tracks.bin", "--out", "profile2.csv"]);
    assert_eq!(
        std::fs::read(dir.join("profile.csv")).unwrap(),
        std::fs::read(dir.join("profile2.csv")).unwrap()
    );
}

#[test]
fn profile_output_without_tracks_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("t.jsonl"), "").unwrap();
    let out = autocluster(
        tmp.path(),
        &["decode", "--trials", "t.jsonl", "--features", "f.csv", "--out", "a,b,c,d"],
    );
    assert_eq!(out.status.code(), Some(2));
}
