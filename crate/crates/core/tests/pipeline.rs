mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{synth, SynthOptions, SYNTH_PROMPTS_TOML};
use derail::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_UPSTREAM};

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(&SynthOptions { pages: 12, unlabeled_conversations: 200, ..Default::default() });
    s.write(dir.path());
    let config = dir.path().join("derail.toml");
    let text = format!(
        "output_dir = \"out\"\n\n[corpus]\nlabeled = \"labeled.jsonl\"\nparses = \"labeled.conllu\"\n\
         prompt_training = \"unlabeled.jsonl\"\nprompt_parses = \"unlabeled.conllu\"\n\n\
         [prediction]\nl2_grid = [1.0]\ninner_folds = 3\n\n{SYNTH_PROMPTS_TOML}"
    );
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    Workspace { _dir: dir, config, out }
}

fn derail(ws: &Workspace, args: &[&str]) -> i32 {
    let mut argv = vec!["derail", "--config", ws.config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(argv)
}

const CHAIN: &[&[&str]] = &[
    &["ingest"],
    &["match"],
    &["discover-prompts"],
    &["extract"],
    &["analyze"],
    &["predict", "--features", "all"],
    &["predict", "--features", "pragmatic", "--horizon-only"],
    &["report"],
];

fn run_chain(ws: &Workspace) {
    for args in CHAIN {
        assert_eq!(derail(ws, args), EXIT_OK, "{args:?}");
    }
}

fn manifests(out: &Path) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn full_chain_writes_every_artifact() {
    let ws = workspace();
    run_chain(&ws);
    for name in [
        "conversations.jsonl",
        "pairs.json",
        "dataset_summary.json",
        "prompt_model.json",
        "prompt_types.md",
        "features.json",
        "strategies.csv",
        "prompt_types.csv",
        "markers.json",
        "markers.csv",
        "cv_pragmatic.json",
        "cv_toxicity_pragmatic.md",
        "cv_bow.json",
        "cv_pragmatic_horizon.json",
        "report.md",
    ] {
        assert!(ws.out.join(name).exists(), "{name}");
    }
    let report = fs::read_to_string(ws.out.join("report.md")).unwrap();
    assert!(report.contains("## Dataset"));
    assert!(report.contains("- pairs: "));
    assert!(report.contains("| Feature set | # features | Accuracy |"));
    assert!(report.contains("Attack after the fourth comment"));
    assert!(report.contains("Role partitions"));
}

#[test]
fn reruns_produce_identical_manifests() {
    let ws = workspace();
    run_chain(&ws);
    let first = manifests(&ws.out);
    assert!(first.len() >= 10);
    run_chain(&ws);
    assert_eq!(first, manifests(&ws.out));
}

#[test]
fn predict_before_extract_names_the_missing_step() {
    let ws = workspace();
    assert_eq!(derail(&ws, &["ingest"]), EXIT_OK);
    assert_eq!(derail(&ws, &["match"]), EXIT_OK);
    assert_eq!(derail(&ws, &["predict", "--features", "pragmatic"]), EXIT_UPSTREAM);
    assert!(!ws.out.join("cv_pragmatic.json").exists());
}

#[test]
fn changed_config_invalidates_upstream_artifacts() {
    let ws = workspace();
    for args in &CHAIN[..4] {
        assert_eq!(derail(&ws, args), EXIT_OK);
    }
    let text = fs::read_to_string(&ws.config).unwrap().replace("k = 3", "k = 4");
    fs::write(&ws.config, text).unwrap();
    assert_eq!(derail(&ws, &["analyze"]), EXIT_UPSTREAM);
}

#[test]
fn configuration_errors_exit_two() {
    let ws = workspace();
    let missing = ws.config.with_file_name("absent.toml");
    assert_eq!(run(["derail", "--config", missing.to_str().unwrap(), "ingest"]), EXIT_CONFIG);
    assert_eq!(run(["derail", "--config", ws.config.to_str().unwrap(), "no-such-command"]), EXIT_CONFIG);
    assert_eq!(derail(&ws, &["predict", "--features", "nonsense"]), EXIT_CONFIG);
    fs::write(&ws.config, "[corpus]\nlabeled = \"nowhere.jsonl\"\n").unwrap();
    assert_eq!(derail(&ws, &["ingest"]), EXIT_CONFIG);
}

#[test]
fn binary_reports_help_and_usage_errors() {
    let bin = env!("CARGO_BIN_EXE_derail");
    let help = std::process::Command::new(bin).arg("--help").output().unwrap();
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("discover-prompts"));
    let bad = std::process::Command::new(bin).arg("bogus").output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_CONFIG));

    let ws = workspace();
    let early = std::process::Command::new(bin)
        .args(["--config", ws.config.to_str().unwrap(), "predict"])
        .output()
        .unwrap();
    assert_eq!(early.status.code(), Some(EXIT_UPSTREAM));
    assert!(String::from_utf8_lossy(&early.stderr).contains("derail extract"));
}
