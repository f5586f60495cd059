use std::fs;
use std::path::{Path, PathBuf};

use wadeable::eval::{read_predictions, PredictionOutcome};
use wadeable::run::{execute, RunConfig, ERRORS_FILE};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config(out: &Path) -> RunConfig {
    let mut c = RunConfig::load(fixtures().join("run.toml")).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

fn strip_latency(text: &str) -> String {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["latency_ms"] = 0.into();
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn fixture_run_records_every_key() {
    let out = tempfile::tempdir().unwrap();
    let c = config(out.path());
    let summary = execute(&c).unwrap();
    assert_eq!(summary.queries_total, 24);
    assert_eq!(summary.predictions_written, 24);
    assert_eq!(summary.parse_failures, 4);
    assert_eq!(summary.query_errors, 0);
    assert_eq!(summary.costmaps_written, 4);

    let run = c.run_dir();
    let preds = read_predictions(run.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.len(), 24);
    let failures = preds
        .iter()
        .filter(|p| matches!(p.outcome, PredictionOutcome::Failure { .. }))
        .count();
    assert_eq!(failures, 4);
    assert!(preds.iter().all(|p| p.run_id == "fixture-mock" && p.model_tag == "mock"));
    for f in ["run.json", "costmaps/scene_01.png", "costmaps/scene_01.meta.json", "overlays/scene_04.png"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join(ERRORS_FILE)).unwrap(), "");

    // A second invocation has nothing left to do.
    let again = execute(&c).unwrap();
    assert_eq!(again.queries_sent, 0);
    assert_eq!(again.queries_skipped, 24);
    assert_eq!(read_predictions(run.join("predictions.jsonl")).unwrap().len(), 24);
}

#[test]
fn resume_after_torn_write_matches_full_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let c = config(full_dir.path());
    execute(&c).unwrap();
    let full = fs::read_to_string(c.run_dir().join("predictions.jsonl")).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let c2 = config(part_dir.path());
    fs::create_dir_all(c2.run_dir()).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let mut partial = lines[..9].join("\n");
    partial.push('\n');
    partial.push_str(&lines[9][..lines[9].len() / 2]);
    fs::write(c2.run_dir().join("predictions.jsonl"), partial).unwrap();

    let summary = execute(&c2).unwrap();
    assert_eq!(summary.queries_skipped, 9);
    assert_eq!(summary.queries_sent, 15);
    let resumed = fs::read_to_string(c2.run_dir().join("predictions.jsonl")).unwrap();
    assert_eq!(strip_latency(&resumed), strip_latency(&full));
}

#[test]
fn missing_backend_script_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    let mut c = config(out.path());
    c.backends[0].mock_script = Some(out.path().join("nope.json"));
    assert!(execute(&c).is_err());
    assert!(!c.run_dir().exists());
}
