//! Model-judged decision change classification.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

fn emosim(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_emosim"))
        .args(args)
        .env("EMOSIM_LOG", "error")
        .output()
        .expect("spawn emosim");
    assert!(out.status.success(), "emosim failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Judge script: rewordings on the house floors step are the same decision,
/// anything else judged is different.
fn write_judge(dir: &Path) -> PathBuf {
    std::fs::write(
        dir.join("judge_mock.jsonl"),
        concat!(
            r#"{"prompt": "Agree on the number of floors", "responses": ["SAME"], "cycle": true}"#,
            "\n",
            r#"{"tag": "change_judgment", "responses": ["DIFFERENT"], "cycle": true}"#,
            "\n"
        ),
    )
    .unwrap();
    let config = dir.join("judge.toml");
    std::fs::write(
        &config,
        "seed = 0\n\n[backend]\nkind = \"mock\"\nmodel_name = \"judge\"\nscript_path = \"judge_mock.jsonl\"\n",
    )
    .unwrap();
    config
}

/// The golden group run with every unchanged "two floors" agreement reworded.
fn reworded_runs(dir: &Path) -> PathBuf {
    let golden = tests_dir().join("golden/group");
    std::fs::copy(golden.join("group.json"), dir.join("group.json")).unwrap();
    let mut out = String::new();
    for line in std::fs::read_to_string(golden.join("paired_runs.jsonl")).unwrap().lines() {
        let mut set: serde_json::Value = serde_json::from_str(line).unwrap();
        for run in set["runs"].as_array_mut().unwrap() {
            for d in run["record"]["decisions"].as_array_mut().into_iter().flatten() {
                if d["summary"] == "two floors" && d["resolution"] == "agreement" {
                    d["summary"] = "Two storeys".into();
                }
            }
        }
        out.push_str(&set.to_string());
        out.push('\n');
    }
    let path = dir.join("paired_runs.jsonl");
    std::fs::write(&path, out).unwrap();
    path
}

fn row(report: &str, name: &str) -> u32 {
    let line = report.lines().find(|l| l.trim_start().starts_with(name)).unwrap();
    line.split_whitespace().rev().nth(1).unwrap().parse().unwrap()
}

#[test]
fn judged_analysis_reclassifies_only_reworded_decisions() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_judge(tmp.path());
    let runs = reworded_runs(tmp.path());
    let rules = String::from_utf8(emosim(&["analyze-changes", "--paired-runs", s(&runs)]).stdout).unwrap();
    let judged = String::from_utf8(
        emosim(&["analyze-changes", "--paired-runs", s(&runs), "--judge", s(&config)]).stdout,
    )
    .unwrap();
    assert!(judged.contains("reworded decisions judged by model"));
    assert!(!rules.contains("judged by model"));
    assert_eq!((row(&rules, "details"), row(&rules, "no change")), (13, 6));
    // Two house rewordings are judged the same; the shed step text differs.
    assert_eq!((row(&judged, "details"), row(&judged, "no change")), (11, 8));
    for name in ["undecided", "decided", "authority", "majority", "compromise"] {
        assert_eq!(row(&judged, name), row(&rules, name), "{name}");
    }
}

#[test]
fn group_config_can_enable_the_judge() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = tests_dir().join("fixtures");
    std::fs::copy(fixtures.join("members.json"), tmp.path().join("members.json")).unwrap();
    let mut mock = std::fs::read_to_string(fixtures.join("group_mock.jsonl")).unwrap();
    mock.insert_str(0, "{\"tag\": \"change_judgment\", \"responses\": [\"SAME\"], \"cycle\": true}\n");
    std::fs::write(tmp.path().join("group_mock.jsonl"), mock).unwrap();
    let toml = std::fs::read_to_string(fixtures.join("group.toml"))
        .unwrap()
        .replace("n_runs = 2\n", "n_runs = 2\njudge_changes = true\n");
    let config = tmp.path().join("group.toml");
    std::fs::write(&config, toml).unwrap();
    let run = tmp.path().join("run");
    emosim(&["simulate-group", "--config", s(&config), "--run-dir", s(&run)]);
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(report.contains("reworded decisions judged by model"));
    let golden = std::fs::read_to_string(tests_dir().join("golden/group/report.txt")).unwrap();
    for name in ["details", "compromise", "no change"] {
        assert_eq!(row(&report, name), row(&golden, name), "{name}");
    }
}
