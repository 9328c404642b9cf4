use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn radpert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radpert")).args(args).output().unwrap()
}

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/synthetic/reports.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn label_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("labels.csv");
    let evidence = dir.path().join("evidence.jsonl");
    let run = radpert(&[
        "label",
        "--graphs",
        s(&corpus()),
        "--out",
        s(&out),
        "--evidence",
        s(&evidence),
        "--induced",
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    assert!(String::from_utf8_lossy(&run.stdout).contains("Cardiomegaly"));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("labels.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["matcher_mode"], "induced");
    assert_eq!(meta["config"]["matcher"]["induced"], true);
    assert_eq!(meta["rules_sha256"].as_str().unwrap().len(), 64);
    assert!(fs::read_to_string(evidence).unwrap().lines().count() > 20);
}

#[test]
fn corrupt_input_names_the_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"r1\": {\"text\": \"x\", \"entities\": {},}}").unwrap();
    let run = radpert(&["label", "--graphs", s(&bad), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("byte"), "{}", stderr(&run));
}

#[test]
fn per_report_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mixed = dir.path().join("mixed.json");
    fs::write(
        &mixed,
        r#"{"good": {"text": "No effusion .", "entities": {"1": {"tokens": "effusion", "label": "OBS-DA", "start_ix": 1, "end_ix": 1, "relations": []}}},
            "bad": {"text": "x", "entities": {"1": {"tokens": "x", "label": "OBS-DP", "start_ix": 0, "end_ix": 0, "relations": [["modify", "9"]]}}}}"#,
    )
    .unwrap();
    let out = dir.path().join("o.csv");
    let run = radpert(&["label", "--graphs", s(&mixed), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
    assert!(stderr(&run).contains("bad"));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 2);
}

#[test]
fn eval_reports_misaligned_ids() {
    let dir = tempfile::tempdir().unwrap();
    let header = "report_id,Atelectasis,Cardiomegaly,Consolidation,Edema,Enlarged Cardiomediastinum,Fracture,Lung Lesion,Lung Opacity,Pleural Effusion,Pleural Other,Pneumonia,Pneumothorax,Support Devices\n";
    let pred = dir.path().join("pred.csv");
    let gold = dir.path().join("gold.csv");
    fs::write(&pred, format!("{header}a,1.0,,,,,,,,,,,,\nextra_id,,,,,,,,,,,,,\n")).unwrap();
    fs::write(&gold, format!("{header}a,1.0,,,,,,,,,,,,\nmissing_id,,,,,,,,,,,,,\n")).unwrap();
    let run = radpert(&[
        "eval",
        "--pred",
        s(&pred),
        "--gold",
        s(&gold),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(run.status.code(), Some(1));
    let err = stderr(&run);
    assert!(err.contains("missing_id") && err.contains("extra_id"), "{err}");
}

#[test]
fn rules_export_validates() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("starter.rules");
    assert!(radpert(&["rules", "export", "--out", s(&file)]).status.success());
    let run = radpert(&["rules", "validate", s(&file)]);
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).contains("0 errors"));
}

#[test]
fn oversized_rule_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("big.rules");
    let mut text = String::from("rule big edema mention\nnode a OBS \"edema\" anchor\n");
    for n in ["b", "c", "d", "e"] {
        text.push_str(&format!("node {n} ANY \".*\"\nedge {n} -any-> a\n"));
    }
    fs::write(&file, text).unwrap();
    let run = radpert(&["rules", "validate", s(&file)]);
    assert_eq!(run.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("big") && stdout.contains("1 errors"), "{stdout}");
}
