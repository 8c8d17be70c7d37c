use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesionkit::battery::Subtest;
use lesionkit::lesion::Strategy;
use lesionkit::model::ComponentKind;
use lesionkit::records::{read_records, RecordStatus, RecordStore, ScoredRecord};
use lesionkit::scoring::{surface_features, SymptomSchema, SymptomVector};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lesionkit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BATTERY: &str = r#"[
  {"prompt_id": "a", "subtest": "connected_text", "text": "Tell me about your home"},
  {"prompt_id": "b", "subtest": "repetition", "text": "Repeat: the cat sat", "expected_repetition_target": "the cat sat"},
  {"prompt_id": "c", "subtest": "sentence_comprehension", "text": "Is a dog an animal?"}
]"#;

/// A small toy sweep: one layer, three components, three prompts.
fn write_config(dir: &Path, severities: &str, extra: &str) -> PathBuf {
    fs::write(dir.join("battery.json"), BATTERY).unwrap();
    let cfg = format!(
        r#"{{
  "schema_version": 1,
  "model_id": "toy-small",
  "model": {{"toy": {{"vocab_size": 258, "d_model": 16, "n_layers": 2, "n_heads": 2, "d_ffn": 24, "init_seed": 3}}}},
  "battery": "battery.json",
  "components": ["query", "value", "down"],
  "layers": [1],
  "severities": {severities},
  "decode": {{"max_new_tokens": 12}}{extra}
}}"#
    );
    let path = dir.join("sweep.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn sweep_is_resumable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0.0, 0.5, 1.0]", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run(&["sweep", "--config", s(&cfg), "--store", s(&a), "--jobs", "3"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    // Intact baseline plus 3 components x 3 severities, over 3 prompts.
    assert_eq!(summary["n_conditions"], 10);
    assert_eq!(summary["n_new_records"], 30);

    let again = run(&["sweep", "--config", s(&cfg), "--store", s(&a)]);
    assert_eq!(code(&again), 0);
    let summary: serde_json::Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(summary["n_new_records"], 0);
    assert_eq!(summary["n_skipped"], 30);

    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--store", s(&b), "--jobs", "1"])), 0);
    for f in ["records.jsonl", "proxies.jsonl", "run.json", "MANIFEST.sha256"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn sweep_resumes_an_interrupted_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0.5]", "");
    let full = dir.path().join("full");
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--store", s(&full)])), 0);
    let rows = read_records(&full.join("records.jsonl")).unwrap();

    // Keep the first five rows only, as if the sweep had been killed.
    let part = dir.path().join("part");
    fs::create_dir_all(&part).unwrap();
    let text = fs::read_to_string(full.join("records.jsonl")).unwrap();
    let head: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(part.join("records.jsonl"), head).unwrap();
    let out = run(&["sweep", "--config", s(&cfg), "--store", s(&part)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n_new_records"], rows.len() - 5);
    let resumed = read_records(&part.join("records.jsonl")).unwrap();
    let key = |r: &ScoredRecord| (r.generation_key(), r.response_text.clone());
    let mut x: Vec<_> = rows.iter().map(key).collect();
    let mut y: Vec<_> = resumed.iter().map(key).collect();
    x.sort();
    y.sort();
    assert_eq!(x, y);
}

#[test]
fn zero_severity_matches_intact_for_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0.0]", r#", "proxies": false"#);
    let store = dir.path().join("st");
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--store", s(&store)])), 0);
    let rows = read_records(&store.join("records.jsonl")).unwrap();
    assert_eq!(rows.len(), 3 + 3 * 3);
    for prompt in ["a", "b", "c"] {
        let texts: Vec<&str> = rows
            .iter()
            .filter(|r| r.prompt_id == prompt)
            .map(|r| r.response_text.as_str())
            .collect();
        assert_eq!(texts.len(), 4);
        assert!(texts.iter().all(|t| *t == texts[0]), "{prompt}: {texts:?}");
    }
    assert!(!store.join("proxies.jsonl").exists());
}

#[test]
fn usage_and_environment_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["analyze", "no-such-analysis", "--store", "x", "--out", s(&out)])), 64);
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);

    let missing = dir.path().join("nothing-here");
    assert_eq!(code(&run(&["analyze", "cooccur", "--store", s(&missing), "--out", s(&out)])), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 9, "model_id": "m", "model": {"bundle": "b"}}"#).unwrap();
    assert_eq!(code(&run(&["sweep", "--config", s(&bad), "--store", s(&out)])), 64);

    let severity = write_config(dir.path(), "[1.5]", "");
    assert_eq!(code(&run(&["sweep", "--config", s(&severity), "--store", s(&out)])), 64);

    let bundle = dir.path().join("bundle.json");
    fs::write(&bundle, r#"{"schema_version": 1, "model_id": "m", "model": {"bundle": "absent-dir"}}"#).unwrap();
    assert_eq!(code(&run(&["sweep", "--config", s(&bundle), "--store", s(&out)])), 2);
}

fn one_record_store(dir: &Path) {
    let schema = SymptomSchema::default_schema();
    let p = lesionkit::battery::PromptItem::connected_text("p", "hello");
    let rec = ScoredRecord {
        model_id: "m".into(),
        layer: Some(0),
        component: Some(ComponentKind::Gate),
        severity: 0.5,
        strategy: Strategy::Zero,
        base_seed: 0,
        mask_seed: 1,
        prompt_id: "p".into(),
        subtest: Subtest::ConnectedText,
        decode_fingerprint: "f".into(),
        response_text: "hi there".into(),
        token_count: 8,
        status: RecordStatus::Ok,
        symptoms: SymptomVector::scored("t", vec![false; schema.len()]),
        features: surface_features(&p, "hi there"),
        timestamp: 0,
    };
    RecordStore::open(dir).unwrap().append(&[rec], Some(schema.len())).unwrap();
}

#[test]
fn insufficient_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("st");
    one_record_store(&store);
    let out = dir.path().join("out");
    for a in ["cooccur", "profile-contrast", "effect-size", "depth", "match-dose"] {
        let o = run(&["analyze", a, "--store", s(&store), "--out", s(&out)]);
        assert_eq!(code(&o), 3, "{a}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!String::from_utf8_lossy(&o.stderr).trim().is_empty());
    }
}

#[test]
fn profile_contrast_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let store = fixtures().join("synth_small");
    let args = [
        "analyze",
        "profile-contrast",
        "--store",
        s(&store),
        "--out",
        s(dir.path()),
        "--seed",
        "11",
        "--n-resamples",
        "1000",
        "--n-flips",
        "1000",
        "--n-perm",
        "1000",
    ];
    assert_eq!(code(&run(&args)), 0);
    for f in ["profile-contrast.json", "profile-contrast.csv"] {
        let golden = fs::read_to_string(fixtures().join("golden").join(f)).unwrap();
        let got = fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(got, golden, "{f} drifted from the golden file");
    }
}

#[test]
fn every_analysis_runs_on_the_fixture_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let store = fixtures().join("synth_small");
    let out = dir.path().join("analyses");
    let small = ["--n-resamples", "200", "--n-flips", "200", "--n-perm", "200"];
    let mut ran = 0;
    for a in ["profile-contrast", "match-visible", "residualize"] {
        let mut args = vec!["analyze", a, "--store", s(&store), "--out", s(&out)];
        args.extend(small);
        assert_eq!(code(&run(&args)), 0, "{a}");
        ran += 1;
    }
    for (a, extra) in [
        ("cooccur", vec!["--n-perm", "200"]),
        ("depth", vec!["--n-perm", "200", "--severity-min", "0.5", "--n-bins", "2"]),
        ("match-dose", vec!["--proxy", "joint", "--scope", "same-model"]),
        ("effect-size", vec![]),
    ] {
        let mut args = vec!["analyze", a, "--store", s(&store), "--out", s(&out)];
        args.extend(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{a}: {}", String::from_utf8_lossy(&o.stderr));
        ran += 1;
    }
    for a in ["profile-contrast", "cooccur", "depth", "effect-size"] {
        let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(format!("{a}.json"))).unwrap()).unwrap();
        assert_eq!(doc["analysis"], a);
        assert!(doc["seed"].is_u64() && doc["parameters"].is_object() && doc["inputs"][0]["records_sha256"].is_string());
        let csv = fs::read_to_string(out.join(format!("{a}.csv"))).unwrap();
        assert!(csv.lines().count() > 1);
    }

    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        let o = run(&["report", "--store", s(&store), "--analyses", s(&out), "--out", s(r)]);
        assert_eq!(code(&o), 0);
    }
    let md = fs::read_to_string(r1.join("report.md")).unwrap();
    assert_eq!(md, fs::read_to_string(r2.join("report.md")).unwrap());
    assert_eq!(md.matches("- seed: ").count(), ran);
    assert_eq!(md.matches("_Absent:").count(), 9 - ran);
    assert!(md.contains("manifest sha256"));
    assert_eq!(fs::read_dir(r1.join("tables")).unwrap().count(), ran);
}

#[test]
fn empty_analyses_give_all_absent_sections() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("none");
    fs::create_dir_all(&empty).unwrap();
    let o = run(&["report", "--analyses", s(&empty), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 0);
    let md = fs::read_to_string(dir.path().join("r/report.md")).unwrap();
    assert_eq!(md.matches("_Absent:").count(), 9);
}

#[test]
fn map_human_and_likelihood_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = fixtures().join("synth_small");
    let schema = SymptomSchema::default_schema();
    let names: Vec<&str> = schema.common_indices().iter().map(|&i| schema.symptoms()[i].name.as_str()).collect();
    let mut csv = csv::Writer::from_path(dir.path().join("ref.csv")).unwrap();
    let mut header = vec!["group", "cluster"];
    header.extend(&names);
    csv.write_record(&header).unwrap();
    for i in 0..40usize {
        let group = if i % 2 == 0 { "fluent" } else { "nonfluent" };
        let cluster = format!("corpus{}", i % 4);
        let mut row = vec![group.to_string(), cluster];
        row.extend((0..names.len()).map(|j| (((i * 7 + j * 3) % 5) == 0) as u8).map(|b| b.to_string()));
        csv.write_record(&row).unwrap();
    }
    csv.flush().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "analyze",
        "map-human",
        "--store",
        s(&store),
        "--out",
        s(&out),
        "--reference",
        s(&dir.path().join("ref.csv")),
        "--n-boot",
        "100",
        "--n-perm",
        "100",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("map-human.json")).unwrap()).unwrap();
    assert_eq!(doc["result"]["cosine"]["cells"].as_array().unwrap().len(), 2 * 7);
    assert!(doc["result"]["category_bootstrap"].is_object());

    fs::write(
        dir.path().join("texts.csv"),
        "population,prompt,response\n\
         a,Tell me about your home,I live in a small house\n\
         a,Tell me about your home,It has a garden\n\
         b,Tell me about your home,house house house\n\
         b,Tell me about your home,the the the the\n",
    )
    .unwrap();
    let cfg = write_config(dir.path(), "[0.5]", "");
    let o = run(&[
        "analyze",
        "likelihood",
        "--config",
        s(&cfg),
        "--texts",
        s(&dir.path().join("texts.csv")),
        "--lesion",
        "1:down:0.5",
        "--out",
        s(&out),
        "--n-resamples",
        "100",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("likelihood.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    let o = run(&[
        "analyze",
        "likelihood",
        "--config",
        s(&cfg),
        "--texts",
        s(&dir.path().join("texts.csv")),
        "--lesion",
        "9:down",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 64);
}
