mod common;

use std::fs::File;
use std::io::BufReader;

use recgen::corpus::{
    extract_instances, load_catalog, parse_dialogues, DialogueFormat, ItemCatalog, SkipReason, Split,
};
use recgen::pipeline::{run_pipeline, Stage};

use common::{fixture, fixture_config};

fn catalog() -> ItemCatalog {
    load_catalog(BufReader::new(File::open(fixture("catalog.jsonl")).unwrap())).unwrap()
}

/// (parsed dialogues, parse errors, instance ids, skip reasons)
fn ingest(name: &str, format: DialogueFormat, split: Split) -> (usize, usize, Vec<String>, Vec<SkipReason>) {
    let parsed = parse_dialogues(BufReader::new(File::open(fixture(name)).unwrap()), format);
    let errors = parsed.iter().filter(|r| r.is_err()).count();
    let dialogues: Vec<_> = parsed.into_iter().filter_map(Result::ok).collect();
    let extraction = extract_instances(&dialogues, &catalog(), split);
    (
        dialogues.len(),
        errors,
        extraction.instances.into_iter().map(|i| i.instance_id).collect(),
        extraction.skipped.entries.into_iter().map(|e| e.reason).collect(),
    )
}

#[test]
fn redial_mini() {
    let (dialogues, errors, ids, skipped) = ingest("redial_train.jsonl", DialogueFormat::Redial, Split::Train);
    assert_eq!((dialogues, errors), (3, 0));
    // 121 is first mentioned by the seeker, so the recommender's repeat does not count
    assert_eq!(ids, ["20001:1:101", "20001:3:105", "20002:1:124"]);
    assert_eq!(skipped, [SkipReason::UnresolvedItem]);

    let (dialogues, errors, ids, _) = ingest("redial_test.jsonl", DialogueFormat::Redial, Split::Test);
    assert_eq!((dialogues, errors), (2, 1));
    assert_eq!(ids, ["30001:1:110", "30002:1:112"]);
}

#[test]
fn inspired_mini() {
    let (dialogues, errors, ids, skipped) = ingest("inspired_train.jsonl", DialogueFormat::Inspired, Split::Train);
    assert_eq!((dialogues, errors), (3, 0));
    assert_eq!(ids, ["i-1:2:127", "i-1:4:128", "i-2:1:120", "i-3:2:114"]);
    assert!(skipped.is_empty());

    let (_, _, ids, _) = ingest("inspired_test.jsonl", DialogueFormat::Inspired, Split::Test);
    assert_eq!(ids, ["i-4:1:124", "i-5:1:131"]);
}

#[test]
fn canonical_fixture() {
    let (dialogues, _, ids, skipped) = ingest("train.jsonl", DialogueFormat::Canonical, Split::Train);
    assert_eq!(dialogues, 5);
    assert_eq!(ids.len(), 6);
    assert_eq!(skipped, [SkipReason::UnresolvedItem]);
}

#[test]
fn ingest_stage_reports_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = fixture_config(dir.path());
    config.data.format = DialogueFormat::Redial;
    config.data.train = "redial_train.jsonl".into();
    config.data.test = "redial_test.jsonl".into();
    let manifest = run_pipeline(config, &[Stage::Ingest]).unwrap();
    let stats = &manifest.stages[0].stats["splits"];
    assert_eq!(stats["train"]["instances"], 3);
    assert_eq!(stats["test"]["parse_errors"].as_array().unwrap().len(), 1);
}
