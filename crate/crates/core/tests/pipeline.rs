mod common;

use std::collections::BTreeMap;
use std::path::Path;

use recgen::eval::EvalReport;
use recgen::item_generator::{GTrainingRecord, Recommendation};
use recgen::jsonl;
use recgen::pipeline::{
    read_manifest, run_pipeline, run_with, EvalKind, Negatives, PipelineError, Runner, Stage, CANDIDATES_FILE,
    EVAL_RECALL_FILE, EVAL_RECOMMEND_FILE, G_TRAIN_FILE, MANIFEST_FILE, QR_REJECTED_FILE, QR_TRAIN_FILE,
    RECOMMENDATIONS_FILE,
};
use recgen::query_expert::QrTrainingRecord;

use common::{fixture_config, read};

/// File name -> contents for every file under `dir` except the manifest,
/// which records timings.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(fixture_config(dir.path()), &Stage::ALL).unwrap();
    assert_eq!(manifest.stages.len(), Stage::ALL.len());
    manifest.verify().unwrap();
    for stage in Stage::ALL {
        assert!(dir.path().join(stage.primary_artifact()).exists(), "{stage}");
    }

    let ingest = &manifest.stages[0];
    let splits = &ingest.stats["splits"];
    assert_eq!(splits["train"]["instances"], 6);
    assert_eq!(splits["test"]["instances"], 4);
    assert_eq!(splits["train"]["skipped"].as_array().unwrap().len(), 1);

    let qr: Vec<QrTrainingRecord> =
        jsonl::read_from(std::io::Cursor::new(read(&dir.path().join(QR_TRAIN_FILE))), "qr").unwrap().records;
    // the conversation may name the truth; only the instruction must not
    assert_eq!(qr.len(), 6);
    let rejected = read(&dir.path().join(QR_REJECTED_FILE));
    assert_eq!(rejected.lines().filter(|l| !l.starts_with("{\"header\"")).count(), 0);

    let g = read(&dir.path().join(G_TRAIN_FILE));
    let records: Vec<GTrainingRecord> = g.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_eq!(r.candidate_ids.len(), 6);
        assert!(r.candidate_ids.contains(&r.label_item_id));
    }

    let recs: Vec<Recommendation> = jsonl::read_file(&dir.path().join(RECOMMENDATIONS_FILE)).unwrap().records;
    assert_eq!(recs.len(), 4);
    let report = EvalReport::read_jsonl(std::io::Cursor::new(read(&dir.path().join(EVAL_RECOMMEND_FILE)))).unwrap();
    assert!(report.metric("hallucinated").unwrap() >= 0.25);
    let recall = EvalReport::read_jsonl(std::io::Cursor::new(read(&dir.path().join(EVAL_RECALL_FILE)))).unwrap();
    for name in ["recall@1", "recall@5", "recall@10"] {
        assert!(recall.metric(name).is_some(), "{name}");
    }

    let reread = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reread.stages.len(), manifest.stages.len());
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(fixture_config(a.path()), &Stage::ALL).unwrap();
    run_pipeline(fixture_config(b.path()), &Stage::ALL).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }
}

#[test]
fn seed_changes_only_seeded_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(fixture_config(a.path()), &Stage::ALL).unwrap();
    let mut config = fixture_config(b.path());
    config.seed += 1;
    run_pipeline(config, &Stage::ALL).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    // headers carry the seed; compare the records only
    let body = |bytes: &Vec<u8>| -> String {
        String::from_utf8_lossy(bytes)
            .lines()
            .filter(|l| !l.starts_with("{\"header\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    for name in ["instances.jsonl", "queries.jsonl", "retrieved.jsonl", "recommendations.jsonl", "index.rgix"] {
        assert_eq!(body(&sa[name]), body(&sb[name]), "{name}");
    }
    let candidates = |s: &BTreeMap<String, Vec<u8>>| -> Vec<serde_json::Value> {
        body(&s[CANDIDATES_FILE]).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let (ca, cb) = (candidates(&sa), candidates(&sb));
    let members = |v: &[serde_json::Value]| -> Vec<Vec<String>> {
        v.iter()
            .map(|c| {
                let mut m: Vec<String> = serde_json::from_value(c["members"].clone()).unwrap();
                m.sort();
                m
            })
            .collect()
    };
    assert_eq!(members(&ca), members(&cb), "hard negatives do not depend on the seed");
}

#[test]
fn random_negatives_follow_the_seed() {
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        config.seed = seed;
        config.modes.negatives = Negatives::Random;
        run_pipeline(config, &[Stage::Ingest, Stage::GenGData]).unwrap();
        read(&dir.path().join(G_TRAIN_FILE))
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn missing_prerequisite_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    run_pipeline(config.clone(), &[Stage::Ingest]).unwrap();
    let err = run_pipeline(config, &[Stage::Retrieve]).unwrap_err();
    assert!(matches!(err, PipelineError::MissingPrerequisite { requires: Stage::BuildIndex, .. }));
    assert!(err.to_string().contains("requires build-index"), "{err}");
}

#[test]
fn ingest_alone_records_one_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(fixture_config(dir.path()), &[Stage::Ingest]).unwrap();
    assert_eq!(manifest.artifacts().count(), 1);
}

#[test]
fn forced_inclusion_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    run_pipeline(config.clone(), &Stage::ALL).unwrap();
    let runner = Runner::new(config).unwrap().with_eval_kinds(vec![EvalKind::Forced]);
    let manifest = run_with(runner, &[Stage::Evaluate]).unwrap();
    let forced = &manifest.stages[0].stats["forced"];
    let overall = forced["overall_success"]["value"].as_f64().unwrap();
    let item = forced["item_generation_success"]["value"].as_f64().unwrap();
    assert!(item >= overall);
    assert!(dir.path().join("eval_forced_k10.jsonl").exists());
}

#[test]
fn cot_and_direct_modes_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = fixture_config(dir.path());
    config.modes.cot = true;
    config.modes.query_mode = "direct".parse().unwrap();
    let manifest = run_pipeline(config, &Stage::ALL).unwrap();
    manifest.verify().unwrap();
    let g = read(&dir.path().join(G_TRAIN_FILE));
    assert!(g.contains("The seeker asks for"));
}
