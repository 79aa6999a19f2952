mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use taxocap::caption::{read_captions, run_pipeline, PipelineConfig, Stores};
use taxocap::gateway::{BackendConfig, Gateway, MockBackend, ModelRoles};
use taxocap::knowledge::{DescriptionStore, ExampleStore};
use taxocap::CaptionFlag;

fn fixture(name: &str) -> PathBuf {
    common::fixtures().join("caption").join(name)
}

fn stores() -> Stores {
    Stores {
        descriptions: DescriptionStore::load(&fixture("descriptions.jsonl")).unwrap().0,
        examples: ExampleStore::load(&fixture("examples.jsonl")).unwrap().0,
    }
}

fn gateway() -> Gateway {
    let backend = MockBackend::script_file(&fixture("mock_script.jsonl")).unwrap();
    let mut config = BackendConfig::default();
    config.retry.base_backoff = Duration::from_millis(1);
    Gateway::new(Arc::new(backend), config, ModelRoles::single("mock-vlm")).unwrap()
}

fn run(out: &Path, concurrency: usize, resume: bool, max_new: Option<usize>) -> taxocap::RunStats {
    let mut cfg = PipelineConfig::new(out);
    cfg.concurrency = concurrency;
    cfg.resume = resume;
    cfg.max_new_samples = max_new;
    let (path, stats) = run_pipeline(&fixture("manifest.txt"), &stores(), &gateway(), &cfg).unwrap();
    assert_eq!(path, out);
    stats
}

#[test]
fn fifty_samples_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let stats = run(&a, 8, false, None);
    run(&b, 3, false, None);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 50);
    assert_eq!((stats.manifest_samples, stats.total, stats.generated_this_run), (50, 50, 50));
    assert!(stats.complete);

    let records = read_captions(&a).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    let expected: Vec<String> = (1..=50).map(|i| format!("s{i:03}")).collect();
    assert_eq!(ids, expected);

    let by_id = |id: &str| records.iter().find(|r| r.sample_id == id).unwrap();
    assert!(by_id("s007").flags.is_empty());
    assert_eq!(by_id("s007").attempt_count, 2);
    assert!(by_id("s013").flags.contains(&CaptionFlag::MissingSpeciesName));
    assert!(by_id("s021").flags.contains(&CaptionFlag::OverWordLimit));
    assert!(by_id("s034").flags.contains(&CaptionFlag::Empty));
    assert!(by_id("s034").error.is_some());
    assert!(by_id("s042").flags.is_empty(), "common name satisfies the name check");
    assert!(by_id("s044").flags.is_empty(), "genus satisfies the name check");
    assert!(by_id("s028").flags.is_empty());
    assert!(by_id("s001").used_wiki && by_id("s001").used_examples);
    assert!(!by_id("s005").used_wiki);
    assert!(by_id("s008").example_fallback);
    for r in &records {
        assert_eq!((r.temperature, r.top_p), (0.6, 0.8));
        if r.flags.is_empty() {
            assert!(!r.caption.trim().is_empty());
        }
    }
    assert_eq!(stats.errors, 1);
}

#[test]
fn resume_after_kill_at_thirty() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    run(&full, 4, false, None);

    let partial = dir.path().join("partial.jsonl");
    let first = run(&partial, 4, false, Some(30));
    assert_eq!(first.total, 30);
    assert!(!first.complete);
    let head = std::fs::read(&partial).unwrap();

    let second = run(&partial, 4, true, None);
    assert_eq!((second.resumed_from, second.generated_this_run, second.total), (30, 20, 50));
    assert!(second.complete);
    let final_bytes = std::fs::read(&partial).unwrap();
    assert!(final_bytes.starts_with(&head), "records 1-30 untouched");
    assert_eq!(final_bytes, std::fs::read(&full).unwrap());
}

#[test]
fn resume_drops_torn_trailing_line() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    run(&full, 2, false, None);
    let out = dir.path().join("torn.jsonl");
    run(&out, 2, false, Some(30));
    let mut bytes = std::fs::read(&out).unwrap();
    bytes.extend_from_slice(b"{\"sample_id\":\"s03");
    std::fs::write(&out, bytes).unwrap();
    run(&out, 2, true, None);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&full).unwrap());
}

#[test]
fn empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.txt");
    std::fs::write(&manifest, "").unwrap();
    let out = dir.path().join("out.jsonl");
    let (_, stats) = run_pipeline(&manifest, &stores(), &gateway(), &PipelineConfig::new(&out)).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), b"");
    assert_eq!((stats.total, stats.flagged_records, stats.errors), (0, 0, 0));
    assert_eq!((stats.wiki_context_rate, stats.fallback_rate), (0.0, 0.0));
}
