use std::path::Path;

use stylecraft::corpus::make_toy_corpus;
use stylecraft::manifest::CachedKeywords;
use stylecraft::reasoning::{KeywordCache, MockVlmClient, ScriptedVlmClient};
use stylecraft::trainer::{run_full_pipeline, ContentReferenceCache, PipelineContext, RunLayout, Stage};
use stylecraft::{Error, StyleCategoryManifest, ToyBackbone, TrainingConfig};

fn config() -> TrainingConfig {
    TrainingConfig {
        stage1_steps: 6,
        stage1_lr: 5e-3,
        stage2_steps: 4,
        stage2_lr: 5e-3,
        image_size: 16,
        sample_steps: 5,
        content_refs_per_object: 1,
        ..Default::default()
    }
}

fn context(out: &Path, run: &str) -> PipelineContext {
    PipelineContext {
        run: RunLayout::new(out.join(run)),
        keyword_cache: KeywordCache::new(out.join("cache/keywords")),
        content_cache: ContentReferenceCache::new(out.join("cache/content_refs")),
        force_refresh_keywords: false,
    }
}

fn corpus(dir: &Path) -> StyleCategoryManifest {
    make_toy_corpus(&dir.join("corpus"), 1, 5).unwrap().remove(0).1
}

fn base() -> ToyBackbone {
    ToyBackbone::new(Default::default()).unwrap()
}

#[test]
fn rerun_resumes_every_stage_without_vlm_calls() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let vlm = MockVlmClient::default();
    let ctx = context(dir.path(), "r");
    let first = run_full_pipeline(base(), &m, &config(), &vlm, &ctx).unwrap();
    assert_eq!(vlm.calls(), 1);
    assert!(first.resumed.is_empty());
    assert_eq!(first.records.len(), 10);
    assert_eq!(first.records.iter().filter(|r| r.stage == Stage::One).count(), 6);
    assert_eq!(first.records.last().unwrap().step, 10);

    let again = run_full_pipeline(base(), &m, &config(), &vlm, &ctx).unwrap();
    assert_eq!(vlm.calls(), 1, "warm keyword cache must not call the VLM");
    assert_eq!(again.resumed, ["init", "stage1", "stage2"]);
    assert_eq!(again.final_checkpoint, first.final_checkpoint);
    assert_eq!(again.records, first.records);
}

#[test]
fn interrupted_run_finishes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let vlm = MockVlmClient::default();
    let full = run_full_pipeline(base(), &m, &config(), &vlm, &context(dir.path(), "full")).unwrap();

    let ctx = context(dir.path(), "cut");
    run_full_pipeline(base(), &m, &config(), &vlm, &ctx).unwrap();
    std::fs::remove_file(ctx.run.stage2_checkpoint()).unwrap();
    let resumed = run_full_pipeline(base(), &m, &config(), &vlm, &ctx).unwrap();
    assert_eq!(resumed.resumed, ["init", "stage1"]);
    assert_eq!(
        std::fs::read(ctx.run.stage2_checkpoint()).unwrap(),
        std::fs::read(context(dir.path(), "full").run.stage2_checkpoint()).unwrap()
    );
    assert_eq!(resumed.records, full.records);
    let logged = std::fs::read_to_string(ctx.run.records_log()).unwrap();
    assert_eq!(logged.lines().count(), 10);
}

#[test]
fn changed_config_in_same_run_root_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let vlm = MockVlmClient::default();
    let ctx = context(dir.path(), "r");
    run_full_pipeline(base(), &m, &config(), &vlm, &ctx).unwrap();
    let other = TrainingConfig {
        lambda2: 0.5,
        ..config()
    };
    let err = run_full_pipeline(base(), &m, &other, &vlm, &ctx).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[test]
fn manifest_keywords_skip_the_vlm() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = corpus(dir.path());
    m.cached_keywords = Some(CachedKeywords {
        keywords: "bold stripes".into(),
        raw_response: String::new(),
    });
    let vlm = MockVlmClient::default();
    let out = run_full_pipeline(base(), &m, &config(), &vlm, &context(dir.path(), "r")).unwrap();
    assert_eq!(vlm.calls(), 0);
    assert_eq!(out.keywords.keywords(), "bold stripes");
    assert_eq!(out.span.source_keywords, "bold stripes");
}

#[test]
fn keyword_failure_is_labelled_with_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let vlm = ScriptedVlmClient::new(vec!["no".into(), "still no".into()], 1);
    let err = run_full_pipeline(base(), &m, &config(), &vlm, &context(dir.path(), "r")).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(*stage, "keywords"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(err.root(), Error::ExtractionFailed { attempts: 2, .. }));
    assert_eq!(err.kind(), "extraction-failed");
    assert!(!context(dir.path(), "r").run.init_checkpoint().exists());
}

#[test]
fn spans_survive_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let out = run_full_pipeline(base(), &m, &config(), &MockVlmClient::default(), &context(dir.path(), "r")).unwrap();
    let restored = out.final_checkpoint.to_toy().unwrap();
    assert_eq!(stylecraft::Backbone::spans(&restored), std::slice::from_ref(&out.span));
    assert_eq!(
        stylecraft::Backbone::fingerprint(&restored),
        stylecraft::Backbone::fingerprint(&out.backbone)
    );
}
