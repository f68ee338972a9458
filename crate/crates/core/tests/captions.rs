use std::collections::BTreeMap;
use std::sync::Arc;

use cytocap::captions::{
    area_sentence, sample_statements, synthesize, unknown_caption, CaptionComposer, CaptionError, LlmComposer,
    StatementPool, TemplateComposer, UNKNOWN_CAPTION,
};
use cytocap::corpus::{distill, fixture, DistillConfig, KeywordExtractor, Statement};
use cytocap::lexicon::first_sentence;
use cytocap::llm::{GenerationRequest, GenerationResponse, LlmError, StubClient, TextGenerator};
use cytocap::{AreaId, AreaLabel, Extracted, LabelLexicon};
use proptest::prelude::*;

fn stmt(area: AreaId, n: usize, text: &str) -> Statement {
    Statement {
        statement_id: format!("{}-{n:04}", area.name()),
        area_id: area,
        text: text.into(),
        doc_id: "doc".into(),
        chunk: 0,
    }
}

fn pool_of(area: AreaId, n: usize) -> StatementPool {
    StatementPool::from_statements((0..n).map(|i| stmt(area, i, &format!("Statement number {i} is here."))))
}

fn fixture_pool() -> StatementPool {
    let fx = fixture::generate(7);
    let cfg = DistillConfig { seeds: fx.seeds.clone(), depth: fixture::DEPTH, ..Default::default() };
    let out = distill(&fx.documents, &fx.citations, &cfg, &KeywordExtractor::default()).unwrap();
    StatementPool::from_statements(out.statements).exclusive(&LabelLexicon::builtin())
}

#[test]
fn sampling_clamps_and_errors() {
    let a = AreaId(3);
    let pool = pool_of(a, 3);
    assert!(sample_statements(&pool, a, 0, 1).unwrap().is_empty());
    let all = sample_statements(&pool, a, 5, 1).unwrap();
    assert_eq!(all.len(), 3);
    let mut ids: Vec<_> = all.iter().map(|s| s.statement_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3);
    assert!(matches!(sample_statements(&pool, AreaId(4), 1, 1), Err(CaptionError::MissingArea(AreaId(4)))));
    assert_eq!(sample_statements(&pool, a, 2, 9).unwrap(), sample_statements(&pool, a, 2, 9).unwrap());
}

#[test]
fn sampling_frequencies_are_uniform() {
    let a = AreaId(10);
    let pool = pool_of(a, 10);
    let trials = 10_000;
    let mut counts = [0usize; 10];
    for t in 0..trials {
        let s = sample_statements(&pool, a, 3, t as u64).unwrap();
        assert_eq!(s.len(), 3);
        for x in s {
            counts[x.statement_id[x.statement_id.len() - 4..].parse::<usize>().unwrap()] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / trials as f64;
        assert!((f - 0.3).abs() < 0.02, "statement {i}: {f}");
    }
}

#[test]
fn template_caption_with_one_statement() {
    let a = AreaId::from_name("FG2").unwrap();
    let s = stmt(a, 1, "Layer IV of FG2 is thin.");
    let c = TemplateComposer::default().compose(a, std::slice::from_ref(&s)).unwrap();
    assert_eq!(c.text, "This patch shows cytoarchitecture of area FG2. Layer IV of FG2 is thin.");
    assert_eq!(first_sentence(&c.text), area_sentence(a));
    assert_eq!(&c.text[area_sentence(a).len() + 1..], s.text);
    assert_eq!(c.statement_ids, ["FG2-0001"]);
    assert_eq!(c.label, AreaLabel::Area(a));
    assert!(matches!(TemplateComposer::default().compose(a, &[]), Err(CaptionError::NoStatements)));
}

#[test]
fn aliases_are_rewritten_to_the_canonical_name() {
    let a = AreaId::from_name("hOc1").unwrap();
    let s = stmt(a, 1, "The striate cortex, also called V1, has a broad layer IV");
    let c = TemplateComposer::default().compose(a, &[s]).unwrap();
    assert!(c.text.ends_with("The hOc1, also called hOc1, has a broad layer IV."), "{}", c.text);
}

#[test]
fn roundtrip_over_every_area() {
    let lex = LabelLexicon::builtin();
    let pool = fixture_pool();
    let composer = TemplateComposer::default();
    for a in AreaId::all() {
        for seed in 0..5 {
            let c = synthesize(AreaLabel::Area(a), &pool, 3, seed, &composer).unwrap();
            assert_eq!(c.statement_ids.len(), 3);
            assert_eq!(lex.extract_label(&c.text), Extracted::Label(AreaLabel::Area(a)), "{}", c.text);
            let named: Vec<AreaId> = lex.areas_mentioned(&c.text).into_iter().collect();
            assert_eq!(named, [a], "{}", c.text);
            assert!(!c.text.to_lowercase().contains("unknown"));
        }
    }
}

#[test]
fn exclusive_pool_drops_cross_area_statements() {
    let a = AreaId::from_name("hOc2").unwrap();
    let b = AreaId::from_name("hOc3d").unwrap();
    let pool = StatementPool::from_statements(vec![
        stmt(a, 1, "Area hOc2 has a thin layer IV."),
        stmt(a, 2, "The border between hOc2 and hOc3d is sharp."),
        stmt(a, 3, "V2 has dense layer III."),
        stmt(b, 1, "The border between hOc2 and hOc3d is sharp."),
    ]);
    let ex = pool.exclusive(&LabelLexicon::builtin());
    let ids: Vec<&str> = ex.get(a).unwrap().iter().map(|s| s.statement_id.as_str()).collect();
    assert_eq!(ids, ["hOc2-0001", "hOc2-0003"]);
    assert!(ex.get(b).is_none());
    let fx = fixture_pool();
    assert_eq!(fx.areas().count(), 57);
}

#[test]
fn pools_reject_misfiled_statements() {
    let a = AreaId(0);
    let mut m = BTreeMap::new();
    m.insert(a, vec![stmt(AreaId(1), 1, "x.")]);
    assert!(matches!(StatementPool::from_map(m), Err(CaptionError::Mismatch { .. })));
}

#[test]
fn unknown_caption_is_fixed() {
    let lex = LabelLexicon::builtin();
    let c = unknown_caption();
    assert_eq!(c.text, "This patch shows cytoarchitecture of an unknown area.");
    assert_eq!(c.text, UNKNOWN_CAPTION);
    assert_eq!(c.text.as_bytes(), unknown_caption().text.as_bytes());
    assert_eq!(lex.extract_label(&c.text), Extracted::Label(AreaLabel::Unknown));
    assert!(lex.areas_mentioned(&c.text).is_empty());
    let via = synthesize(AreaLabel::Unknown, &StatementPool::default(), 3, 0, &TemplateComposer::default()).unwrap();
    assert_eq!(via, c);
}

proptest! {
    #[test]
    fn template_synthesis_is_pure(area in 0u16..57, seed in any::<u64>()) {
        let pool = pool_of(AreaId(area), 6);
        let c = TemplateComposer::default();
        let x = synthesize(AreaLabel::Area(AreaId(area)), &pool, 3, seed, &c).unwrap();
        let y = synthesize(AreaLabel::Area(AreaId(area)), &pool, 3, seed, &c).unwrap();
        prop_assert_eq!(x, y);
    }
}

struct Failing;

impl TextGenerator for Failing {
    fn complete(&self, _: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        Err(LlmError::Status { status: 503, body: String::new() })
    }
}

#[test]
fn llm_composer_keeps_the_label_sentence() {
    let lex = LabelLexicon::builtin();
    let a = AreaId::from_name("PFm").unwrap();
    let s = [stmt(a, 1, "Area PFm has a broad layer III.")];
    let c = LlmComposer::new(Arc::new(StubClient), 3).compose(a, &s).unwrap();
    assert!(c.text.starts_with(&area_sentence(a)));
    assert_eq!(lex.extract_label(&c.text), Extracted::Label(AreaLabel::Area(a)));
    let err = LlmComposer::new(Arc::new(Failing), 3).compose(a, &s).unwrap_err();
    assert!(err.is_retryable());
}
