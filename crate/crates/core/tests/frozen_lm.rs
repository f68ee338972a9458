use std::collections::HashMap;

use cytocap::checkpoint::{self, CheckpointError, Container, TAG_LM};
use cytocap::lm::vocab::{BOS, EOS, SPECIAL_TOKENS, UNK};
use cytocap::lm::{greedy_decode, normalize, FrozenLm, LanguageModel, LmConfig, LmError, Vocab};
use cytocap::Tensor;
use proptest::prelude::*;

const CAPTIONS: &str = include_str!("fixtures/captions.txt");

fn small_config(vocab: usize) -> LmConfig {
    LmConfig { vocab_size: vocab, hidden_dim: 16, num_blocks: 8, num_heads: 2, max_seq_len: 24, mlp_dim: 32, seed: 11 }
}

/// Word counts computed by whitespace splitting, then peeling punctuation.
fn count_words(lines: &[&str]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for line in lines {
        for piece in line.split_whitespace() {
            let lower = piece.to_lowercase();
            for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
                *counts.entry(word.to_string()).or_insert(0) += 1;
            }
            for c in lower.chars().filter(|c| !c.is_alphanumeric()) {
                *counts.entry(c.to_string()).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[test]
fn vocab_size_matches_counting_oracle() {
    let lines: Vec<&str> = CAPTIONS.lines().collect();
    let counts = count_words(&lines);
    for min_count in [1, 2, 3, 5] {
        let v = Vocab::build(&lines, min_count).unwrap();
        let expected = counts.values().filter(|&&c| c >= min_count).count();
        assert_eq!(v.len(), SPECIAL_TOKENS.len() + expected, "min_count {min_count}");
        for (w, &c) in &counts {
            assert_eq!(v.id(w).is_some(), c >= min_count, "{w}");
        }
    }
}

#[test]
fn vocab_small_example() {
    let v = Vocab::build(&["a b", "a"], 1).unwrap();
    let mut expected: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    expected.extend(["a".to_string(), "b".to_string()]);
    assert_eq!(v.tokens(), expected.as_slice());
}

#[test]
fn encode_decode_roundtrip() {
    let lines: Vec<&str> = CAPTIONS.lines().collect();
    let v = Vocab::build(&lines, 1).unwrap();
    assert!(v.encode("").is_empty());
    assert_eq!(v.decode(&[]), "");
    for line in &lines {
        assert_eq!(v.decode(&v.encode(line)), normalize(line));
    }
    let ids = v.encode("Layer IV is purple.");
    assert_eq!(ids[3], UNK);
    assert_eq!(v.decode(&ids), "layer iv is <unk> .");
}

#[test]
fn forward_shape_and_length_limit() {
    let lm = FrozenLm::init(small_config(40)).unwrap();
    let logits = lm.logits(&[BOS]).unwrap();
    assert_eq!(logits.shape(), &[1, 40]);
    assert!(logits.is_finite());
    let long = vec![5; 25];
    assert!(matches!(lm.logits(&long), Err(LmError::TooLong { len: 25, max: 24 })));
    assert!(matches!(lm.logits(&[]), Err(LmError::EmptyInput)));
    assert!(matches!(lm.logits(&[40]), Err(LmError::TokenOutOfRange { .. })));
}

#[test]
fn forward_is_bit_identical_across_inits() {
    let ids = [0, 7, 3, 12, 9, 1];
    let a = FrozenLm::init(small_config(40)).unwrap().logits(&ids).unwrap();
    let b = FrozenLm::init(small_config(40)).unwrap().logits(&ids).unwrap();
    assert_eq!(a.data(), b.data());
    let other = FrozenLm::init(LmConfig { seed: 12, ..small_config(40) }).unwrap().logits(&ids).unwrap();
    assert_ne!(a.data(), other.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(
        prefix in prop::collection::vec(0usize..40, 1..10),
        s1 in prop::collection::vec(0usize..40, 1..8),
        s2 in prop::collection::vec(0usize..40, 1..8),
    ) {
        let lm = FrozenLm::init(small_config(40)).unwrap();
        let a = lm.logits(&[prefix.clone(), s1].concat()).unwrap();
        let b = lm.logits(&[prefix.clone(), s2].concat()).unwrap();
        for t in 0..prefix.len() {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }
}

/// Final norm outputs all ones, and the head reads them into `target` only.
fn forced_lm(target: usize) -> FrozenLm {
    let config = small_config(12);
    let mut lm = FrozenLm::init(config.clone()).unwrap();
    let h = config.hidden_dim;
    let p = lm.params_mut();
    p.set("lm.ln_f.gamma", Tensor::zeros(&[h])).unwrap();
    p.set("lm.ln_f.beta", Tensor::full(&[h], 1.0)).unwrap();
    p.set("lm.head", Tensor::from_fn(&[h, 12], |i| if i % 12 == target { 1.0 } else { 0.0 })).unwrap();
    lm
}

#[test]
fn greedy_zero_budget_returns_prompt() {
    let lm = FrozenLm::init(small_config(40)).unwrap();
    assert_eq!(greedy_decode(&lm, &[BOS, 9, 4], 0, EOS).unwrap(), vec![BOS, 9, 4]);
    assert!(greedy_decode(&lm, &[], 3, EOS).is_err());
}

#[test]
fn greedy_halts_on_eos() {
    let lm = forced_lm(EOS);
    assert_eq!(greedy_decode(&lm, &[BOS, 7], 10, EOS).unwrap(), vec![BOS, 7, EOS]);
}

#[test]
fn greedy_respects_budget_and_context() {
    let lm = forced_lm(6);
    assert_eq!(greedy_decode(&lm, &[BOS], 3, EOS).unwrap(), vec![BOS, 6, 6, 6]);
    let out = greedy_decode(&lm, &[BOS], 100, EOS).unwrap();
    assert_eq!(out.len(), lm.max_seq_len());
}

#[test]
fn greedy_is_deterministic() {
    let lm = FrozenLm::init(small_config(40)).unwrap();
    let a = greedy_decode(&lm, &[BOS, 5, 6], 12, EOS).unwrap();
    let b = greedy_decode(&lm, &[BOS, 5, 6], 12, EOS).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_preserves_weights() {
    let lines: Vec<&str> = CAPTIONS.lines().collect();
    let vocab = Vocab::build(&lines, 1).unwrap();
    let lm = FrozenLm::init(small_config(vocab.len())).unwrap();
    let c = checkpoint::lm_container(&lm, &vocab);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.cclm");
    c.write(&path).unwrap();
    let back = Container::read(&path).unwrap();
    assert_eq!(back.section_hash(TAG_LM), c.section_hash(TAG_LM));
    let (lm2, vocab2) = checkpoint::load_lm(&back).unwrap();
    assert_eq!(vocab2, vocab);
    assert!(lm2.params().iter().all(|p| !p.trainable));
    let ids = vocab.encode(lines[0]);
    assert_eq!(lm.logits(&ids).unwrap().data(), lm2.logits(&ids).unwrap().data());
    assert_eq!(checkpoint::lm_container(&lm2, &vocab2).to_bytes(), c.to_bytes());
}

#[test]
fn truncated_checkpoint_reports_offset() {
    let vocab = Vocab::build(&["a b c"], 1).unwrap();
    let lm = FrozenLm::init(small_config(vocab.len())).unwrap();
    let bytes = checkpoint::lm_container(&lm, &vocab).to_bytes();
    let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    match err {
        CheckpointError::Format { offset, .. } => assert!(offset > 0 && offset <= bytes.len()),
        other => panic!("expected a format error, got {other}"),
    }
}
