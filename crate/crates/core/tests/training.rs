use std::collections::{BTreeMap, HashMap};

use cytocap::adapter::{Adapter, AdapterConfig};
use cytocap::autograd::{Gradients, ParamStore, ParamTensor};
use cytocap::captions::{StatementPool, TemplateComposer};
use cytocap::checkpoint::{self, Container, TAG_ADAPTER, TAG_LM, TAG_OPTIMIZER, TAG_TRAIN_STATE, TAG_VOCAB};
use cytocap::corpus::Statement;
use cytocap::dataset::{caption_corpus, PairBuilder, RatioConfig, WeakPair};
use cytocap::lm::{FrozenLm, LmConfig, Vocab};
use cytocap::training::{
    clip_global_norm, pretrain_lm, Adam, LogEntry, PretrainConfig, Prepared, TrainConfig, TrainError, Trainer,
};
use cytocap::vision::{synth_areas, synth_embeddings, EmbeddingRecord};
use cytocap::{AreaId, AreaLabel, Tape, Tensor};

const PROMPT: &str = "Describe the patch.";

struct Setup {
    vocab: Vocab,
    pairs: Vec<WeakPair>,
    embeddings: HashMap<String, Vec<f32>>,
}

fn setup(per_area: usize) -> Setup {
    let profiles = synth_areas(3, 8, 60.0, 0.05, 1).unwrap();
    let mut recs: Vec<EmbeddingRecord> = synth_embeddings(&profiles, per_area, 2);
    for r in &mut recs {
        r.weak_label = Some(AreaLabel::Area(AreaId(r.true_class.unwrap())));
    }
    for (i, r) in recs.iter_mut().enumerate().filter(|(i, _)| i % 10 == 0) {
        r.weak_label = Some(AreaLabel::Unknown);
        r.patch_id = format!("u{i}");
    }
    let pool = StatementPool::from_statements((0..3u16).flat_map(|a| {
        let area = AreaId(a);
        (0..3).map(move |i| Statement {
            statement_id: format!("{}-{i:04}", area.name()),
            area_id: area,
            text: format!("Area {} has {} layer {}.", area.name(), ["thin", "broad", "pale"][i], ["ii", "iv", "vi"][a as usize]),
            doc_id: "d".into(),
            chunk: 0,
        })
    }));
    let vocab = Vocab::build(&caption_corpus(&pool, PROMPT), 1).unwrap();
    let composer = TemplateComposer::default();
    let builder = PairBuilder { pool: &pool, composer: &composer, vocab: &vocab, prompt: PROMPT, k: 2 };
    let pairs = builder.build(&recs, RatioConfig { known_per_unknown: 9 }, 3).unwrap();
    let embeddings = recs.iter().map(|r| (r.patch_id.clone(), r.vector.clone())).collect();
    Setup { vocab, pairs, embeddings }
}

fn tiny_lm(vocab: usize) -> FrozenLm {
    FrozenLm::init(LmConfig { vocab_size: vocab, hidden_dim: 16, num_blocks: 4, num_heads: 2, max_seq_len: 64, mlp_dim: 32, seed: 4 })
        .unwrap()
}

fn adapter_config(seed: u64) -> AdapterConfig {
    AdapterConfig { insert_every: 2, proj_hidden_dim: 16, ff_dim: 32, ..AdapterConfig::new(8, 16, seed) }
}

fn trainer(s: &Setup, config: TrainConfig) -> Trainer {
    Trainer::init(tiny_lm(s.vocab.len()), s.vocab.clone(), adapter_config(5), config).unwrap()
}

fn prepare(t: &Trainer, s: &Setup) -> Vec<Prepared> {
    t.prepare(&s.pairs, |id| s.embeddings.get(id).map(Vec::as_slice)).unwrap()
}

fn run(t: &mut Trainer, data: &[Prepared]) -> Vec<f32> {
    let mut losses = Vec::new();
    t.train(data, &mut |e: &LogEntry| losses.push(e.loss), &mut |_| Ok(())).unwrap();
    losses
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, learning_rate: 3e-3, seed: 9, ..Default::default() }
}

#[test]
fn first_step_loss_is_the_frozen_lm_loss() {
    let s = setup(10);
    let mut t = trainer(&s, small_config(1));
    let data = prepare(&t, &s);
    let batch: Vec<&Prepared> = data.iter().take(5).collect();
    let frozen: Vec<f64> = s.pairs[..5]
        .iter()
        .map(|p| {
            let mut tape = Tape::new();
            let logits = t.lm.forward_on_tape(&mut tape, p.inputs(), None).unwrap();
            let l = tape.masked_cross_entropy(logits, p.targets(), p.target_mask()).unwrap();
            tape.value(l).item() as f64
        })
        .collect();
    let expected = (frozen.iter().sum::<f64>() / 5.0) as f32;
    assert_eq!(t.train_step(&batch).unwrap(), expected);
}

#[test]
fn lm_weights_and_vocab_never_change() {
    let s = setup(12);
    let mut t = trainer(&s, small_config(2));
    let before = t.to_container();
    let data = prepare(&t, &s);
    run(&mut t, &data);
    let after = t.to_container();
    assert_eq!(before.section_hash(TAG_LM), after.section_hash(TAG_LM));
    assert_eq!(before.section_hash(TAG_VOCAB), after.section_hash(TAG_VOCAB));
    assert_ne!(before.section_hash(TAG_ADAPTER), after.section_hash(TAG_ADAPTER));
    assert_eq!(t.lm_hash(), checkpoint::sha256_hex(before.get(TAG_LM).unwrap()));
    assert!(t.lm.params().iter().all(|p| !p.trainable));
}

#[test]
fn prompt_targets_do_not_affect_the_loss() {
    let s = setup(6);
    let mut t = trainer(&s, small_config(1));
    // move the gates off zero so the adapter participates
    for name in ["adapter.xattn.0.attn_gate", "adapter.xattn.0.ff_gate"] {
        t.adapter.params_mut().set(name, Tensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
    }
    let data = prepare(&t, &s);
    let ex = &data[0];
    let mut perturbed = ex.clone();
    for (i, m) in ex.mask.iter().enumerate() {
        if !m {
            perturbed.targets[i] = (ex.targets[i] + 7) % s.vocab.len();
        }
    }
    assert_ne!(perturbed.targets, ex.targets);
    let a = t.batch_loss(&[ex]).unwrap();
    let b = t.batch_loss(&[&perturbed]).unwrap();
    assert_eq!(a - b, 0.0);
    assert_eq!(t.example_grads(ex).unwrap().1, t.example_grads(&perturbed).unwrap().1);
}

#[test]
fn same_seed_same_losses_and_loss_decreases() {
    let s = setup(16);
    let mut a = trainer(&s, small_config(4));
    let mut b = trainer(&s, small_config(4));
    let data = prepare(&a, &s);
    let la = run(&mut a, &data);
    let lb = run(&mut b, &data);
    assert_eq!(la, lb);
    let h = &a.progress.history;
    assert_eq!(h.len(), 4);
    assert!(h[3].mean_loss < h[0].mean_loss, "{h:?}");
    assert_eq!(a.progress.step as usize, la.len());
    assert_eq!(a.adapter.params().iter().map(|p| p.tensor.clone()).collect::<Vec<_>>(),
               b.adapter.params().iter().map(|p| p.tensor.clone()).collect::<Vec<_>>());
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let s = setup(4);
    let mut t = trainer(&s, small_config(0));
    let init = Adapter::init(adapter_config(5), 4).unwrap();
    let data = prepare(&t, &s);
    assert!(run(&mut t, &data).is_empty());
    assert_eq!(t.adapter.to_section(), init.to_section());
    assert!(t.train(&[], &mut |_| {}, &mut |_| Ok(())).is_ok());
    let mut one = trainer(&s, small_config(1));
    assert!(matches!(one.train(&[], &mut |_| {}, &mut |_| Ok(())), Err(TrainError::Config(_))));
}

#[test]
fn resume_reproduces_the_remaining_epochs() {
    let s = setup(12);
    let mut full = trainer(&s, small_config(6));
    let data = prepare(&full, &s);
    let mut at_three = None;
    let mut full_losses = Vec::new();
    full.train(&data, &mut |e| full_losses.push((e.epoch, e.loss)), &mut |t| {
        if t.progress.epochs_done == 3 {
            at_three = Some(t.to_container().to_bytes());
        }
        Ok(())
    })
    .unwrap();
    let bytes = at_three.unwrap();
    let mut resumed = Trainer::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.progress.epochs_done, 3);
    let mut tail = Vec::new();
    resumed.train(&data, &mut |e| tail.push((e.epoch, e.loss)), &mut |_| Ok(())).unwrap();
    let expected: Vec<(usize, f32)> = full_losses.into_iter().filter(|(e, _)| *e > 3).collect();
    assert_eq!(tail, expected);
    assert_eq!(resumed.to_container().to_bytes(), full.to_container().to_bytes());
    let c = full.to_container();
    for tag in [TAG_LM, TAG_VOCAB, TAG_ADAPTER, TAG_OPTIMIZER, TAG_TRAIN_STATE] {
        assert!(c.get(tag).is_some());
    }
}

#[test]
fn checkpoints_differ_only_in_trainable_sections() {
    let s = setup(8);
    let mut t = trainer(&s, small_config(2));
    let data = prepare(&t, &s);
    let mut snaps = Vec::new();
    t.train(&data, &mut |_| {}, &mut |t| {
        snaps.push(t.to_container());
        Ok(())
    })
    .unwrap();
    let (a, b) = (&snaps[0], &snaps[1]);
    assert_eq!(a.get(TAG_LM), b.get(TAG_LM));
    assert_eq!(a.get(TAG_VOCAB), b.get(TAG_VOCAB));
    assert_ne!(a.get(TAG_ADAPTER), b.get(TAG_ADAPTER));
}

#[test]
fn adam_matches_a_hand_computed_update() {
    let mut store = ParamStore::new();
    store.insert(ParamTensor::new("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap(), true)).unwrap();
    let mut adam = Adam::default();
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let gs = [[0.5f64, -1.0], [0.25, 2.0]];
    let mut w = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for (t, g) in gs.iter().enumerate() {
        let grads = Gradients(BTreeMap::from([("w".to_string(), Tensor::new(vec![2], g.map(|x| x as f32).to_vec()).unwrap())]));
        adam.update(&mut store, &grads, lr, b1, b2, eps).unwrap();
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32 + 1));
            let vh = v[i] / (1.0 - b2.powi(t as i32 + 1));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let got = store.get("w").unwrap().tensor.data().to_vec();
        for i in 0..2 {
            assert!((got[i] as f64 - w[i]).abs() < 1e-6, "{got:?} vs {w:?}");
        }
    }
    let back = Adam::from_section(&adam.to_section(), 0).unwrap();
    assert_eq!(back, adam);
    assert!(Adam::from_section(&adam.to_section()[..10], 0).is_err());
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = Gradients(BTreeMap::from([
        ("a".to_string(), Tensor::new(vec![2], vec![3.0f32, 0.0]).unwrap()),
        ("b".to_string(), Tensor::new(vec![1], vec![4.0f32]).unwrap()),
    ]));
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 5.0).abs() < 1e-9);
    assert!((g.global_norm() - 1.0).abs() < 1e-6);
    assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-6);
    let mut small = g.clone();
    clip_global_norm(&mut small, 10.0);
    assert_eq!(small, g);
}

#[test]
fn non_finite_loss_reports_the_batch() {
    let s = setup(4);
    let mut t = trainer(&s, small_config(1));
    let mut data = prepare(&t, &s);
    data[0].prefix = Tensor::full(data[0].prefix.shape(), f32::NAN);
    let ids = [data[0].patch_id.clone(), data[1].patch_id.clone()];
    let err = t.train_step(&[&data[0], &data[1]]).unwrap_err();
    match err {
        TrainError::NonFinite { patch_ids, gates, .. } => {
            assert_eq!(patch_ids, ids);
            assert_eq!(gates.len(), 2);
        }
        other => panic!("{other}"),
    }
    assert_eq!(t.progress.step, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
        TrainConfig { clip_norm: Some(0.0), ..Default::default() },
    ] {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.learning_rate, d.batch_size), (6, 1e-3, 32));
}

#[test]
fn pretraining_fits_captions_and_refreezes() {
    let s = setup(8);
    let mut lm = tiny_lm(s.vocab.len());
    let losses = pretrain_lm(&mut lm, &s.pairs, &PretrainConfig { epochs: 3, batch_size: 8, ..Default::default() }).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0], "{losses:?}");
    assert!(lm.params().iter().all(|p| !p.trainable));
}
