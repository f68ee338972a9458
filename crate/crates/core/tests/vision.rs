use cytocap::lexicon::{AreaId, AreaLabel};
use cytocap::vision::{
    decode_embeddings, encode_embeddings, load_embeddings, nearest_centroid, save_embeddings, synth_areas,
    synth_embeddings, ClassifierStandIn, EmbeddingRecord, VisionError, NUM_CLASSES,
};
use proptest::prelude::*;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn two_areas_at_ninety_degrees() {
    let p = synth_areas(2, 2, 90.0, 0.0, 1).unwrap();
    assert!(dot(&p[0].centroid, &p[1].centroid) <= 1e-6);
    for a in &p {
        assert!((dot(&a.centroid, &a.centroid).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fifty_seven_areas_respect_separation() {
    let angle = 60.0f64;
    let p = synth_areas(57, 64, angle, 0.1, 7).unwrap();
    let max_cos = angle.to_radians().cos();
    for i in 0..p.len() {
        assert!((dot(&p[i].centroid, &p[i].centroid) - 1.0).abs() < 1e-6);
        for j in i + 1..p.len() {
            // f32 storage rounds the dot product slightly
            assert!(dot(&p[i].centroid, &p[j].centroid) <= max_cos + 1e-6, "{i},{j}");
        }
    }
    assert_eq!(p, synth_areas(57, 64, angle, 0.1, 7).unwrap());
    assert_ne!(p, synth_areas(57, 64, angle, 0.1, 8).unwrap());
}

#[test]
fn infeasible_separation_is_reported() {
    assert!(matches!(synth_areas(5, 2, 100.0, 0.1, 0), Err(VisionError::Infeasible { .. })));
    assert!(synth_areas(1, 4, 10.0, 0.1, 0).is_err());
    assert!(synth_areas(3, 4, 10.0, -1.0, 0).is_err());
}

#[test]
fn zero_sigma_reproduces_centroids() {
    let p = synth_areas(4, 8, 45.0, 0.0, 2).unwrap();
    let recs = synth_embeddings(&p, 5, 3);
    assert_eq!(recs.len(), 20);
    for r in &recs {
        assert_eq!(r.vector, p[r.true_class.unwrap() as usize].centroid);
    }
}

#[test]
fn sample_mean_is_close_to_centroid() {
    let sigma = 0.2f32;
    let p = synth_areas(3, 16, 45.0, sigma, 4).unwrap();
    let n = 100;
    let recs = synth_embeddings(&p, n, 5);
    assert_eq!(recs.len(), 3 * n);
    let bound = 3.0 * sigma as f64 / (n as f64).sqrt();
    let mut violations = 0;
    for a in &p {
        let own: Vec<&EmbeddingRecord> = recs.iter().filter(|r| r.true_class == Some(a.class_id)).collect();
        for d in 0..16 {
            let mean = own.iter().map(|r| r.vector[d] as f64).sum::<f64>() / n as f64;
            if (mean - a.centroid[d] as f64).abs() > bound {
                violations += 1;
            }
        }
    }
    // a 3σ band misses about 0.3% of 48 coordinates
    assert!(violations <= 1, "{violations} coordinates outside 3σ/√n");
}

fn classifier(seed: u64, sigma: f32) -> (Vec<cytocap::vision::AreaProfile>, ClassifierStandIn) {
    let p = synth_areas(NUM_CLASSES, 64, 60.0, sigma, seed).unwrap();
    let c = ClassifierStandIn::new(&p).unwrap();
    (p, c)
}

#[test]
fn classifier_maps_targets_and_unknowns() {
    let (p, c) = classifier(1, 0.0);
    assert_eq!(c.num_targets(), 57);
    assert_eq!(c.classify(&p[0].centroid).unwrap(), AreaLabel::Area(AreaId(0)));
    assert_eq!(c.classify(&p[56].centroid).unwrap(), AreaLabel::Area(AreaId(56)));
    assert_eq!(c.classify(&p[57].centroid).unwrap(), AreaLabel::Unknown);
    assert_eq!(c.classify(&p[158].centroid).unwrap(), AreaLabel::Unknown);
    assert!(matches!(c.classify(&[0.0; 3]), Err(VisionError::Dim { got: 3, expected: 64 })));
    assert!(ClassifierStandIn::new(&p[..100]).is_err());
}

#[test]
fn zero_sigma_weak_labels_equal_truth() {
    let (p, c) = classifier(2, 0.0);
    let mut recs = synth_embeddings(&p, 3, 9);
    c.label_all(&mut recs).unwrap();
    for r in &recs {
        assert_eq!(r.weak_label, r.true_label());
    }
}

#[test]
fn ties_go_to_lowest_class() {
    let cents = vec![vec![1.0f32, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(nearest_centroid(&cents, &[0.0, 0.0]), 0);
    assert_eq!(nearest_centroid(&cents, &[0.0, -1.0]), 0);
    assert_eq!(nearest_centroid(&cents, &[-0.9, 0.0]), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicated_centroids_never_change_the_winner(
        v in prop::collection::vec(-2.0f32..2.0, 6),
        dup in prop::collection::vec(0usize..10, 1..6),
    ) {
        let p = synth_areas(10, 6, 20.0, 0.0, 3).unwrap();
        let cents: Vec<Vec<f32>> = p.iter().map(|a| a.centroid.clone()).collect();
        let base = nearest_centroid(&cents, &v);
        let mut extended = cents.clone();
        extended.extend(dup.iter().map(|&i| cents[i].clone()));
        let with_dups = nearest_centroid(&extended, &v);
        prop_assert_eq!(with_dups, base);
    }
}

fn sample_records() -> Vec<EmbeddingRecord> {
    let p = synth_areas(3, 5, 30.0, 0.3, 1).unwrap();
    let mut recs = synth_embeddings(&p, 2, 2);
    recs[0].weak_label = Some(AreaLabel::Area(AreaId(12)));
    recs[1].weak_label = Some(AreaLabel::Unknown);
    recs[2].vector[1] = -0.0;
    recs[3].vector[4] = f32::MIN_POSITIVE / 2.0;
    recs
}

fn strip_truth(mut recs: Vec<EmbeddingRecord>) -> Vec<EmbeddingRecord> {
    for r in &mut recs {
        r.true_class = None;
    }
    recs
}

#[test]
fn file_roundtrip_is_bit_exact() {
    let recs = sample_records();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.ccem");
    save_embeddings(&recs, &path).unwrap();
    let back = load_embeddings(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.patch_id, b.patch_id);
        assert_eq!(a.weak_label, b.weak_label);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.vector), bits(&b.vector));
    }
    assert_eq!(back, strip_truth(recs));
    assert!(load_embeddings(&dir.path().join("missing.ccem")).is_err());
}

#[test]
fn truncated_and_corrupt_files_report_offsets() {
    let bytes = encode_embeddings(&sample_records()).unwrap();
    for cut in [3, 10, 20, bytes.len() - 1] {
        match decode_embeddings(&bytes[..cut]) {
            Err(VisionError::Format { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_embeddings(&bad), Err(VisionError::Format { offset: 0, .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_embeddings(&extra).is_err());
}

/// Writes the documented layout by hand, without the library encoder.
fn external_writer(ids: &[&str], labels: &[u16], vectors: &[Vec<f32>]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(b"CCEM");
    b.extend([1u8, 0]);
    b.extend((ids.len() as u32).to_le_bytes());
    b.extend((vectors[0].len() as u32).to_le_bytes());
    for ((id, &label), v) in ids.iter().zip(labels).zip(vectors) {
        b.extend((id.len() as u16).to_le_bytes());
        b.extend(id.bytes());
        b.extend(label.to_le_bytes());
        for x in v {
            b.extend(x.to_bits().to_le_bytes());
        }
    }
    b
}

#[test]
fn externally_written_file_loads() {
    let vectors = vec![vec![0.5f32, -1.25, 3.0], vec![1e-30, 0.0, -7.5], vec![2.0, 2.0, 2.0]];
    let bytes = external_writer(&["patch-α", "b", "c"], &[3, 0xFFFF, 0xFFFE], &vectors);
    let recs = decode_embeddings(&bytes).unwrap();
    assert_eq!(recs[0].patch_id, "patch-α");
    assert_eq!(recs[0].weak_label, Some(AreaLabel::Area(AreaId(3))));
    assert_eq!(recs[1].weak_label, Some(AreaLabel::Unknown));
    assert_eq!(recs[2].weak_label, None);
    for (r, v) in recs.iter().zip(&vectors) {
        assert_eq!(&r.vector, v);
    }
    assert_eq!(encode_embeddings(&recs).unwrap(), bytes);
    let bad_label = external_writer(&["x"], &[57], &vectors[..1]);
    assert!(matches!(decode_embeddings(&bad_label), Err(VisionError::Format { .. })));
}
