mod common;

use common::{data, tiny};
use dplot::data::ImageBatch;
use dplot::model::BnMode;
use dplot::selection::*;
use dplot_tensor::Rng;
use proptest::prelude::*;

fn set(rows: Vec<Vec<f64>>) -> PrototypeSet {
    let counts = vec![1; rows.len()];
    PrototypeSet {
        prototypes: rows,
        counts,
    }
}

#[test]
fn singleton_classes_give_their_features() {
    let m = tiny(0);
    let d = data(3, 1);
    let p = compute_prototypes(&m, &d).unwrap();
    let f = m.forward(&d.images.cast(), BnMode::Batch).unwrap().features;
    for (i, &label) in d.labels.iter().enumerate() {
        let row = &f.data()[i * 8..(i + 1) * 8];
        for (a, b) in p.prototypes[label].iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(p.counts, vec![1, 1, 1]);
}

#[test]
fn prototypes_match_two_pass_mean() {
    let m = tiny(0);
    let d = data(20, 2);
    let p = compute_prototypes(&m, &d).unwrap();
    let f = m.forward(&d.images.cast(), BnMode::Batch).unwrap().features;
    for c in 0..3 {
        let rows: Vec<&[f64]> = d
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| &f.data()[i * 8..(i + 1) * 8])
            .collect();
        for k in 0..8 {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
            assert!((p.prototypes[c][k] - mean).abs() < 1e-6);
        }
    }
    let doubled = ImageBatch::concat(&[&d, &d]).unwrap();
    let q = compute_prototypes(&m, &doubled).unwrap();
    for (a, b) in p.prototypes.iter().flatten().zip(q.prototypes.iter().flatten()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn missing_class_is_an_error() {
    let m = tiny(0);
    let d = data(9, 0);
    let rows: Vec<usize> = (0..9).filter(|&i| d.labels[i] != 2).collect();
    assert!(compute_prototypes(&m, &d.select(&rows).unwrap()).is_err());
}

#[test]
fn similarity_examples() {
    let p = set(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
    assert_eq!(prototype_similarity(&p, &p).unwrap(), 1.0);
    let twice = set(p.prototypes.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect());
    assert_eq!(prototype_similarity(&p, &twice).unwrap(), 1.0);
    let a = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let b = set(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert_eq!(prototype_similarity(&a, &b).unwrap(), 0.0);
    let z = set(vec![vec![0.0, 0.0], vec![0.0, 1.0]]);
    assert!(prototype_similarity(&a, &z).is_err());
}

#[test]
fn minmax_examples() {
    let s = minmax_scale(&[0.2, 0.6, 1.0]).values;
    for (a, b) in s.iter().zip([0.0, 0.5, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    let flat = minmax_scale(&[0.3, 0.3, 0.3]);
    assert_eq!(flat.values, vec![1.0; 3]);
    assert!(flat.warning.is_some());
    let fixed = [0.0, 0.25, 1.0, 0.5];
    assert_eq!(minmax_scale(&fixed).values, fixed.to_vec());
}

#[test]
fn published_rows_threshold_exactly() {
    let wrn = [0.89, 0.92, 1.0, 0.98, 0.49, 0.47, 0.54, 0.49, 0.30, 0.20, 0.09, 0.0];
    let resnet = [0.93, 1.0, 0.58, 0.53, 0.29, 0.37, 0.26, 0.0];
    assert_eq!(threshold(&minmax_scale(&wrn).values, 0.75), vec![1, 2, 3, 4]);
    assert_eq!(threshold(&minmax_scale(&resnet).values, 0.75), vec![1, 2]);
    assert_eq!(threshold(&minmax_scale(&wrn).values, 0.999), vec![3]);
}

#[test]
fn zero_steps_give_unit_similarity_and_restore_the_model() {
    let mut m = tiny(3);
    let d = data(24, 4);
    let before = m.snapshot();
    let em = EmConfig {
        passes: 0,
        batch_size: 8,
        ..EmConfig::default()
    };
    let r = select_blocks(&mut m, &d, 0.75, Perturbation::default(), &em, 0).unwrap();
    assert_eq!(r.raw, vec![1.0; 3]);
    assert_eq!(m.snapshot(), before);

    let capped = EmConfig {
        max_steps: Some(0),
        batch_size: 8,
        ..EmConfig::default()
    };
    let base = compute_prototypes(&m, &d).unwrap();
    assert_eq!(block_sensitivity(&mut m, &d, &d, &base, 2, &capped).unwrap(), 1.0);
    assert!(block_sensitivity(&mut m, &d, &d, &base, 4, &capped).is_err());
    assert!(block_sensitivity(&mut m, &d, &d, &base, 0, &capped).is_err());
}

#[test]
fn selection_restores_bitwise_and_is_monotone() {
    let mut m = tiny(5);
    let d = data(48, 6);
    let before = m.snapshot();
    let em = EmConfig {
        batch_size: 16,
        ..EmConfig::default()
    };
    let r = select_blocks(&mut m, &d, 0.5, Perturbation::default(), &em, 1).unwrap();
    assert_eq!(m.snapshot(), before);
    assert!(r.raw.iter().all(|s| (-1.0..=1.0).contains(s)));
    assert!(r.scaled.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!(r.raw.iter().any(|&s| s < 1.0));
    let mut last: Option<Vec<usize>> = None;
    for g in [0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.999] {
        let sel = r.with_gamma(g).unwrap().selected;
        if let Some(prev) = &last {
            assert!(sel.iter().all(|b| prev.contains(b)));
        }
        last = Some(sel);
    }
    let again = select_blocks(&mut m, &d, 0.5, Perturbation::default(), &em, 1).unwrap();
    assert_eq!(again, r);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<SelectionReport>(&json).unwrap(), r);
}

#[test]
fn perturbations_stay_in_range() {
    let d = data(4, 0);
    for p in [
        Perturbation::default(),
        Perturbation::Brightness { factor: 1.5 },
        Perturbation::Contrast { factor: 0.5 },
    ] {
        let x = p.apply(&d, &mut Rng::new(0)).unwrap();
        assert!(x.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(x.images, d.images);
    }
    assert!(Perturbation::Gaussian { mean: 0.0, variance: -1.0 }.apply(&d, &mut Rng::new(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn thresholds_are_monotone(values in prop::collection::vec(0.0f64..1.0, 1..16), g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
        let scaled = minmax_scale(&values).values;
        prop_assert!(scaled.iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let wide = threshold(&scaled, lo);
        prop_assert!(threshold(&scaled, hi).iter().all(|b| wide.contains(b)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn prototypes_ignore_order(seed in 0u64..1000) {
        let m = tiny(1);
        let d = data(30, 3);
        let perm = Rng::new(seed).permutation(30);
        let p = compute_prototypes(&m, &d).unwrap();
        let q = compute_prototypes(&m, &d.select(&perm).unwrap()).unwrap();
        for (a, b) in p.prototypes.iter().flatten().zip(q.prototypes.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
