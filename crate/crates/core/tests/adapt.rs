mod common;

use common::{data, tiny, trained};
use dplot::adapt::*;
use dplot::augment::PseudoLabelMenu;
use dplot::data::{corrupt, flip_h, CorruptionKind, CorruptionSpec, ImageBatch};
use dplot::harness::{evaluate, median};
use dplot::losses::paired_consistency;
use dplot::model::{BlockNet, BnMode};
use dplot_tensor::gradcheck::check;
use dplot_tensor::{Rng, Scalar, Tensor};

fn cfg(blocks: &[usize]) -> AdaptConfig {
    AdaptConfig {
        selected_blocks: blocks.to_vec(),
        ..AdaptConfig::default()
    }
}

/// Independent softmax for oracles.
fn softmax_oracle(logits: &Tensor<f64>) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut out = Vec::new();
    for row in logits.data().chunks(c) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

fn changed<T: Scalar>(a: &BlockNet<T>, b: &BlockNet<T>) -> Vec<usize> {
    (0..a.params().len()).filter(|&i| a.params()[i] != b.params()[i]).collect()
}

fn symmetric(x: &Tensor<f32>) -> Tensor<f32> {
    x.zip(&flip_h(x), "sym", |a, b| 0.5 * (a + b)).unwrap()
}

fn noisy(x: &ImageBatch, severity: u8, seed: u64) -> ImageBatch {
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, severity).unwrap();
    corrupt(x, spec, &mut Rng::new(seed)).unwrap()
}

fn error(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

#[test]
fn pseudo_labels_are_flip_invariant_simplex_rows() {
    let m = tiny(0);
    let x = data(12, 1).images;
    let a = pseudo_label(&m, &x, PseudoLabelMenu::PairedView, 1, &mut Rng::new(0)).unwrap();
    let b = pseudo_label(&m, &flip_h(&x), PseudoLabelMenu::PairedView, 1, &mut Rng::new(0)).unwrap();
    assert_eq!(a, b);
    for row in a.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn symmetric_inputs_give_plain_softmax() {
    let m = tiny(0);
    let x = symmetric(&data(8, 2).images);
    assert_eq!(flip_h(&x), x);
    let y = pseudo_label(&m, &x, PseudoLabelMenu::PairedView, 1, &mut Rng::new(0)).unwrap();
    let direct = softmax(&m.forward(&x.cast(), BnMode::Batch).unwrap().logits);
    assert_eq!(y, direct);
}

#[test]
fn pseudo_labels_match_two_forward_oracle() {
    let m = tiny(3);
    let x = data(10, 4).images;
    let y = pseudo_label(&m, &x, PseudoLabelMenu::PairedView, 1, &mut Rng::new(0)).unwrap();
    let p = softmax_oracle(&m.forward(&x.cast(), BnMode::Batch).unwrap().logits);
    let q = softmax_oracle(&m.forward(&flip_h(&x).cast(), BnMode::Batch).unwrap().logits);
    for ((v, a), b) in y.data().iter().zip(&p).zip(&q) {
        assert!((v - 0.5 * (a + b)).abs() < 1e-6);
    }
}

#[test]
fn multi_view_menus_give_simplex_rows() {
    let m = tiny(0);
    let x = data(6, 1).images;
    for menu in [PseudoLabelMenu::NoiseBlur, PseudoLabelMenu::ColorJitter, PseudoLabelMenu::All] {
        let y = pseudo_label(&m, &x, menu, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(y.shape(), &[6, 3]);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn entropy_step_touches_only_selected_blocks() {
    let m = tiny(1);
    let c = AdaptConfig {
        lr_entropy: 1e-2,
        ..cfg(&[2])
    };
    let mut ad = Adapter::new(m.clone(), Policy::for_ablation(Ablation::C, &c), &c, 0).unwrap();
    ad.step(&data(16, 2).images).unwrap();
    let moved = changed(&m, ad.student());
    assert!(!moved.is_empty());
    for i in 0..m.params().len() {
        let in_block = m.param_infos()[i].block == 2;
        assert_eq!(moved.contains(&i), in_block, "{}", m.param_infos()[i].name);
    }
    let cls = m.classifier_block();
    assert!(moved.iter().all(|&i| m.param_infos()[i].block != cls));
    assert_eq!(
        ad.entropy_optimizer().unwrap().slots(),
        m.param_infos().iter().filter(|p| p.block == 2).count()
    );
}

#[test]
fn all_blocks_select_the_whole_extractor() {
    let m = tiny(0);
    let all: Vec<usize> = (1..=m.num_blocks()).collect();
    let mask = m.mask_blocks(&all);
    for (i, info) in m.param_infos().iter().enumerate() {
        assert_eq!(mask.contains(i), info.block != m.classifier_block());
    }
}

#[test]
fn tent_touches_only_bn_affine() {
    let m = tiny(2);
    let x = data(16, 3).images;
    let c = AdaptConfig {
        lr_entropy: 1e-2,
        ..cfg(&[1, 3])
    };
    let mut tent = Adapter::for_method(m.clone(), Method::Tent, &c, 0).unwrap();
    tent.step(&x).unwrap();
    let moved = changed(&m, tent.student());
    for i in 0..m.params().len() {
        assert_eq!(moved.contains(&i), m.param_infos()[i].is_bn_affine(), "{}", m.param_infos()[i].name);
    }
    let mut sel = Adapter::for_method(m.clone(), Method::TentSelection, &c, 0).unwrap();
    sel.step(&x).unwrap();
    let moved = changed(&m, sel.student());
    for i in 0..m.params().len() {
        let info = &m.param_infos()[i];
        let expect = info.is_bn_affine() && [1, 3].contains(&info.block);
        assert_eq!(moved.contains(&i), expect, "{}", info.name);
    }
}

#[test]
fn bn1_is_stateless() {
    let m = tiny(4);
    let x = data(16, 5).images;
    let mut ad = Adapter::for_method(m.clone(), Method::Bn1, &AdaptConfig::default(), 0).unwrap();
    let a = ad.step(&x).unwrap();
    let b = ad.step(&x).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(ad.student().snapshot(), m.snapshot());
    assert_eq!(a.logits, m.forward(&x.cast(), BnMode::Batch).unwrap().logits);
    assert!(ad.step(&data(1, 0).images).is_err());
}

#[test]
fn source_uses_running_statistics() {
    let m = tiny(4);
    let x = data(5, 5).images;
    let mut ad = Adapter::for_method(m.clone(), Method::Source, &AdaptConfig::default(), 0).unwrap();
    let out = ad.step(&x).unwrap();
    assert_eq!(out.logits, m.forward(&x.cast(), BnMode::Running).unwrap().logits);
    assert_eq!(ad.student().snapshot(), m.snapshot());
}

#[test]
fn frozen_configuration_doubles_source_logits() {
    let m = tiny(5);
    let x = data(16, 6).images;
    let c = AdaptConfig {
        lr_entropy: 0.0,
        lr_consistency: 0.0,
        alpha: 1.0,
        ..cfg(&[1, 2])
    };
    let mut ad = Adapter::for_method(m.clone(), Method::Dplot, &c, 0).unwrap();
    for _ in 0..2 {
        let out = ad.step(&x).unwrap();
        let s = m.forward(&x.cast(), BnMode::Batch).unwrap().logits;
        assert_eq!(out.logits, s.add(&s).unwrap());
        assert_eq!(out.predictions, s.argmax_rows());
        assert_eq!(ad.student().params(), m.params());
        assert_eq!(ad.teacher().unwrap().params(), m.params());
    }
}

#[test]
fn ensemble_off_predicts_with_the_student() {
    let m = tiny(6);
    let x = data(16, 7).images;
    let c = AdaptConfig {
        ensemble: false,
        ..cfg(&[2])
    };
    let mut ad = Adapter::for_method(m, Method::Dplot, &c, 0).unwrap();
    let out = ad.step(&x).unwrap();
    let s = ad.student().forward(&x.cast(), BnMode::Batch).unwrap().logits;
    assert_eq!(out.logits, s);
    assert_eq!(out.predictions, s.argmax_rows());
}

#[test]
fn post_update_prediction_uses_updated_models() {
    let m = tiny(6);
    let x = data(16, 7).images;
    let mut ad = Adapter::for_method(m, Method::Dplot, &cfg(&[2]), 0).unwrap();
    let out = ad.step(&x).unwrap();
    assert_eq!(out.logits, ad.predict(&x, BnMode::Batch).unwrap());
    assert_eq!(ad.num_updates(), 1);
}

#[test]
fn pseudo_labels_precede_the_entropy_update() {
    let m = tiny(7);
    let x = data(16, 8).images;
    let labels = |lr: f64| {
        let c = AdaptConfig {
            lr_entropy: lr,
            ..cfg(&[1, 2, 3])
        };
        let mut ad = Adapter::for_method(m.clone(), Method::Dplot, &c, 0).unwrap();
        ad.step(&x).unwrap().pseudo_labels.unwrap()
    };
    assert_eq!(labels(1e-3), labels(0.5));
}

#[test]
fn zero_consistency_rate_leaves_params() {
    let m = tiny(8);
    let c = AdaptConfig {
        lr_consistency: 0.0,
        ..cfg(&[1])
    };
    let mut ad = Adapter::new(m.clone(), Policy::for_ablation(Ablation::A, &c), &c, 0).unwrap();
    let mut warm = Adapter::new(m.clone(), Policy::for_ablation(Ablation::A, &c), &c, 0).unwrap();
    let x = data(16, 1).images;
    warm.warmup([&x], 1).unwrap();
    assert_eq!(warm.student().params(), m.params());
    ad.step(&x).unwrap();
    let moved = changed(&m, ad.student());
    assert!(moved.iter().all(|&i| m.param_infos()[i].block == 1));
    assert_eq!(ad.consistency_optimizer().unwrap().slots(), m.params().len());
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    let x = Tensor::from_f64(&[3, 1], &[0.7, -1.2, 0.4]).unwrap();
    let xf = Tensor::from_f64(&[3, 1], &[0.5, -0.9, 1.1]).unwrap();
    let target = Tensor::from_f64(&[3, 2], &[0.8, 0.2, 0.3, 0.7, 0.55, 0.45]).unwrap();
    let w = Tensor::from_f64(&[1, 2], &[0.9, -0.4]).unwrap();
    let one = Tensor::from_f64(&[], &[1.0]).unwrap();
    let r = check(
        |tp, v| {
            let a = tp.constant(x.clone());
            let b = tp.constant(xf.clone());
            let la = tp.matmul(a, v[0])?;
            let lb = tp.matmul(b, v[0])?;
            let ya = tp.softmax(la)?;
            let yb = tp.softmax(lb)?;
            let t = tp.constant(target.clone());
            paired_consistency(tp, ya, yb, t).map_err(|e| dplot_tensor::TensorError::Invalid {
                op: "paired_consistency",
                detail: e.to_string(),
            })
        },
        &[w],
        &one,
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(r.rel_err < 1e-5, "{r:?}");
}

#[test]
fn warmup_of_zero_batches_is_identity() {
    let m = tiny(9);
    let c = cfg(&[1]);
    let mut ad = Adapter::for_method(m.clone(), Method::Dplot, &c, 0).unwrap();
    let x = data(8, 0).images;
    ad.warmup([&x], 0).unwrap();
    assert_eq!(ad.student().snapshot(), m.snapshot());
    assert_eq!(ad.teacher().unwrap().snapshot(), m.snapshot());
    assert_eq!(ad.num_updates(), 0);
}

#[test]
fn warmup_teacher_stays_between_old_teacher_and_student() {
    let c = AdaptConfig {
        lr_consistency: 1e-2,
        alpha: 0.7,
        ..cfg(&[1])
    };
    let mut ad = Adapter::for_method(tiny(10), Method::Dplot, &c, 0).unwrap();
    for seed in 0..4 {
        let x = data(16, seed).images;
        let before = ad.teacher().unwrap().clone();
        ad.warmup([&x], 1).unwrap();
        let (t, s) = (ad.teacher().unwrap(), ad.student());
        for ((new, old), st) in t.params().iter().zip(before.params()).zip(s.params()) {
            for ((&n, &o), &v) in new.data().iter().zip(old.data()).zip(st.data()) {
                assert!(n >= o.min(v) - 1e-15 && n <= o.max(v) + 1e-15);
            }
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let m = tiny(0);
    assert!(Adapter::for_method(m.clone(), Method::Dplot, &cfg(&[]), 0).is_err());
    assert!(Adapter::for_method(m.clone(), Method::TentSelection, &cfg(&[]), 0).is_err());
    assert!(Adapter::for_method(m.clone(), Method::Dplot, &cfg(&[4]), 0).is_err());
    let neg = AdaptConfig {
        lr_entropy: -1.0,
        ..cfg(&[1])
    };
    assert!(Adapter::for_method(m.clone(), Method::Dplot, &neg, 0).is_err());
    let alpha = AdaptConfig {
        alpha: 1.5,
        ..cfg(&[1])
    };
    assert!(Adapter::for_method(m.clone(), Method::Dplot, &alpha, 0).is_err());
    assert!(Adapter::for_method(m, Method::Tent, &cfg(&[]), 0).is_ok());
    assert!("tent+selection".parse::<Method>().is_ok());
    assert!("cotta".parse::<Method>().is_err());
}

fn descent_trace(method: Option<Method>) -> Vec<f64> {
    let (model, val) = trained();
    let x = noisy(&val.slice(0, 64).unwrap(), 4, 3).images;
    let c = cfg(&[1, 2]);
    let mut ad = match method {
        Some(m) => Adapter::for_method(model.clone(), m, &c, 0).unwrap(),
        None => Adapter::new(model.clone(), Policy::for_ablation(Ablation::C, &c), &c, 0).unwrap(),
    };
    (0..10).map(|_| ad.step(&x).unwrap().diagnostics.entropy_loss.unwrap()).collect()
}

fn inversions(trace: &[f64]) -> usize {
    trace.windows(2).filter(|w| w[1] > w[0]).count()
}

#[test]
fn entropy_descends_on_a_repeated_batch() {
    let trace = descent_trace(None);
    assert!(inversions(&trace) <= 1, "{trace:?}");
    let tent = descent_trace(Some(Method::Tent));
    assert!(inversions(&tent) <= 1, "{tent:?}");
}

#[test]
fn repeated_adaptation_does_not_hurt() {
    let (model, val) = trained();
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let batch = noisy(&val.slice(64 * seed, 64 * seed + 64).unwrap(), 5, seed as u64);
        let mut ad = Adapter::for_method(model.clone(), Method::Dplot, &cfg(&[1, 2]), seed as u64).unwrap();
        let before = error(&ad.predict(&batch.images, BnMode::Batch).unwrap().argmax_rows(), &batch.labels);
        let mut after = before;
        for _ in 0..20 {
            after = error(&ad.step(&batch.images).unwrap().predictions, &batch.labels);
        }
        deltas.push(after - before);
    }
    assert!(median(&deltas) <= 0.0, "{deltas:?}");
}

#[test]
fn bn1_is_no_worse_than_source_under_noise() {
    let (model, val) = trained();
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let mut errs = [0.0; 2];
        for (k, method) in [Method::Source, Method::Bn1].into_iter().enumerate() {
            let mut ad = Adapter::for_method(model.clone(), method, &AdaptConfig::default(), seed).unwrap();
            for (i, sev) in [3u8, 4, 5, 5].into_iter().enumerate() {
                let b = noisy(&val.slice(128 * i, 128 * i + 128).unwrap(), sev, seed * 10 + i as u64);
                errs[k] += error(&ad.step(&b.images).unwrap().predictions, &b.labels) / 4.0;
            }
        }
        gaps.push(errs[1] - errs[0]);
    }
    assert!(median(&gaps) <= 0.0, "{gaps:?}");
}

#[test]
fn warmup_keeps_clean_accuracy() {
    let (model, val) = trained();
    let before = evaluate(model, val, BnMode::Running, 256).unwrap();
    let mut ad = Adapter::for_method(model.clone(), Method::Dplot, &cfg(&[1]), 0).unwrap();
    let source = common::data(64 * 50, 77);
    let batches: Vec<Tensor<f32>> = source.chunks(64).map(|b| b.images).collect();
    ad.warmup(&batches, 50).unwrap();
    assert_eq!(ad.num_updates(), 50);
    let after = evaluate(ad.student(), val, BnMode::Running, 256).unwrap();
    assert!(after <= before + 0.02, "{before} -> {after}");
}
