use dplot::model::{ArchSpec, BlockNet, BlockSpec, BnMode, ParamRole};
use dplot::Error;
use dplot_tensor::{Rng, Tensor};
use proptest::prelude::*;

fn desk(seed: u64) -> BlockNet<f64> {
    BlockNet::new(&ArchSpec::desk(4), &mut Rng::new(seed)).unwrap()
}

fn images(n: usize, seed: u64) -> Tensor<f64> {
    Rng::new(seed).uniform_tensor(&[n, 3, 16, 16], 0.0, 1.0)
}

/// Parameters of a residual conv block: two 3x3 convs with BN, plus a
/// projection with BN when the shape changes.
fn conv_block(cin: usize, cout: usize, projected: bool) -> usize {
    let conv_bn = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
    conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3) + if projected { conv_bn(cin, cout, 1) } else { 0 }
}

#[test]
fn desk_shapes_and_parameter_count() {
    let m = desk(0);
    assert_eq!(m.num_blocks(), 6);
    assert_eq!(m.feature_dim(), 64);
    let out = m.forward(&images(5, 1), BnMode::Running).unwrap();
    assert_eq!(out.features.shape(), &[5, 64]);
    assert_eq!(out.logits.shape(), &[5, 4]);

    let stem = 3 * 16 * 9 + 2 * 16;
    let expected = stem
        + conv_block(16, 16, false)
        + conv_block(16, 16, false)
        + conv_block(16, 32, true)
        + conv_block(32, 32, false)
        + conv_block(32, 64, true)
        + conv_block(64, 64, false)
        + (64 * 4 + 4);
    assert_eq!(expected, 174_868);
    assert_eq!(m.num_scalars(), expected);
}

#[test]
fn stem_belongs_to_block_one_and_classifier_is_last() {
    let m = desk(0);
    let infos = m.param_infos();
    assert!(infos.iter().filter(|i| i.name.starts_with("b1.stem")).all(|i| i.block == 1));
    let cls: Vec<_> = infos.iter().filter(|i| i.block == m.classifier_block()).collect();
    assert_eq!(cls.len(), 2);
    assert!(cls.iter().all(|i| matches!(i.role, ParamRole::LinearWeight | ParamRole::LinearBias)));
}

#[test]
fn parameter_partition_is_disjoint_and_complete() {
    let m = desk(0);
    let mut hits = vec![0; m.params().len()];
    for b in 1..=m.classifier_block() {
        for i in m.mask_blocks(&[b]).indices() {
            hits[i] += 1;
        }
    }
    assert!(hits.iter().all(|&h| h == 1));
}

#[test]
fn same_seed_same_parameters() {
    assert_eq!(desk(7).params(), desk(7).params());
    assert_ne!(desk(7).params(), desk(8).params());
}

#[test]
fn running_mode_rows_are_independent() {
    let m = desk(2);
    let one = images(1, 3);
    let two = Tensor::concat_rows(&[&one, &one]).unwrap();
    let out = m.forward(&two, BnMode::Running).unwrap();
    let l = out.logits.data();
    assert_eq!(l[..4], l[4..]);
}

#[test]
fn forward_is_pure() {
    let m = desk(2);
    let x = images(6, 4);
    for mode in [BnMode::Running, BnMode::Batch] {
        let a = m.forward(&x, mode).unwrap();
        let b = m.forward(&x, mode).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features, b.features);
    }
}

#[test]
fn fresh_model_is_nearly_uniform() {
    let m = desk(5);
    let out = m.forward(&images(64, 6), BnMode::Batch).unwrap();
    let probs = dplot::adapt::softmax(&out.logits);
    let h: f64 = dplot::losses::row_entropies(&probs).iter().sum::<f64>() / 64.0;
    assert!((h - 4f64.ln()).abs() < 0.3, "entropy {h}");
}

#[test]
fn input_shape_is_checked() {
    let m = desk(0);
    let bad = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
    assert!(matches!(m.forward(&bad, BnMode::Running), Err(Error::SpecMismatch(_))));
}

#[test]
fn inconsistent_specs_are_rejected() {
    let mut a = ArchSpec::desk(4);
    a.blocks.pop();
    assert!(matches!(BlockNet::<f32>::new(&a, &mut Rng::new(0)), Err(Error::Arch(_))));
    let mut a = ArchSpec::desk(4);
    a.blocks.insert(3, BlockSpec::Classifier);
    assert!(BlockNet::<f32>::new(&a, &mut Rng::new(0)).is_err());
    let mut a = ArchSpec::desk(4);
    a.num_classes = 1;
    assert!(BlockNet::<f32>::new(&a, &mut Rng::new(0)).is_err());
}

#[test]
fn dense_blocks_after_pooling() {
    let arch = ArchSpec {
        in_channels: 3,
        height: 16,
        width: 16,
        num_classes: 3,
        blocks: vec![
            BlockSpec::ResidualConv {
                channels: 8,
                stride: 2,
                batch_norm: true,
            },
            BlockSpec::ResidualDense {
                width: 12,
                batch_norm: false,
            },
            BlockSpec::Classifier,
        ],
    };
    let m = BlockNet::<f64>::new(&arch, &mut Rng::new(0)).unwrap();
    assert_eq!(m.num_blocks(), 2);
    assert_eq!(m.feature_dim(), 12);
    let out = m.forward(&images(3, 0), BnMode::Batch).unwrap();
    assert_eq!(out.logits.shape(), &[3, 3]);
}

#[test]
fn snapshot_restore_round_trip() {
    let mut m = desk(1);
    let snap = m.snapshot();
    for p in m.params_mut() {
        p.data_mut()[0] += 1.0;
    }
    m.running_stats_mut()[0].mean.data_mut()[0] = 3.0;
    assert_ne!(m.snapshot(), snap);
    m.restore(&snap).unwrap();
    assert_eq!(m.snapshot(), snap);

    let mut other = BlockNet::<f64>::new(&ArchSpec::desk(3), &mut Rng::new(0)).unwrap();
    assert!(matches!(other.restore(&snap), Err(Error::SpecMismatch(_))));
}

#[test]
fn restore_leaves_optimizer_moments_alone() {
    let mut m = desk(1);
    let mask = m.mask_all();
    let mut adam = m.optimizer(dplot_tensor::AdamConfig::default(), &mask);
    let snap = m.snapshot();
    let grads: Vec<Tensor<f64>> = m.params().iter().map(|p| Tensor::ones(p.shape())).collect();
    adam.step(m.params_mut().iter_mut().zip(grads.iter())).unwrap();
    let moment = adam.first_moment(0).clone();
    m.restore(&snap).unwrap();
    assert_eq!(adam.step_count(), 1);
    assert_eq!(adam.first_moment(0), &moment);
}

#[test]
fn ema_identity_copy_and_analytic() {
    let student = desk(1);
    let mut teacher = desk(2);
    let before = teacher.snapshot();
    teacher.ema_update(&student, 1.0).unwrap();
    assert_eq!(teacher.snapshot(), before);
    teacher.ema_update(&student, 0.0).unwrap();
    assert_eq!(teacher.params(), student.params());
    assert_eq!(teacher.running_stats(), student.running_stats());

    let mut t = desk(0);
    let mut s = desk(0);
    t.params_mut()[0].data_mut()[0] = 0.0;
    s.params_mut()[0].data_mut()[0] = 1.0;
    t.ema_update(&s, 0.999).unwrap();
    assert!((t.params()[0].data()[0] - 0.001).abs() < 1e-12);

    assert!(t.ema_update(&s, 1.5).is_err());
    let other = BlockNet::<f64>::new(&ArchSpec::desk(3), &mut Rng::new(0)).unwrap();
    assert!(matches!(t.ema_update(&other, 0.5), Err(Error::SpecMismatch(_))));
}

#[test]
fn ema_averages_running_statistics() {
    let mut t = desk(0);
    let mut s = desk(0);
    s.recalibrate_bn(&images(8, 1)).unwrap();
    let target = s.running_stats()[0].mean.data()[0];
    t.ema_update(&s, 0.5).unwrap();
    assert!((t.running_stats()[0].mean.data()[0] - 0.5 * target).abs() < 1e-12);
}

#[test]
fn recalibration_matches_batch_statistics() {
    let mut m = desk(3);
    let x = images(16, 9);
    let params = m.params().to_vec();
    let batch = m.forward(&x, BnMode::Batch).unwrap();
    m.recalibrate_bn(&x).unwrap();
    let running = m.forward(&x, BnMode::Running).unwrap();
    assert!(batch.logits.max_abs_diff(&running.logits).unwrap() < 1e-5);
    assert_eq!(m.params(), &params[..]);
    assert!(m.recalibrate_bn(&images(1, 0)).is_err());
}

/// Mean over channels of |mean of the first BN layer's normalized input|.
fn first_layer_offset(m: &BlockNet<f64>, x: &Tensor<f64>) -> f64 {
    let stats = &m.forward(x, BnMode::Batch).unwrap().batch_stats[0];
    let rs = &m.running_stats()[0];
    stats
        .mean
        .iter()
        .zip(rs.mean.data().iter().zip(rs.var.data()))
        .map(|(&b, (&rm, &rv))| ((b - rm) / (rv + 1e-5).sqrt()).abs())
        .sum::<f64>()
        / stats.mean.len() as f64
}

#[test]
fn recalibration_removes_shift_offset() {
    let mut m = desk(3);
    m.recalibrate_bn(&images(32, 1)).unwrap();
    let shifted = images(32, 2).map(|v| (v + 0.4).min(1.0));
    let stale = first_layer_offset(&m, &shifted);
    m.recalibrate_bn(&shifted).unwrap();
    let fresh = first_layer_offset(&m, &shifted);
    assert!(fresh < stale, "{fresh} vs {stale}");
    assert!(fresh < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ema_is_convex(alpha in 0.0f64..=1.0, s1 in 0u64..1000, s2 in 0u64..1000) {
        let student = desk(s1);
        let mut teacher = desk(s2);
        let before = teacher.params().to_vec();
        teacher.ema_update(&student, alpha).unwrap();
        for ((t, b), s) in teacher.params().iter().zip(&before).zip(student.params()) {
            for ((&t, &b), &s) in t.data().iter().zip(b.data()).zip(s.data()) {
                let (lo, hi) = if b < s { (b, s) } else { (s, b) };
                prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
            }
        }
    }
}
