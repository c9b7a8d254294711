mod common;

use common::{shapes, tiny_arch, trained};
use dplot::adapt::{Ablation, AdaptConfig, Adapter, Method, Policy};
use dplot::checkpoint::{blob_path, save_checkpoint};
use dplot::config::{PretrainConfig, RunConfig, SingleSampleConfig};
use dplot::data::{gen_shapegrid, CorruptionKind, StreamSetting, StreamSpec};
use dplot::harness::*;
use dplot::model::BnMode;
use dplot_tensor::{Rng, Tensor};

fn pools() -> Pools {
    let (_, val) = trained();
    Pools {
        train: gen_shapegrid(256, &shapes(4), &mut Rng::new(21)).unwrap(),
        val: val.clone(),
        test: gen_shapegrid(1024, &shapes(4), &mut Rng::new(22)).unwrap(),
    }
}

fn stream(batches_per_segment: usize, batch_size: usize) -> StreamSpec {
    StreamSpec {
        setting: StreamSetting::Continual,
        kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::Blur],
        batches_per_segment,
        batch_size,
        seed: 0,
    }
}

fn ctx<'a>(stream: &'a StreamSpec, pools: &'a Pools, seed: u64) -> RunContext<'a> {
    RunContext {
        stream,
        pools,
        seed,
        wall_clock: false,
        warmup_batches: 0,
        eval_batch: 256,
        skip_clean_eval: false,
    }
}

fn dplot_cfg() -> AdaptConfig {
    AdaptConfig {
        selected_blocks: vec![1, 2],
        ..AdaptConfig::default()
    }
}

#[test]
fn metrics_files_have_the_fixed_header() {
    assert_eq!(
        METRICS_HEADER,
        "run_id,seed,method,stream_pos,corruption,severity,batch_err,cum_err,mean_entropy,max_class_frac,wall_ms"
    );
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    write_metrics(&[], &empty).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim_end(), METRICS_HEADER);

    let (model, _) = trained();
    let p = pools();
    let s = stream(2, 32);
    let r = run_method(model, Method::Source, &AdaptConfig::default(), &ctx(&s, &p, 0)).unwrap();
    let path = dir.path().join("nested").join("m.csv");
    write_metrics(&r.records, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 1 + r.records.len());
    assert_eq!(read_metrics(&path).unwrap(), r.records);
}

#[test]
fn cumulative_error_is_recomputable() {
    let (model, _) = trained();
    let p = pools();
    let s = stream(3, 24);
    let r = run_method(model, Method::Tent, &AdaptConfig::default(), &ctx(&s, &p, 1)).unwrap();
    assert_eq!(r.records.len(), 6);
    let (mut wrong, mut seen) = (0.0, 0.0);
    for (i, rec) in r.records.iter().enumerate() {
        assert_eq!(rec.stream_pos, i);
        assert!((0.0..=1.0).contains(&rec.batch_err) && (0.0..=1.0).contains(&rec.cum_err));
        assert!(rec.max_class_frac >= 0.25 && rec.max_class_frac <= 1.0);
        assert_eq!(rec.wall_ms, 0.0);
        wrong += rec.batch_err * 24.0;
        seen += 24.0;
        assert!((rec.cum_err - wrong / seen).abs() < 1e-12);
    }
    assert!((r.summary.mean_error - r.records[5].cum_err).abs() < 1e-12);
    assert_eq!(r.summary.by_domain.len(), 2);
    assert_eq!(r.summary.updates, 6);
    assert_eq!(r.summary.images, 144);
}

#[test]
fn source_on_clean_data_matches_validation_error() {
    let (model, val) = trained();
    let mut ad = Adapter::for_method(model.clone(), Method::Source, &AdaptConfig::default(), 0).unwrap();
    let mut wrong = 0;
    for b in val.chunks(64) {
        let out = ad.step(&b.images).unwrap();
        wrong += out.predictions.iter().zip(&b.labels).filter(|(p, l)| p != l).count();
    }
    let stream_err = wrong as f64 / val.len() as f64;
    let held_out = evaluate(model, val, BnMode::Running, 100).unwrap();
    assert!((stream_err - held_out).abs() <= 0.01);
}

#[test]
fn frozen_dplot_traces_the_source_ensemble() {
    let (model, _) = trained();
    let p = pools();
    let s = stream(2, 32);
    let c = ctx(&s, &p, 2);
    let frozen = AdaptConfig {
        lr_entropy: 0.0,
        lr_consistency: 0.0,
        alpha: 1.0,
        ..dplot_cfg()
    };
    let a = run_method(model, Method::Dplot, &frozen, &c).unwrap();
    let b = run_method(model, Method::Bn1, &frozen, &c).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.summary.mean_error, b.summary.mean_error);
}

#[test]
fn variant_d_is_tent() {
    let c = dplot_cfg();
    assert_eq!(Policy::for_ablation(Ablation::D, &c), Policy::for_method(Method::Tent, &c));
    let (model, _) = trained();
    let p = pools();
    let s = stream(2, 32);
    let cx = ctx(&s, &p, 3);
    let variant = Variant {
        label: "ablation-D".into(),
        policy_of: VariantKind::Component(Ablation::D),
        adapt: c.clone(),
    };
    let d = run_variant(model, &variant, &cx).unwrap();
    let t = run_method(model, Method::Tent, &c, &cx).unwrap();
    assert_eq!(d.predictions, t.predictions);
    assert_eq!(d.summary.clean_error_after, t.summary.clean_error_after);
}

#[test]
fn collapse_is_flagged() {
    let (model, _) = trained();
    let mut stuck = model.clone();
    let last = stuck.params().len() - 1;
    stuck.params_mut()[last] = Tensor::from_f64(&[4], &[50.0, 0.0, 0.0, 0.0]).unwrap();
    let p = pools();
    let s = stream(5, 16);
    let r = run_method(&stuck, Method::Source, &AdaptConfig::default(), &ctx(&s, &p, 0)).unwrap();
    assert!(r.records.iter().all(|x| x.max_class_frac == 1.0));
    assert!(r.summary.collapsed);
    let ok = run_method(model, Method::Source, &AdaptConfig::default(), &ctx(&s, &p, 0)).unwrap();
    assert!(!ok.summary.collapsed);
}

#[test]
fn pretraining_is_deterministic_and_zero_epochs_is_chance() {
    let cfg = shapes(4);
    let train = gen_shapegrid(192, &cfg, &mut Rng::new(1)).unwrap();
    let val = gen_shapegrid(400, &cfg, &mut Rng::new(2)).unwrap();
    let arch = tiny_arch(4);
    let pc = PretrainConfig {
        epochs: 1,
        batch_size: 32,
        ..PretrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut blobs = Vec::new();
    for run in 0..2 {
        let (m, rep) = pretrain::<f32>(&arch, &train, &val, &pc, 128).unwrap();
        assert_eq!(rep.steps, 6);
        let d = dir.path().join(format!("run{run}"));
        save_checkpoint(&m, &d, Default::default()).unwrap();
        blobs.push((std::fs::read(blob_path(&d)).unwrap(), std::fs::read(d.join("manifest")).unwrap()));
    }
    assert_eq!(blobs[0], blobs[1]);

    let zero = PretrainConfig { epochs: 0, ..pc };
    let (_, rep) = pretrain::<f32>(&arch, &train, &val, &zero, 128).unwrap();
    assert_eq!(rep.steps, 0);
    assert!((rep.clean_val_error - 0.75).abs() <= 0.1, "{}", rep.clean_val_error);
}

#[test]
fn single_sample_schedule() {
    let ss = SingleSampleConfig {
        buffer: 64,
        freq: 0.25,
        base_batch: 200,
    };
    assert!((ss.lr_scale() - 0.32).abs() < 1e-12);
    assert_eq!(ss.cadence(), 256);
    let k1 = SingleSampleConfig { freq: 1.0, ..ss.clone() };
    assert_eq!(k1.cadence(), 64);
    let odd = SingleSampleConfig {
        buffer: 8,
        freq: 3.0,
        base_batch: 64,
    };
    assert_eq!(odd.cadence(), 3);
    assert!(SingleSampleConfig { buffer: 0, ..ss.clone() }.validate().is_err());
    assert!(SingleSampleConfig { freq: 0.0, ..ss }.validate().is_err());
}

#[test]
fn full_buffer_matches_the_batched_run() {
    let (model, _) = trained();
    let p = pools();
    let s = stream(2, 32);
    let c = ctx(&s, &p, 4);
    let ss = SingleSampleConfig {
        buffer: 32,
        freq: 1.0,
        base_batch: 32,
    };
    let single = run_single_sample(model, Method::Dplot, &dplot_cfg(), &ss, &c).unwrap();
    let batched = run_method(model, Method::Dplot, &dplot_cfg(), &c).unwrap();
    assert_eq!(single.summary.updates, 4);
    assert_eq!(single.summary.clean_error_after, batched.summary.clean_error_after);
    assert_eq!(single.records.len(), batched.records.len());
    for b in [8, 16] {
        let ss = SingleSampleConfig {
            buffer: b,
            freq: 1.0,
            base_batch: 32,
        };
        let r = run_single_sample(model, Method::Dplot, &dplot_cfg(), &ss, &c).unwrap();
        assert_eq!(r.summary.updates as usize, 128 / b);
        assert!(r.records.iter().all(|x| x.mean_entropy.is_finite()));
    }
}

#[test]
fn benchmark_summarizes_per_method_medians() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let (model, _) = trained();
    let p = pools();
    let cfg = RunConfig {
        seeds: vec![0, 1, 2],
        stream: stream(1, 32),
        adapt: dplot_cfg(),
        ..RunConfig::default()
    };
    let (report, records) = run_benchmark(model, &[Method::Source, Method::Bn1], &cfg.adapt, &cfg, &p).unwrap();
    assert_eq!(report.runs.len(), 6);
    assert_eq!(records.len(), 12);
    let src: Vec<f64> = report.runs.iter().filter(|r| r.method == "source").map(|r| r.mean_error).collect();
    assert_eq!(report.median_error["source"], median(&src));
}

#[test]
fn ablation_variants_expand() {
    let cfg = RunConfig::default();
    let report = dplot::selection::SelectionReport {
        raw: vec![0.9, 0.8, 0.1],
        scaled: vec![1.0, 0.875, 0.0],
        gamma: 0.75,
        selected: vec![1, 2],
        perturbation: Default::default(),
        em: Default::default(),
        seed: 0,
        warning: None,
    };
    let v = ablation_variants(&cfg, &dplot_cfg(), Some(&report)).unwrap();
    assert_eq!(v.len(), 4 + 7 + 4);
    let g0 = v.iter().find(|x| x.label == "gamma-0").unwrap();
    assert_eq!(g0.adapt.selected_blocks, vec![1, 2]);
    let g9 = v.iter().find(|x| x.label == "gamma-0.9").unwrap();
    assert_eq!(g9.adapt.selected_blocks, vec![1]);
    assert!(ablation_variants(&cfg, &dplot_cfg(), None).is_err());
}
