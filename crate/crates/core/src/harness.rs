//! End-to-end runs: data pools, pretraining, streaming evaluation of the
//! adaptation methods, ablations and single-sample mode.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use dplot_tensor::{AdamConfig, Rng, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapt::{Ablation, AdaptConfig, Adapter, Method, Policy};
use crate::augment::PseudoLabelMenu;
use crate::config::{PretrainConfig, RunConfig, SingleSampleConfig};
use crate::data::{build_stream, gen_shapegrid, load_dataset, save_dataset, ImageBatch, StreamSpec, IMAGE_LEN};
use crate::error::{io_err, Error, Result};
use crate::losses::label_cross_entropy;
use crate::model::{ArchSpec, BlockNet, BnMode};
use crate::selection::SelectionReport;

/// Columns of the metrics file, in order.
pub const METRICS_HEADER: &str =
    "run_id,seed,method,stream_pos,corruption,severity,batch_err,cum_err,mean_entropy,max_class_frac,wall_ms";

/// Batches above this predicted-class share count towards collapse.
pub const COLLAPSE_FRACTION: f64 = 0.9;
/// Consecutive batches above [`COLLAPSE_FRACTION`] that flag a collapse.
pub const COLLAPSE_RUN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub stream_pos: usize,
    pub corruption: String,
    pub severity: u8,
    pub batch_err: f64,
    pub cum_err: f64,
    pub mean_entropy: f64,
    pub max_class_frac: f64,
    pub wall_ms: f64,
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Invalid(e.to_string())))
        .collect()
}

/// Train, validation and test images.
#[derive(Clone, Debug)]
pub struct Pools {
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

pub fn make_pools(cfg: &RunConfig) -> Result<Pools> {
    let rng = Rng::new(cfg.data.seed);
    let g = cfg.data.shapegrid();
    Ok(Pools {
        train: gen_shapegrid(cfg.data.train_size, &g, &mut rng.fork(1))?,
        val: gen_shapegrid(cfg.data.val_size, &g, &mut rng.fork(2))?,
        test: gen_shapegrid(cfg.test_size(), &g, &mut rng.fork(3))?,
    })
}

pub fn save_pools(pools: &Pools, dir: &Path, cfg: &RunConfig) -> Result<()> {
    let meta: BTreeMap<String, serde_json::Value> = [(
        "data".to_string(),
        serde_json::to_value(&cfg.data).map_err(|e| Error::Invalid(e.to_string()))?,
    )]
    .into();
    for (name, set) in [("train", &pools.train), ("val", &pools.val), ("test", &pools.test)] {
        save_dataset(set, &dir.join(name), meta.clone())?;
    }
    Ok(())
}

/// Cached pools when `paths.data` holds them, freshly generated otherwise.
pub fn load_or_make_pools(cfg: &RunConfig) -> Result<Pools> {
    if let Some(dir) = &cfg.paths.data {
        if dir.join("train").join(crate::checkpoint::MANIFEST_FILE).exists() {
            return Ok(Pools {
                train: load_dataset(&dir.join("train"))?,
                val: load_dataset(&dir.join("val"))?,
                test: load_dataset(&dir.join("test"))?,
            });
        }
    }
    make_pools(cfg)
}

/// Misclassification rate of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &BlockNet<T>, data: &ImageBatch, mode: BnMode, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation on an empty set".into()));
    }
    let mut wrong = 0usize;
    for chunk in data.chunks(batch) {
        let out = model.forward(&chunk.tensor::<T>(), mode)?;
        wrong += out
            .logits
            .argmax_rows()
            .iter()
            .zip(&chunk.labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub clean_val_error: f64,
}

fn diverged(context: &str, e: Error) -> Error {
    match e {
        Error::Tensor(dplot_tensor::TensorError::NonFinite { op }) => {
            Error::Diverged(format!("{context}: non-finite value in {op}"))
        }
        other => other,
    }
}

/// Cross-entropy training with Adam on clean images.
pub fn pretrain<T: Scalar>(
    arch: &ArchSpec,
    train: &ImageBatch,
    val: &ImageBatch,
    cfg: &PretrainConfig,
    eval_batch: usize,
) -> Result<(BlockNet<T>, PretrainReport)> {
    let rng = Rng::new(cfg.seed);
    let mut model = BlockNet::<T>::new(arch, &mut rng.fork(1))?;
    let mask = model.mask_all();
    let mut adam = model.optimizer(AdamConfig::with_lr(cfg.lr), &mask);
    let mut order_rng = rng.fork(2);
    let mut flip_rng = rng.fork(3);
    let mut steps = 0;
    let mut final_loss = None;
    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(train.len());
        for rows in order.chunks(cfg.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            let mut batch = train.select(rows)?;
            if cfg.flip_augment {
                for img in batch.images.data_mut().chunks_exact_mut(IMAGE_LEN) {
                    if flip_rng.bernoulli(0.5) {
                        for row in img.chunks_exact_mut(crate::data::SIDE) {
                            row.reverse();
                        }
                    }
                }
            }
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &mask);
                let x = tape.constant(batch.tensor::<T>());
                let rec = model.forward_on(&mut tape, &bound, x, BnMode::Batch)?;
                let loss = label_cross_entropy(&mut tape, rec.logits, &batch.labels)?;
                let value = tape.value(loss).item().as_f64();
                let mut grads = tape.backward(loss)?;
                model.optimizer_step(&mut adam, &mask, &bound, &mut grads)?;
                model.commit_batch_stats(&rec.batch_stats)?;
                Ok(value)
            };
            let loss = step().map_err(|e| diverged(&format!("pretraining epoch {epoch}, step {steps}"), e))?;
            final_loss = Some(loss);
            steps += 1;
        }
    }
    let clean_val_error = evaluate(&model, val, BnMode::Running, eval_batch)?;
    Ok((
        model,
        PretrainReport {
            epochs: cfg.epochs,
            steps,
            final_loss,
            clean_val_error,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub corruption: String,
    pub severity: u8,
    pub error: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub batches: usize,
    pub images: usize,
    pub mean_error: f64,
    /// Error per (corruption, severity), in first-seen order.
    pub by_domain: Vec<SegmentError>,
    pub collapsed: bool,
    pub clean_error_before: f64,
    pub clean_error_after: f64,
    pub updates: u64,
}

pub struct RunResult {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    /// Per-batch predictions, for paired comparisons.
    pub predictions: Vec<Vec<usize>>,
}

struct Tracker {
    run_id: String,
    seed: u64,
    method: String,
    wall_clock: bool,
    records: Vec<MetricsRecord>,
    predictions: Vec<Vec<usize>>,
    wrong: usize,
    seen: usize,
    domains: Vec<((String, u8), (usize, usize))>,
    streak: usize,
    collapsed: bool,
}

impl Tracker {
    fn new(run_id: &str, seed: u64, method: &str, wall_clock: bool) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            method: method.into(),
            wall_clock,
            records: Vec::new(),
            predictions: Vec::new(),
            wrong: 0,
            seen: 0,
            domains: Vec::new(),
            streak: 0,
            collapsed: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        position: usize,
        corruption: &str,
        severity: u8,
        labels: &[usize],
        predictions: Vec<usize>,
        mean_entropy: f64,
        classes: usize,
        started: Instant,
    ) {
        let n = labels.len();
        let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
        self.wrong += wrong;
        self.seen += n;
        let mut counts = vec![0usize; classes];
        for &p in &predictions {
            counts[p] += 1;
        }
        let max_class_frac = *counts.iter().max().unwrap_or(&0) as f64 / n as f64;
        if max_class_frac > COLLAPSE_FRACTION {
            self.streak += 1;
            if self.streak >= COLLAPSE_RUN {
                self.collapsed = true;
            }
        } else {
            self.streak = 0;
        }
        let key = (corruption.to_string(), severity);
        match self.domains.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (w, s))) => {
                *w += wrong;
                *s += n;
            }
            None => self.domains.push((key, (wrong, n))),
        }
        self.records.push(MetricsRecord {
            run_id: self.run_id.clone(),
            seed: self.seed,
            method: self.method.clone(),
            stream_pos: position,
            corruption: corruption.into(),
            severity,
            batch_err: wrong as f64 / n as f64,
            cum_err: self.wrong as f64 / self.seen as f64,
            mean_entropy,
            max_class_frac,
            wall_ms: if self.wall_clock {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
        self.predictions.push(predictions);
    }

    fn finish(self, clean_error_before: f64, clean_error_after: f64, updates: u64) -> RunResult {
        let summary = RunSummary {
            run_id: self.run_id,
            seed: self.seed,
            method: self.method,
            batches: self.records.len(),
            images: self.seen,
            mean_error: if self.seen == 0 { 0.0 } else { self.wrong as f64 / self.seen as f64 },
            by_domain: self
                .domains
                .into_iter()
                .map(|((corruption, severity), (w, n))| SegmentError {
                    corruption,
                    severity,
                    error: w as f64 / n as f64,
                    images: n,
                })
                .collect(),
            collapsed: self.collapsed,
            clean_error_before,
            clean_error_after,
            updates,
        };
        RunResult {
            summary,
            records: self.records,
            predictions: self.predictions,
        }
    }
}

/// Everything a streaming run needs besides the adapter itself.
pub struct RunContext<'a> {
    pub stream: &'a StreamSpec,
    pub pools: &'a Pools,
    pub seed: u64,
    pub wall_clock: bool,
    pub warmup_batches: usize,
    pub eval_batch: usize,
    /// Skip the clean-error measurements (reported as NaN-free zeros).
    pub skip_clean_eval: bool,
}

impl RunContext<'_> {
    fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            seed: self.seed,
            ..self.stream.clone()
        }
    }

    fn clean_error<T: Scalar>(&self, model: &BlockNet<T>) -> Result<f64> {
        if self.skip_clean_eval {
            return Ok(0.0);
        }
        evaluate(model, &self.pools.val, BnMode::Running, self.eval_batch)
    }

    fn warmup<T: Scalar>(&self, adapter: &mut Adapter<T>) -> Result<()> {
        if self.warmup_batches == 0 {
            return Ok(());
        }
        let b = self.stream.batch_size.max(2);
        let batches: Vec<Tensor<f32>> = self
            .pools
            .train
            .chunks(b)
            .filter(|c| c.len() >= 2)
            .take(self.warmup_batches)
            .map(|c| c.images)
            .collect();
        if batches.len() < self.warmup_batches {
            return Err(Error::Data(format!(
                "warm-up needs {} batches, the training pool holds {}",
                self.warmup_batches,
                batches.len()
            )));
        }
        adapter.warmup(batches.iter(), self.warmup_batches)
    }
}

/// Streams the test batches through `adapter`, predicting and adapting on
/// each.
pub fn run_stream<T: Scalar>(adapter: &mut Adapter<T>, ctx: &RunContext<'_>, run_id: &str, label: &str) -> Result<RunResult> {
    let before = ctx.clean_error(adapter.student())?;
    ctx.warmup(adapter)?;
    let spec = ctx.stream_spec();
    let classes = adapter.student().num_classes();
    let mut tracker = Tracker::new(run_id, ctx.seed, label, ctx.wall_clock);
    for item in build_stream(&spec, &ctx.pools.test)? {
        let sb = item?;
        let started = Instant::now();
        let out = adapter
            .step(&sb.batch.images)
            .map_err(|e| diverged(&format!("{run_id} at stream position {}", sb.position), e))?;
        tracker.record(
            sb.position,
            sb.segment.kind_name(),
            sb.segment.severity,
            &sb.batch.labels,
            out.predictions,
            out.diagnostics.mean_entropy,
            classes,
            started,
        );
    }
    let after = ctx.clean_error(adapter.student())?;
    Ok(tracker.finish(before, after, adapter.num_updates()))
}

pub fn run_id(label: &str, seed: u64) -> String {
    format!("{label}-s{seed}")
}

/// One method on one seed.
pub fn run_method<T: Scalar>(
    model: &BlockNet<T>,
    method: Method,
    adapt: &AdaptConfig,
    ctx: &RunContext<'_>,
) -> Result<RunResult> {
    let mut adapter = Adapter::for_method(model.clone(), method, adapt, ctx.seed)?;
    run_stream(&mut adapter, ctx, &run_id(method.name(), ctx.seed), method.name())
}

/// Per-method summaries over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<RunSummary>,
    /// Median over seeds of each label's mean error.
    pub median_error: BTreeMap<String, f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(runs: Vec<RunSummary>) -> BenchReport {
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        by_label.entry(r.method.clone()).or_default().push(r.mean_error);
    }
    BenchReport {
        median_error: by_label.into_iter().map(|(k, v)| (k, median(&v))).collect(),
        runs,
    }
}

/// Every method in `methods` on every seed, over identical streams.
pub fn run_benchmark<T: Scalar>(
    model: &BlockNet<T>,
    methods: &[Method],
    adapt: &AdaptConfig,
    cfg: &RunConfig,
    pools: &Pools,
) -> Result<(BenchReport, Vec<MetricsRecord>)> {
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = context(cfg, pools, seed);
        for &m in methods {
            let r = run_method(model, m, adapt, &ctx)?;
            summaries.push(r.summary);
            records.extend(r.records);
        }
    }
    Ok((summarize(summaries), records))
}

pub fn context<'a>(cfg: &'a RunConfig, pools: &'a Pools, seed: u64) -> RunContext<'a> {
    RunContext {
        stream: &cfg.stream,
        pools,
        seed,
        wall_clock: cfg.wall_clock,
        warmup_batches: cfg.warmup_batches,
        eval_batch: cfg.eval_batch,
        skip_clean_eval: false,
    }
}

/// One ablation run: a label plus the policy and config it uses.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub policy_of: VariantKind,
    pub adapt: AdaptConfig,
}

#[derive(Clone, Copy, Debug)]
pub enum VariantKind {
    Component(Ablation),
    Gamma(f64),
    Menu(PseudoLabelMenu),
}

/// Expands the ablation section into concrete variants. Threshold variants
/// re-threshold `report`; the others use `adapt.selected_blocks`.
pub fn ablation_variants(cfg: &RunConfig, adapt: &AdaptConfig, report: Option<&SelectionReport>) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for &v in &cfg.ablation.variants {
        out.push(Variant {
            label: format!("ablation-{v}"),
            policy_of: VariantKind::Component(v),
            adapt: adapt.clone(),
        });
    }
    if !cfg.ablation.gammas.is_empty() {
        let report = report.ok_or_else(|| Error::Config("threshold sweep needs a selection report".into()))?;
        for &g in &cfg.ablation.gammas {
            out.push(Variant {
                label: format!("gamma-{g}"),
                policy_of: VariantKind::Gamma(g),
                adapt: AdaptConfig {
                    selected_blocks: report.with_gamma(g)?.selected,
                    ..adapt.clone()
                },
            });
        }
    }
    for &m in &cfg.ablation.menus {
        out.push(Variant {
            label: format!("menu-{}", m.name()),
            policy_of: VariantKind::Menu(m),
            adapt: AdaptConfig {
                pseudo_label: m,
                ..adapt.clone()
            },
        });
    }
    Ok(out)
}

pub fn run_variant<T: Scalar>(model: &BlockNet<T>, variant: &Variant, ctx: &RunContext<'_>) -> Result<RunResult> {
    let policy = match variant.policy_of {
        VariantKind::Component(a) => Policy::for_ablation(a, &variant.adapt),
        VariantKind::Gamma(_) | VariantKind::Menu(_) => Policy::for_method(Method::Dplot, &variant.adapt),
    };
    let mut adapter = Adapter::new(model.clone(), policy, &variant.adapt, ctx.seed)?;
    run_stream(&mut adapter, ctx, &run_id(&variant.label, ctx.seed), &variant.label)
}

/// All variants on all seeds; variants of one seed see the same stream.
pub fn run_ablation<T: Scalar>(
    model: &BlockNet<T>,
    variants: &[Variant],
    cfg: &RunConfig,
    pools: &Pools,
) -> Result<(BenchReport, Vec<MetricsRecord>)> {
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = context(cfg, pools, seed);
        for v in variants {
            let r = run_variant(model, v, &ctx)?;
            summaries.push(r.summary);
            records.extend(r.records);
        }
    }
    Ok((summarize(summaries), records))
}

/// Per-sample prediction with a buffer of the last `b` samples and an
/// update every `round(b / k)` samples. Predictions use running statistics;
/// metrics are still reported per stream batch.
pub fn run_single_sample<T: Scalar>(
    model: &BlockNet<T>,
    method: Method,
    adapt: &AdaptConfig,
    ss: &SingleSampleConfig,
    ctx: &RunContext<'_>,
) -> Result<RunResult> {
    ss.validate()?;
    let mut adapter = Adapter::for_method(model.clone(), method, adapt, ctx.seed)?;
    adapter.set_lr_scale(ss.lr_scale());
    let label = format!("{}-b{}", method.name(), ss.buffer);
    let run_id = run_id(&label, ctx.seed);
    let before = ctx.clean_error(adapter.student())?;
    ctx.warmup(&mut adapter)?;
    let spec = ctx.stream_spec();
    let classes = adapter.student().num_classes();
    let cadence = ss.cadence();
    let mut tracker = Tracker::new(&run_id, ctx.seed, &label, ctx.wall_clock);
    let mut buffer: VecDeque<Vec<f32>> = VecDeque::with_capacity(ss.buffer);
    let mut since_update = 0usize;

    let predict = |adapter: &Adapter<T>, x: &Tensor<f32>, rows: std::ops::Range<usize>| -> Result<(Vec<usize>, f64)> {
        let part = x.slice_rows(rows.start, rows.end)?;
        let logits = adapter.predict(&part, BnMode::Running)?;
        let probs = crate::adapt::softmax(&logits);
        let h: f64 = crate::losses::row_entropies(&probs).iter().sum();
        Ok((logits.argmax_rows(), h))
    };

    for item in build_stream(&spec, &ctx.pools.test)? {
        let sb = item?;
        let started = Instant::now();
        let x = &sb.batch.images;
        let n = x.dim(0);
        let mut preds = Vec::with_capacity(n);
        let mut entropy = 0.0;
        let mut pending = 0;
        for i in 0..n {
            if buffer.len() == ss.buffer {
                buffer.pop_front();
            }
            buffer.push_back(x.data()[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].to_vec());
            since_update += 1;
            if since_update >= cadence && buffer.len() >= 2 {
                // predictions made before this update are final
                let (p, h) = predict(&adapter, x, pending..i + 1)?;
                preds.extend(p);
                entropy += h;
                pending = i + 1;
                let data: Vec<f32> = buffer.iter().flatten().copied().collect();
                let mut shape = x.shape().to_vec();
                shape[0] = buffer.len();
                let buf = Tensor::new(&shape, data)?;
                adapter
                    .update(&buf)
                    .map_err(|e| diverged(&format!("{run_id} at sample {}", sb.position * n + i), e))?;
                since_update = 0;
            }
        }
        if pending < n {
            let (p, h) = predict(&adapter, x, pending..n)?;
            preds.extend(p);
            entropy += h;
        }
        tracker.record(
            sb.position,
            sb.segment.kind_name(),
            sb.segment.severity,
            &sb.batch.labels,
            preds,
            entropy / n as f64,
            classes,
            started,
        );
    }
    let after = ctx.clean_error(adapter.student())?;
    Ok(tracker.finish(before, after, adapter.num_updates()))
}
