//! Test-time adaptation methods: source-only, BN-1, TENT, and the
//! block-selective entropy minimization with paired-view pseudo-labels and
//! an EMA teacher.

use std::fmt;
use std::str::FromStr;

use dplot_tensor::{AdamConfig, AdamState, Rng, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::augment::{random_view, PseudoLabelMenu};
use crate::data::flip_h;
use crate::error::{Error, Result};
use crate::losses::{entropy_loss, paired_consistency, row_entropies};
use crate::model::{BlockNet, BnMode, ParamMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "bn1")]
    Bn1,
    #[serde(rename = "tent")]
    Tent,
    #[serde(rename = "tent+selection")]
    TentSelection,
    #[serde(rename = "dplot")]
    Dplot,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Source,
        Method::Bn1,
        Method::Tent,
        Method::TentSelection,
        Method::Dplot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Bn1 => "bn1",
            Method::Tent => "tent",
            Method::TentSelection => "tent+selection",
            Method::Dplot => "dplot",
        }
    }

    pub fn needs_selection(self) -> bool {
        matches!(self, Method::TentSelection | Method::Dplot)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected source, bn1, tent, tent+selection or dplot)")))
    }
}

/// Component ablations; each removes one more piece than the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Everything.
    A,
    /// Without paired-view consistency.
    B,
    /// Additionally without the EMA teacher and ensemble.
    C,
    /// Additionally without block selection: entropy on BN affine only.
    D,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "D" | "d" => Ok(Ablation::D),
            _ => Err(Error::Config(format!("unknown ablation variant {s:?}"))),
        }
    }
}

/// Which parameters entropy minimization updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyScope {
    /// All parameters of the selected blocks.
    SelectedBlocks,
    /// BN affine parameters of every layer.
    BnAffine,
    /// BN affine parameters inside the selected blocks.
    SelectedBnAffine,
}

/// When the reported prediction is computed relative to the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTiming {
    Pre,
    #[default]
    Post,
}

/// The switches that distinguish methods and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Policy {
    pub bn_mode: BnMode,
    pub entropy: Option<EntropyScope>,
    /// Minimize entropy over the batch and its flip instead of the batch.
    pub entropy_on_flip: bool,
    pub consistency: bool,
    pub teacher: bool,
    pub ensemble: bool,
    pub timing: PredictionTiming,
}

impl Policy {
    pub fn for_method(method: Method, cfg: &AdaptConfig) -> Self {
        let frozen = Policy {
            bn_mode: BnMode::Batch,
            entropy: None,
            entropy_on_flip: false,
            consistency: false,
            teacher: false,
            ensemble: false,
            timing: PredictionTiming::Pre,
        };
        let tent = Policy {
            entropy: Some(EntropyScope::BnAffine),
            ..frozen
        };
        match method {
            Method::Source => Policy {
                bn_mode: BnMode::Running,
                ..frozen
            },
            Method::Bn1 => frozen,
            Method::Tent => tent,
            Method::TentSelection => Policy {
                entropy: Some(EntropyScope::SelectedBnAffine),
                ..tent
            },
            Method::Dplot => Self::for_ablation(Ablation::A, cfg),
        }
    }

    pub fn for_ablation(variant: Ablation, cfg: &AdaptConfig) -> Self {
        let full = Policy {
            bn_mode: BnMode::Batch,
            entropy: Some(EntropyScope::SelectedBlocks),
            entropy_on_flip: true,
            consistency: true,
            teacher: true,
            ensemble: cfg.ensemble,
            timing: cfg.prediction,
        };
        match variant {
            Ablation::A => full,
            Ablation::B => Policy {
                consistency: false,
                ..full
            },
            Ablation::C => Policy {
                consistency: false,
                teacher: false,
                ensemble: false,
                ..full
            },
            Ablation::D => Self::for_method(Method::Tent, cfg),
        }
    }

    fn updates(&self) -> bool {
        self.entropy.is_some() || self.consistency
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "default_lr_entropy")]
    pub lr_entropy: f64,
    #[serde(default = "default_lr_consistency")]
    pub lr_consistency: f64,
    /// EMA decay of the teacher.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Selected blocks (1-based).
    #[serde(default)]
    pub selected_blocks: Vec<usize>,
    #[serde(default = "yes")]
    pub ensemble: bool,
    #[serde(default)]
    pub prediction: PredictionTiming,
    #[serde(default)]
    pub pseudo_label: PseudoLabelMenu,
    /// Number of random views for the multi-view menus.
    #[serde(default = "default_views")]
    pub views: usize,
}

fn default_lr_entropy() -> f64 {
    1e-3
}
fn default_lr_consistency() -> f64 {
    1e-4
}
fn default_alpha() -> f64 {
    0.999
}
fn yes() -> bool {
    true
}
fn default_views() -> usize {
    8
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr_entropy: default_lr_entropy(),
            lr_consistency: default_lr_consistency(),
            alpha: default_alpha(),
            selected_blocks: Vec::new(),
            ensemble: true,
            prediction: PredictionTiming::Post,
            pseudo_label: PseudoLabelMenu::PairedView,
            views: default_views(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_entropy >= 0.0 && self.lr_entropy.is_finite()) {
            return bad(format!("lr_entropy = {} must be a non-negative number", self.lr_entropy));
        }
        if !(self.lr_consistency >= 0.0 && self.lr_consistency.is_finite()) {
            return bad(format!("lr_consistency = {} must be a non-negative number", self.lr_consistency));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if self.views == 0 {
            return bad("views must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Mean entropy of the reported prediction distribution.
    pub mean_entropy: f64,
    /// Fraction of predictions agreeing with the pseudo-label argmax.
    pub agreement: Option<f64>,
    pub entropy_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
}

pub struct StepOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub predictions: Vec<usize>,
    pub diagnostics: Diagnostics,
    /// Teacher pseudo-labels used by this step, when any.
    pub pseudo_labels: Option<Tensor<T>>,
}

/// Result of one parameter update.
#[derive(Default)]
pub struct UpdateInfo<T: Scalar> {
    pub pseudo_labels: Option<Tensor<T>>,
    pub entropy_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    /// Student logits on the unflipped batch from the entropy forward,
    /// available when that forward saw exactly the batch.
    pub entropy_logits: Option<Tensor<T>>,
}

/// Adaptation state: student, optional EMA teacher, and one optimizer per
/// learning rate.
pub struct Adapter<T: Scalar> {
    policy: Policy,
    config: AdaptConfig,
    student: BlockNet<T>,
    teacher: Option<BlockNet<T>>,
    entropy_mask: ParamMask,
    entropy_opt: Option<AdamState<T>>,
    consistency_mask: ParamMask,
    consistency_opt: Option<AdamState<T>>,
    rng: Rng,
    updates: u64,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(model: BlockNet<T>, policy: Policy, config: &AdaptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let selected = &config.selected_blocks;
        if let Some(&b) = selected.iter().find(|&&b| b == 0 || b > model.num_blocks()) {
            return Err(Error::Config(format!("selected block {b} outside 1..={}", model.num_blocks())));
        }
        let entropy_mask = match policy.entropy {
            None => model.mask_none(),
            Some(EntropyScope::SelectedBlocks) => model.mask_blocks(selected),
            Some(EntropyScope::BnAffine) => model.mask_bn_affine(None),
            Some(EntropyScope::SelectedBnAffine) => model.mask_bn_affine(Some(selected)),
        };
        if matches!(policy.entropy, Some(EntropyScope::SelectedBlocks | EntropyScope::SelectedBnAffine))
            && selected.is_empty()
        {
            return Err(Error::Config("method needs a non-empty set of selected blocks".into()));
        }
        if matches!(policy.entropy, Some(EntropyScope::BnAffine | EntropyScope::SelectedBnAffine))
            && !model.has_batch_norm()
        {
            return Err(Error::Config("BN-affine entropy minimization on a model without BN layers".into()));
        }
        if policy.bn_mode == BnMode::Batch && !model.has_batch_norm() && policy.entropy.is_none() {
            return Err(Error::Config("batch-statistics method on a model without BN layers".into()));
        }
        let entropy_opt = policy
            .entropy
            .map(|_| model.optimizer(AdamConfig::with_lr(config.lr_entropy), &entropy_mask));
        let consistency_mask = if policy.consistency { model.mask_all() } else { model.mask_none() };
        let consistency_opt = policy
            .consistency
            .then(|| model.optimizer(AdamConfig::with_lr(config.lr_consistency), &consistency_mask));
        let teacher = policy.teacher.then(|| model.clone());
        Ok(Self {
            policy,
            config: config.clone(),
            student: model,
            teacher,
            entropy_mask,
            entropy_opt,
            consistency_mask,
            consistency_opt,
            rng: Rng::new(seed),
            updates: 0,
        })
    }

    pub fn for_method(model: BlockNet<T>, method: Method, config: &AdaptConfig, seed: u64) -> Result<Self> {
        Self::new(model, Policy::for_method(method, config), config, seed)
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn student(&self) -> &BlockNet<T> {
        &self.student
    }

    pub fn teacher(&self) -> Option<&BlockNet<T>> {
        self.teacher.as_ref()
    }

    pub fn entropy_mask(&self) -> &ParamMask {
        &self.entropy_mask
    }

    pub fn entropy_optimizer(&self) -> Option<&AdamState<T>> {
        self.entropy_opt.as_ref()
    }

    pub fn consistency_optimizer(&self) -> Option<&AdamState<T>> {
        self.consistency_opt.as_ref()
    }

    pub fn num_updates(&self) -> u64 {
        self.updates
    }

    pub fn into_student(self) -> BlockNet<T> {
        self.student
    }

    /// Multiplies both learning rates by `scale` relative to the configured
    /// values.
    pub fn set_lr_scale(&mut self, scale: f64) {
        if let Some(o) = &mut self.entropy_opt {
            o.config.lr = self.config.lr_entropy * scale;
        }
        if let Some(o) = &mut self.consistency_opt {
            o.config.lr = self.config.lr_consistency * scale;
        }
    }

    /// Teacher pseudo-labels for `x`; no gradient reaches the teacher and its
    /// state is not modified.
    pub fn pseudo_label(&mut self, x: &Tensor<f32>) -> Result<Tensor<T>> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Invalid("pseudo-labels need a teacher".into()))?;
        pseudo_label(teacher, x, self.config.pseudo_label, self.config.views, &mut self.rng)
    }

    /// Prediction logits without any state change: student logits, plus
    /// teacher logits when ensembling.
    pub fn predict(&self, x: &Tensor<f32>, mode: BnMode) -> Result<Tensor<T>> {
        let xt: Tensor<T> = x.cast();
        let s = self.student.forward(&xt, mode)?.logits;
        match (&self.teacher, self.policy.ensemble) {
            (Some(t), true) => Ok(s.add(&t.forward(&xt, mode)?.logits)?),
            _ => Ok(s),
        }
    }

    /// One update on `x` in the fixed order: pseudo-labels from the current
    /// teacher, entropy step, consistency step, EMA.
    pub fn update(&mut self, x: &Tensor<f32>) -> Result<UpdateInfo<T>> {
        let mut info = UpdateInfo::default();
        if !self.policy.updates() {
            return Ok(info);
        }
        let n = x.dim(0);
        let xt: Tensor<T> = x.cast();
        let flipped: Tensor<T> = flip_h(&xt);
        if self.policy.consistency {
            info.pseudo_labels = Some(self.pseudo_label(x)?);
        }

        if let (Some(opt), Some(_)) = (&mut self.entropy_opt, self.policy.entropy) {
            let input = if self.policy.entropy_on_flip {
                Tensor::concat_rows(&[&xt, &flipped])?
            } else {
                xt.clone()
            };
            let mut tape = Tape::new();
            let bound = self.student.bind(&mut tape, &self.entropy_mask);
            let xv = tape.constant(input);
            let rec = self.student.forward_on(&mut tape, &bound, xv, BnMode::Batch)?;
            let probs = tape.softmax(rec.logits)?;
            let loss = entropy_loss(&mut tape, probs)?;
            info.entropy_loss = Some(tape.value(loss).item().as_f64());
            if !self.policy.entropy_on_flip {
                info.entropy_logits = Some(tape.value(rec.logits).slice_rows(0, n)?);
            }
            let mut grads = tape.backward(loss)?;
            self.student.optimizer_step(opt, &self.entropy_mask, &bound, &mut grads)?;
            self.student.commit_batch_stats(&rec.batch_stats)?;
        }

        if let (Some(opt), Some(target)) = (&mut self.consistency_opt, &info.pseudo_labels) {
            let mut tape = Tape::new();
            let bound = self.student.bind(&mut tape, &self.consistency_mask);
            let xv = tape.constant(xt);
            let fv = tape.constant(flipped);
            let a = self.student.forward_on(&mut tape, &bound, xv, BnMode::Batch)?;
            let b = self.student.forward_on(&mut tape, &bound, fv, BnMode::Batch)?;
            let y_hat = tape.softmax(a.logits)?;
            let y_tilde = tape.softmax(b.logits)?;
            let tv = tape.constant(target.clone());
            let loss = paired_consistency(&mut tape, y_hat, y_tilde, tv)?;
            info.consistency_loss = Some(tape.value(loss).item().as_f64());
            let mut grads = tape.backward(loss)?;
            self.student.optimizer_step(opt, &self.consistency_mask, &bound, &mut grads)?;
            self.student.commit_batch_stats(&a.batch_stats)?;
            self.student.commit_batch_stats(&b.batch_stats)?;
        }

        if let Some(t) = &mut self.teacher {
            t.ema_update(&self.student, self.config.alpha)?;
        }
        self.updates += 1;
        Ok(info)
    }

    /// Predicts on `x` and adapts to it.
    pub fn step(&mut self, x: &Tensor<f32>) -> Result<StepOutput<T>> {
        if x.dim(0) == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mode = self.policy.bn_mode;
        let reuse_entropy_forward =
            self.policy.timing == PredictionTiming::Pre && !self.policy.entropy_on_flip && !self.policy.ensemble;
        let early = if self.policy.timing == PredictionTiming::Pre && !reuse_entropy_forward {
            Some(self.predict(x, mode)?)
        } else {
            None
        };
        let info = self.update(x)?;
        let logits = match (early, info.entropy_logits) {
            (Some(l), _) => l,
            (None, Some(l)) if reuse_entropy_forward => l,
            _ => self.predict(x, mode)?,
        };
        let predictions = logits.argmax_rows();
        let probs = softmax(&logits);
        let entropies = row_entropies(&probs);
        let agreement = info.pseudo_labels.as_ref().map(|p| {
            let same = p.argmax_rows().iter().zip(&predictions).filter(|(a, b)| a == b).count();
            same as f64 / predictions.len() as f64
        });
        Ok(StepOutput {
            diagnostics: Diagnostics {
                mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
                agreement,
                entropy_loss: info.entropy_loss,
                consistency_loss: info.consistency_loss,
            },
            logits,
            predictions,
            pseudo_labels: info.pseudo_labels,
        })
    }

    /// `n_batches` consistency steps with EMA updates on clean source data.
    pub fn warmup<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor<f32>>, n_batches: usize) -> Result<()> {
        if n_batches == 0 {
            return Ok(());
        }
        if !self.policy.consistency {
            return Err(Error::Config("warm-up needs the consistency path".into()));
        }
        let saved = self.policy;
        self.policy.entropy = None;
        let result = batches.into_iter().take(n_batches).try_for_each(|x| self.update(x).map(|_| ()));
        self.policy = saved;
        result
    }
}

/// Teacher pseudo-labels in batch-statistics mode.
pub fn pseudo_label<T: Scalar>(
    teacher: &BlockNet<T>,
    x: &Tensor<f32>,
    menu: PseudoLabelMenu,
    views: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    match menu {
        PseudoLabelMenu::PairedView => {
            let xt: Tensor<T> = x.cast();
            let a = softmax(&teacher.forward(&xt, BnMode::Batch)?.logits);
            let b = softmax(&teacher.forward(&flip_h(&xt), BnMode::Batch)?.logits);
            let half = T::from_f64_lossy(0.5);
            Ok(a.zip(&b, "pseudo_label", |p, q| (p + q) * half)?)
        }
        _ => {
            let mut acc: Option<Tensor<T>> = None;
            for _ in 0..views {
                let v = random_view(x, menu, rng)?;
                let p = softmax(&teacher.forward(&v.cast(), BnMode::Batch)?.logits);
                acc = Some(match acc {
                    Some(a) => a.add(&p)?,
                    None => p,
                });
            }
            let acc = acc.expect("at least one view");
            Ok(acc.scale(T::from_f64_lossy(1.0 / views as f64)))
        }
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().unwrap_or(&1);
    let data = dplot_tensor::kernels::softmax_rows(logits.data(), c.max(1));
    Tensor::new(logits.shape(), data).expect("same shape")
}
