//! Domain-specific block selection before deployment.
//!
//! Each block is entropy-minimized alone on perturbed source images; blocks
//! whose update keeps the class prototypes of clean source images in place
//! are selected for test-time adaptation.

use std::fmt;

use dplot_tensor::{AdamConfig, Rng, Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::losses::entropy_loss;
use crate::model::{BlockNet, BnMode};

/// Class-mean feature vectors (`C x d`) with per-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Class means of the features of `data`, normalized with the statistics of
/// the whole set in one batch-statistics pass. The result does not depend on
/// row order or on repeating the set.
pub fn compute_prototypes<T: Scalar>(model: &BlockNet<T>, data: &ImageBatch) -> Result<PrototypeSet> {
    let c = model.num_classes();
    let d = model.feature_dim();
    let mut sums = vec![vec![Kahan::default(); d]; c];
    let mut counts = vec![0usize; c];
    let out = model.forward(&data.tensor::<T>(), BnMode::Batch)?;
    for (row, &label) in out.features.data().chunks_exact(d).zip(&data.labels) {
        if label >= c {
            return Err(Error::Selection(format!("label {label} with {c} classes")));
        }
        counts[label] += 1;
        for (acc, &v) in sums[label].iter_mut().zip(row) {
            acc.add(v.as_f64());
        }
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Selection(format!("class {missing} has no source images")));
    }
    let prototypes = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|k| k.sum / n as f64).collect())
        .collect();
    Ok(PrototypeSet { prototypes, counts })
}

/// Mean cosine similarity between matching prototypes.
pub fn prototype_similarity(p: &PrototypeSet, q: &PrototypeSet) -> Result<f64> {
    if p.num_classes() != q.num_classes() || p.dim() != q.dim() || p.num_classes() == 0 {
        return Err(Error::Selection(format!(
            "prototype sets {}x{} and {}x{}",
            p.num_classes(),
            p.dim(),
            q.num_classes(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for (c, (a, b)) in p.prototypes.iter().zip(&q.prototypes).enumerate() {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Selection(format!("class {c} has a zero-norm prototype")));
        }
        total += dot / (na * nb).sqrt();
    }
    Ok(total / p.num_classes() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub values: Vec<f64>,
    pub warning: Option<String>,
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all ones.
pub fn minmax_scale(s: &[f64]) -> Scaled {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if s.is_empty() || hi <= lo {
        return Scaled {
            values: vec![1.0; s.len()],
            warning: Some("all block similarities are equal; min-max scaling is degenerate".into()),
        };
    }
    Scaled {
        values: s.iter().map(|&v| (v - lo) / (hi - lo)).collect(),
        warning: None,
    }
}

/// 1-based indices of the values strictly above `gamma`.
pub fn threshold(scaled: &[f64], gamma: f64) -> Vec<usize> {
    scaled
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > gamma)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Source-image perturbation used to probe each block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Additive noise with the given mean and variance.
    Gaussian { mean: f64, variance: f64 },
    /// Pixel values multiplied by `factor`.
    Brightness { factor: f64 },
    /// Deviation from the per-image mean multiplied by `factor`.
    Contrast { factor: f64 },
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Gaussian {
            mean: 0.0,
            variance: 0.5,
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Gaussian { mean, variance } => write!(f, "gaussian(mean={mean}, variance={variance})"),
            Perturbation::Brightness { factor } => write!(f, "brightness(x{factor})"),
            Perturbation::Contrast { factor } => write!(f, "contrast(x{factor})"),
        }
    }
}

impl Perturbation {
    /// Perturbed copy of `x`, clamped to `[0, 1]`.
    pub fn apply(&self, x: &ImageBatch, rng: &mut Rng) -> Result<ImageBatch> {
        let images = match *self {
            Perturbation::Gaussian { mean, variance } => {
                if variance < 0.0 {
                    return Err(Error::Selection(format!("negative variance {variance}")));
                }
                crate::data::add_gaussian(&x.images, mean, variance, rng)
            }
            Perturbation::Brightness { factor } => x.images.map(|v| (v * factor as f32).clamp(0.0, 1.0)),
            Perturbation::Contrast { factor } => {
                let mut out = x.images.clone();
                for img in out.data_mut().chunks_exact_mut(IMAGE_LEN) {
                    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
                    for v in img.iter_mut() {
                        *v = (((*v as f64 - mean) * factor + mean) as f32).clamp(0.0, 1.0);
                    }
                }
                out
            }
        };
        ImageBatch::new(images, x.labels.clone())
    }
}

/// Entropy-minimization budget for probing one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Passes over the perturbed source set.
    #[serde(default = "default_passes")]
    pub passes: usize,
    /// Optional cap on the number of steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_passes() -> usize {
    1
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            passes: default_passes(),
            max_steps: None,
        }
    }
}

/// Entropy-minimizes block `block` on `noised`, measures prototype drift on
/// `clean` against `base`, and restores the model bitwise.
pub fn block_sensitivity<T: Scalar>(
    model: &mut BlockNet<T>,
    clean: &ImageBatch,
    noised: &ImageBatch,
    base: &PrototypeSet,
    block: usize,
    em: &EmConfig,
) -> Result<f64> {
    if block == 0 || block > model.num_blocks() {
        return Err(Error::Selection(format!(
            "block {block} outside 1..={}",
            model.num_blocks()
        )));
    }
    let snapshot = model.snapshot();
    let result = (|| {
        let mask = model.mask_blocks(&[block]);
        let mut adam = model.optimizer(AdamConfig::with_lr(em.lr), &mask);
        let mut steps = 0;
        'passes: for _ in 0..em.passes {
            for chunk in noised.chunks(em.batch_size) {
                if em.max_steps.is_some_and(|m| steps >= m) {
                    break 'passes;
                }
                if chunk.len() < 2 {
                    continue;
                }
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &mask);
                let x = tape.constant(chunk.tensor::<T>());
                let rec = model.forward_on(&mut tape, &bound, x, BnMode::Batch)?;
                let probs = tape.softmax(rec.logits)?;
                let loss = entropy_loss(&mut tape, probs)?;
                let mut grads = tape.backward(loss)?;
                model.optimizer_step(&mut adam, &mask, &bound, &mut grads)?;
                steps += 1;
            }
        }
        let moved = compute_prototypes(model, clean)?;
        prototype_similarity(base, &moved)
    })();
    model.restore(&snapshot)?;
    result
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    pub gamma: f64,
    pub selected: Vec<usize>,
    pub perturbation: Perturbation,
    pub em: EmConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SelectionReport {
    /// Same similarities thresholded at another `gamma`.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            gamma,
            selected: threshold(&self.scaled, gamma),
            ..self.clone()
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Selection(format!("threshold {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// Runs the probe for every block, scales and thresholds the similarities.
pub fn select_blocks<T: Scalar>(
    model: &mut BlockNet<T>,
    source: &ImageBatch,
    gamma: f64,
    perturbation: Perturbation,
    em: &EmConfig,
    seed: u64,
) -> Result<SelectionReport> {
    check_gamma(gamma)?;
    let base = compute_prototypes(model, source)?;
    let noised = perturbation.apply(source, &mut Rng::new(seed))?;
    let raw = (1..=model.num_blocks())
        .map(|b| block_sensitivity(model, source, &noised, &base, b, em))
        .collect::<Result<Vec<_>>>()?;
    let scaled = minmax_scale(&raw);
    Ok(SelectionReport {
        selected: threshold(&scaled.values, gamma),
        raw,
        scaled: scaled.values,
        gamma,
        perturbation,
        em: *em,
        seed,
        warning: scaled.warning,
    })
}
