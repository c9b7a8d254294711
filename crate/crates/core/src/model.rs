//! Block-partitioned residual networks.
//!
//! A [`BlockNet`] is a feature extractor of `L` blocks followed by a linear
//! classifier. Blocks are numbered `1..=L` in forward order; the classifier
//! carries index `L + 1` and is never a selection candidate. A stem
//! convolution, when present, belongs to block 1.

use dplot_tensor::{AdamState, BatchStats, Gradients, Rng, Scalar, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// 3x3 convolution (+ BN + ReLU) folded into the following block.
    Stem {
        channels: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    /// Two 3x3 convolutions with a skip connection; the skip is a strided 1x1
    /// projection whenever the shape changes.
    ResidualConv {
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    /// Two linear layers with a skip connection, applied after pooling.
    ResidualDense {
        width: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    Classifier,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl ArchSpec {
    /// Six residual conv blocks of widths 16,16,32,32,64,64 (stride 2 at
    /// blocks 3 and 5) on 3x16x16 inputs, pooled to a 64-d feature.
    pub fn desk(num_classes: usize) -> Self {
        let conv = |channels, stride| BlockSpec::ResidualConv {
            channels,
            stride,
            batch_norm: true,
        };
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            num_classes,
            blocks: vec![
                BlockSpec::Stem {
                    channels: 16,
                    batch_norm: true,
                },
                conv(16, 1),
                conv(16, 1),
                conv(32, 2),
                conv(32, 1),
                conv(64, 2),
                conv(64, 1),
                BlockSpec::Classifier,
            ],
        }
    }

    /// Number of selectable blocks `L`.
    pub fn num_blocks(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b, BlockSpec::ResidualConv { .. } | BlockSpec::ResidualDense { .. }))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// `1..=L` for feature blocks, `L + 1` for the classifier.
    pub block: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn is_bn_affine(&self) -> bool {
        matches!(self.role, ParamRole::BnGamma | ParamRole::BnBeta)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnInfo {
    pub name: String,
    pub block: usize,
    pub channels: usize,
}

/// Stored per-channel statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * T::from_f64_lossy(b);
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + m * T::from_f64_lossy(b);
        }
    }

    fn as_f64(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.mean.data().iter().map(|v| v.as_f64()).collect(),
            self.var.data().iter().map(|v| v.as_f64()).collect(),
        )
    }
}

/// Which normalization statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Current-batch statistics (training / test-time adaptation).
    Batch,
    /// Stored running statistics (inference).
    Running,
}

/// Boolean selection over a model's parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask(Vec<bool>);

impl ParamMask {
    pub fn contains(&self, param: usize) -> bool {
        self.0[param]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stat: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvUnit {
    weight: usize,
    stride: usize,
    padding: usize,
    bn: Option<BnRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DenseUnit {
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnRef>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Block {
    Conv {
        stem: Option<ConvUnit>,
        first: ConvUnit,
        second: ConvUnit,
        projection: Option<ConvUnit>,
        /// Pool to a vector after this block.
        pool_after: bool,
    },
    Dense {
        first: DenseUnit,
        second: DenseUnit,
        projection: Option<DenseUnit>,
    },
}

/// Forward outputs recorded on a tape.
pub struct Recorded {
    pub features: Var,
    pub logits: Var,
    /// Per-BN-layer batch statistics (empty in running-statistics mode).
    pub batch_stats: Vec<BatchStats>,
}

/// Forward outputs as plain tensors.
pub struct Forward<T: Scalar> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub batch_stats: Vec<BatchStats>,
}

/// Tape handles for every parameter of one model.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }
}

/// Copy of all parameters and running statistics. Optimizer state is not
/// part of the image.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamImage<T: Scalar> {
    pub arch: ArchSpec,
    pub params: Vec<Tensor<T>>,
    pub stats: Vec<RunningStats<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockNet<T: Scalar> {
    arch: ArchSpec,
    params: Vec<Tensor<T>>,
    infos: Vec<ParamInfo>,
    stats: Vec<RunningStats<T>>,
    bn_infos: Vec<BnInfo>,
    blocks: Vec<Block>,
    classifier: DenseUnit,
    feature_dim: usize,
}

struct Builder<'a, T: Scalar> {
    rng: &'a mut Rng,
    params: Vec<Tensor<T>>,
    infos: Vec<ParamInfo>,
    stats: Vec<RunningStats<T>>,
    bn_infos: Vec<BnInfo>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: String, block: usize, role: ParamRole, value: Tensor<T>) -> usize {
        self.infos.push(ParamInfo {
            name,
            block,
            role,
            shape: value.shape().to_vec(),
        });
        self.params.push(value);
        self.params.len() - 1
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.rng.normal_tensor(shape, 0.0, (2.0 / fan_in as f64).sqrt())
    }

    fn bn(&mut self, prefix: &str, block: usize, channels: usize) -> BnRef {
        let gamma = self.param(format!("{prefix}.gamma"), block, ParamRole::BnGamma, Tensor::ones(&[channels]));
        let beta = self.param(format!("{prefix}.beta"), block, ParamRole::BnBeta, Tensor::zeros(&[channels]));
        self.stats.push(RunningStats::identity(channels));
        self.bn_infos.push(BnInfo {
            name: prefix.to_string(),
            block,
            channels,
        });
        BnRef {
            gamma,
            beta,
            stat: self.stats.len() - 1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        block: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bn: bool,
    ) -> ConvUnit {
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        let weight = self.param(format!("{prefix}.conv"), block, ParamRole::ConvWeight, w);
        let bn = bn.then(|| self.bn(&format!("{prefix}.bn"), block, cout));
        ConvUnit {
            weight,
            stride,
            padding: k / 2,
            bn,
        }
    }

    fn dense(&mut self, prefix: &str, block: usize, din: usize, dout: usize, bn: bool) -> DenseUnit {
        let w = self.he(&[din, dout], din);
        let weight = self.param(format!("{prefix}.weight"), block, ParamRole::LinearWeight, w);
        let bias = (!bn).then(|| {
            self.param(format!("{prefix}.bias"), block, ParamRole::LinearBias, Tensor::zeros(&[dout]))
        });
        let bn = bn.then(|| self.bn(&format!("{prefix}.bn"), block, dout));
        DenseUnit { weight, bias, bn }
    }
}

impl<T: Scalar> BlockNet<T> {
    /// Builds a He-initialized network; BN running statistics start at (0, 1).
    pub fn new(arch: &ArchSpec, rng: &mut Rng) -> Result<Self> {
        validate(arch)?;
        let mut b = Builder {
            rng,
            params: Vec::new(),
            infos: Vec::new(),
            stats: Vec::new(),
            bn_infos: Vec::new(),
        };
        let mut blocks = Vec::new();
        let (mut channels, mut dim) = (arch.in_channels, 0usize);
        let mut pending_stem = None;
        let mut spatial = true;
        let mut index = 0;
        let specs = &arch.blocks;

        for (pos, spec) in specs.iter().enumerate() {
            match *spec {
                BlockSpec::Stem {
                    channels: c,
                    batch_norm,
                } => {
                    pending_stem = Some((c, batch_norm));
                }
                BlockSpec::ResidualConv {
                    channels: c,
                    stride,
                    batch_norm,
                } => {
                    index += 1;
                    let p = format!("b{index}");
                    let stem = pending_stem.take().map(|(sc, bn)| {
                        let u = b.conv(&format!("{p}.stem"), index, channels, sc, 3, 1, bn);
                        channels = sc;
                        u
                    });
                    let first = b.conv(&format!("{p}.conv1"), index, channels, c, 3, stride, batch_norm);
                    let second = b.conv(&format!("{p}.conv2"), index, c, c, 3, 1, batch_norm);
                    let projection = (channels != c || stride != 1)
                        .then(|| b.conv(&format!("{p}.proj"), index, channels, c, 1, stride, batch_norm));
                    let pool_after = !matches!(specs.get(pos + 1), Some(BlockSpec::ResidualConv { .. }));
                    channels = c;
                    if pool_after {
                        spatial = false;
                        dim = c;
                    }
                    blocks.push(Block::Conv {
                        stem,
                        first,
                        second,
                        projection,
                        pool_after,
                    });
                }
                BlockSpec::ResidualDense { width, batch_norm } => {
                    index += 1;
                    if spatial {
                        // dense directly on the (flattened-by-pooling) input image
                        dim = arch.in_channels;
                        spatial = false;
                    }
                    let p = format!("b{index}");
                    let first = b.dense(&format!("{p}.fc1"), index, dim, width, batch_norm);
                    let second = b.dense(&format!("{p}.fc2"), index, width, width, batch_norm);
                    let projection =
                        (dim != width).then(|| b.dense(&format!("{p}.proj"), index, dim, width, batch_norm));
                    dim = width;
                    blocks.push(Block::Dense {
                        first,
                        second,
                        projection,
                    });
                }
                BlockSpec::Classifier => {}
            }
        }
        let cls_block = index + 1;
        let bound = 1.0 / (dim as f64).sqrt();
        let w = b.rng.uniform_tensor(&[dim, arch.num_classes], -bound, bound);
        let weight = b.param("classifier.weight".into(), cls_block, ParamRole::LinearWeight, w);
        let bias = b.param(
            "classifier.bias".into(),
            cls_block,
            ParamRole::LinearBias,
            Tensor::zeros(&[arch.num_classes]),
        );
        Ok(Self {
            arch: arch.clone(),
            params: b.params,
            infos: b.infos,
            stats: b.stats,
            bn_infos: b.bn_infos,
            blocks,
            classifier: DenseUnit {
                weight,
                bias: Some(bias),
                bn: None,
            },
            feature_dim: dim,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn classifier_block(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn bn_infos(&self) -> &[BnInfo] {
        &self.bn_infos
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_infos.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn mask_all(&self) -> ParamMask {
        ParamMask(vec![true; self.params.len()])
    }

    pub fn mask_none(&self) -> ParamMask {
        ParamMask(vec![false; self.params.len()])
    }

    /// Parameters of the given 1-based blocks.
    pub fn mask_blocks(&self, blocks: &[usize]) -> ParamMask {
        ParamMask(self.infos.iter().map(|i| blocks.contains(&i.block)).collect())
    }

    /// BN affine parameters, optionally restricted to the given blocks.
    pub fn mask_bn_affine(&self, blocks: Option<&[usize]>) -> ParamMask {
        ParamMask(
            self.infos
                .iter()
                .map(|i| i.is_bn_affine() && blocks.is_none_or(|b| b.contains(&i.block)))
                .collect(),
        )
    }

    /// Adam slots for the masked parameters, in parameter order.
    pub fn optimizer(&self, config: dplot_tensor::AdamConfig, mask: &ParamMask) -> AdamState<T> {
        AdamState::new(config, mask.indices().into_iter().map(|i| self.params[i].shape()))
    }

    /// One Adam step on the masked parameters with gradients from a tape
    /// bound through `bound`.
    pub fn optimizer_step(
        &mut self,
        adam: &mut AdamState<T>,
        mask: &ParamMask,
        bound: &Bound,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let mut pairs = Vec::with_capacity(mask.count());
        for (i, p) in self.params.iter_mut().enumerate() {
            if mask.contains(i) {
                let g = grads
                    .take(bound.var(i))
                    .ok_or_else(|| Error::Invalid(format!("no gradient for {}", self.infos[i].name)))?;
                pairs.push((p, g));
            }
        }
        adam.step(pairs.iter_mut().map(|(p, g)| (&mut **p, &*g)))?;
        Ok(())
    }

    /// Puts every parameter on the tape; masked-in ones are trainable.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &ParamMask) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable.contains(i) {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Records a forward pass of `x` (`[N, C, H, W]`) on `tape`.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: BnMode) -> Result<Recorded> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != [self.arch.in_channels, self.arch.height, self.arch.width] {
            return Err(Error::SpecMismatch(format!(
                "input {shape:?}, expected [N, {}, {}, {}]",
                self.arch.in_channels, self.arch.height, self.arch.width
            )));
        }
        let mut stats = Vec::new();
        let mut h = x;
        for block in &self.blocks {
            h = match block {
                Block::Conv {
                    stem,
                    first,
                    second,
                    projection,
                    pool_after,
                } => {
                    if let Some(u) = stem {
                        let a = self.conv_unit(tape, bound, h, u, mode, &mut stats)?;
                        h = tape.relu(a)?;
                    }
                    let a = self.conv_unit(tape, bound, h, first, mode, &mut stats)?;
                    let a = tape.relu(a)?;
                    let a = self.conv_unit(tape, bound, a, second, mode, &mut stats)?;
                    let skip = match projection {
                        Some(p) => self.conv_unit(tape, bound, h, p, mode, &mut stats)?,
                        None => h,
                    };
                    let s = tape.add(a, skip)?;
                    let out = tape.relu(s)?;
                    if *pool_after {
                        tape.global_avg_pool(out)?
                    } else {
                        out
                    }
                }
                Block::Dense {
                    first,
                    second,
                    projection,
                } => {
                    if tape.value(h).rank() == 4 {
                        h = tape.global_avg_pool(h)?;
                    }
                    let a = self.dense_unit(tape, bound, h, first, mode, &mut stats)?;
                    let a = tape.relu(a)?;
                    let a = self.dense_unit(tape, bound, a, second, mode, &mut stats)?;
                    let skip = match projection {
                        Some(p) => self.dense_unit(tape, bound, h, p, mode, &mut stats)?,
                        None => h,
                    };
                    let s = tape.add(a, skip)?;
                    tape.relu(s)?
                }
            };
        }
        if tape.value(h).rank() == 4 {
            h = tape.global_avg_pool(h)?;
        }
        let logits = self.dense_unit(tape, bound, h, &self.classifier, mode, &mut stats)?;
        Ok(Recorded {
            features: h,
            logits,
            batch_stats: stats,
        })
    }

    fn conv_unit(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        u: &ConvUnit,
        mode: BnMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(u.weight), u.stride, u.padding)?;
        match u.bn {
            Some(bn) => self.bn(tape, bound, y, bn, mode, stats),
            None => Ok(y),
        }
    }

    fn dense_unit(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        u: &DenseUnit,
        mode: BnMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let mut y = tape.matmul(x, bound.var(u.weight))?;
        if let Some(b) = u.bias {
            y = tape.add_row_bias(y, bound.var(b))?;
        }
        match u.bn {
            Some(bn) => self.bn(tape, bound, y, bn, mode, stats),
            None => Ok(y),
        }
    }

    fn bn(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        bn: BnRef,
        mode: BnMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let (g, b) = (bound.var(bn.gamma), bound.var(bn.beta));
        match mode {
            BnMode::Batch => {
                let (y, s) = tape.batch_norm(x, g, b, BN_EPS)?;
                stats.push(s);
                Ok(y)
            }
            BnMode::Running => {
                let (mean, var) = self.stats[bn.stat].as_f64();
                Ok(tape.batch_norm_running(x, g, b, &mean, &var, BN_EPS)?)
            }
        }
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Forward<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &self.mask_none());
        let xv = tape.constant(x.clone());
        let rec = self.forward_on(&mut tape, &bound, xv, mode)?;
        Ok(Forward {
            features: tape.value(rec.features).clone(),
            logits: tape.value(rec.logits).clone(),
            batch_stats: rec.batch_stats,
        })
    }

    /// Momentum update of the running statistics from one batch-mode pass.
    pub fn commit_batch_stats(&mut self, batch: &[BatchStats]) -> Result<()> {
        if batch.len() != self.stats.len() {
            return Err(Error::Invalid(format!(
                "{} batch statistics for {} BN layers",
                batch.len(),
                self.stats.len()
            )));
        }
        for (r, b) in self.stats.iter_mut().zip(batch) {
            r.update(b, BN_MOMENTUM);
        }
        Ok(())
    }

    /// Replaces every running statistic with the empirical statistics of
    /// `batch`, computed layer by layer in a batch-statistics forward pass.
    pub fn recalibrate_bn(&mut self, batch: &Tensor<T>) -> Result<()> {
        let n = batch.shape().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(dplot_tensor::TensorError::BatchTooSmall(n).into());
        }
        let out = self.forward(batch, BnMode::Batch)?;
        for (r, b) in self.stats.iter_mut().zip(&out.batch_stats) {
            r.update(b, 1.0);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamImage<T> {
        ParamImage {
            arch: self.arch.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
        }
    }

    pub fn restore(&mut self, image: &ParamImage<T>) -> Result<()> {
        if image.arch != self.arch {
            return Err(Error::SpecMismatch("snapshot from a different architecture".into()));
        }
        self.params.clone_from(&image.params);
        self.stats.clone_from(&image.stats);
        Ok(())
    }

    /// Mean-teacher update `p' <- alpha * p' + (1 - alpha) * p` over every
    /// parameter and running statistic.
    pub fn ema_update(&mut self, student: &BlockNet<T>, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("EMA decay {alpha} outside [0, 1]")));
        }
        if student.arch != self.arch {
            return Err(Error::SpecMismatch("teacher and student architectures differ".into()));
        }
        let a = T::from_f64_lossy(alpha);
        let b = T::from_f64_lossy(1.0 - alpha);
        let blend = |dst: &mut Tensor<T>, src: &Tensor<T>| {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = a * *d + b * s;
            }
        };
        for (t, s) in self.params.iter_mut().zip(&student.params) {
            blend(t, s);
        }
        for (t, s) in self.stats.iter_mut().zip(&student.stats) {
            blend(&mut t.mean, &s.mean);
            blend(&mut t.var, &s.var);
        }
        Ok(())
    }

    /// Rebuilds a network from stored tensors, checking names and shapes
    /// against `arch`.
    pub fn from_parts(arch: &ArchSpec, params: Vec<Tensor<T>>, stats: Vec<RunningStats<T>>) -> Result<Self> {
        let mut net = Self::new(arch, &mut Rng::new(0))?;
        if params.len() != net.params.len() || stats.len() != net.stats.len() {
            return Err(Error::SpecMismatch(format!(
                "{} params / {} BN layers, architecture has {} / {}",
                params.len(),
                stats.len(),
                net.params.len(),
                net.stats.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != net.params[i].shape() {
                return Err(Error::SpecMismatch(format!(
                    "{}: shape {:?}, expected {:?}",
                    net.infos[i].name,
                    p.shape(),
                    net.params[i].shape()
                )));
            }
        }
        for (s, info) in stats.iter().zip(&net.bn_infos) {
            if s.mean.shape() != [info.channels] || s.var.shape() != [info.channels] {
                return Err(Error::SpecMismatch(format!("{}: running statistics shape", info.name)));
            }
        }
        net.params = params;
        net.stats = stats;
        Ok(net)
    }

    /// Same network in another scalar type.
    pub fn cast<U: Scalar>(&self) -> BlockNet<U> {
        BlockNet {
            arch: self.arch.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            infos: self.infos.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                })
                .collect(),
            bn_infos: self.bn_infos.clone(),
            blocks: self.blocks.clone(),
            classifier: self.classifier,
            feature_dim: self.feature_dim,
        }
    }
}

fn validate(arch: &ArchSpec) -> Result<()> {
    let err = |m: String| Err(Error::Arch(m));
    if arch.in_channels == 0 || arch.height == 0 || arch.width == 0 {
        return err("empty input shape".into());
    }
    if arch.num_classes < 2 {
        return err(format!("{} classes", arch.num_classes));
    }
    let n = arch.blocks.len();
    if n == 0 || arch.blocks[n - 1] != BlockSpec::Classifier {
        return err("block list must end with the classifier".into());
    }
    if arch.blocks[..n - 1].contains(&BlockSpec::Classifier) {
        return err("more than one classifier".into());
    }
    if arch.num_blocks() == 0 {
        return err("no feature blocks".into());
    }
    let (mut h, mut w) = (arch.height, arch.width);
    let mut seen_dense = false;
    for (i, b) in arch.blocks.iter().enumerate() {
        match *b {
            BlockSpec::Stem { channels, .. } => {
                if i != 0 {
                    return err("stem must be the first block".into());
                }
                if !matches!(arch.blocks.get(1), Some(BlockSpec::ResidualConv { .. })) {
                    return err("stem must be followed by a residual conv block".into());
                }
                if channels == 0 {
                    return err("stem with zero channels".into());
                }
            }
            BlockSpec::ResidualConv { channels, stride, .. } => {
                if seen_dense {
                    return err("convolutional block after a dense block".into());
                }
                if channels == 0 || stride == 0 {
                    return err(format!("block {i}: zero channels or stride"));
                }
                h = (h - 1) / stride + 1;
                w = (w - 1) / stride + 1;
            }
            BlockSpec::ResidualDense { width, .. } => {
                if width == 0 {
                    return err(format!("block {i}: zero width"));
                }
                seen_dense = true;
            }
            BlockSpec::Classifier => {}
        }
    }
    debug_assert!(h >= 1 && w >= 1);
    Ok(())
}
