//! Reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`]. Node
//! indices are a topological order, so the reverse pass is a single sweep from
//! the loss back to index 0. Nodes whose inputs never require gradients are
//! recorded without saved intermediates and skipped during the sweep.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{as_matrix, gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-normalized input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Relu { x: Var },
    Sum { x: Var },
    Softmax { x: Var },
    LogClamped { x: Var, eps: T },
    GlobalAvgPool { x: Var, spatial: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormRunning {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed primitives.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`. Leaves that require
    /// gradients but did not contribute to the loss hold zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.record("matmul", out, Op::MatMul { a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.record("add", out, Op::Add { a, b }, rg)
    }

    /// `x[N, C] + bias[C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, c) = as_matrix(xv, "add_row_bias")?;
        if bv.shape() != [c] {
            return Err(shape_err(
                "add_row_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.record("add_row_bias", out, Op::AddRowBias { x, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        self.record("mul", out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.record("scale", out, Op::Scale { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.record("relu", out, Op::Relu { x }, rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.record("sum", out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Softmax over the last axis of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = as_matrix(xv, "softmax")?;
        let out = Tensor::new(xv.shape(), kernels::softmax_rows(xv.data(), c))?;
        let rg = self.rg(&[x]);
        self.record("softmax", out, Op::Softmax { x }, rg)
    }

    /// `ln(max(x, eps))` elementwise.
    pub fn log_clamped(&mut self, x: Var, eps: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.rg(&[x]);
        self.record("log_clamped", out, Op::LogClamped { x, eps }, rg)
    }

    /// Mean over all spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            return Err(shape_err("global_avg_pool", format!("{:?}", xv.shape())));
        };
        let spatial = h * w;
        let inv = T::one() / T::from_usize(spatial).unwrap();
        let data = xv
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[x]);
        self.record("global_avg_pool", out, Op::GlobalAvgPool { x, spatial }, rg)
    }

    /// Cross-correlation of `x[N, C, H, W]` with `w[F, C, k, k]` (odd `k`).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[n, c, h, wd], &[f, wc, k, k2]) = (xv.shape(), wv.shape()) else {
            return Err(shape_err(
                "conv2d",
                format!("{:?} * {:?}", xv.shape(), wv.shape()),
            ));
        };
        if c != wc || k != k2 || k % 2 == 0 || stride == 0 || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(shape_err(
                "conv2d",
                format!("{:?} * {:?} (stride {stride}, padding {padding})", xv.shape(), wv.shape()),
            ));
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            filters: f,
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data());
        let out = Tensor::new(&[n, f, geom.out_height(), geom.out_width()], out)?;
        let rg = self.rg(&[x, w]);
        self.record("conv2d", out, Op::Conv2d { x, w, geom }, rg)
    }

    /// Batch normalization with the current batch's per-channel statistics,
    /// followed by the affine map `gamma * xhat + beta`. Accepts `[N, C]` or
    /// `[N, C, H, W]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let xv = self.value(x);
        let (mean, var) = kernels::channel_stats(xv.data(), n, c, spatial);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let rg = self.rg(&[x, gamma, beta]);
        let mut xhat = if rg { vec![T::zero(); xv.numel()] } else { Vec::new() };
        let mut out = vec![T::zero(); xv.numel()];
        kernels::bn_apply(
            xv.data(),
            c,
            spatial,
            &mean_t,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut out,
            rg.then_some(xhat.as_mut_slice()),
        );
        let out = Tensor::new(xv.shape(), out)?;
        let var_out = self.record(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalization with stored statistics.
    pub fn batch_norm_running(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm_running", "running statistics length"));
        }
        let mean: Vec<T> = running_mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
            .collect();
        let _ = n;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        kernels::bn_apply(
            xv.data(),
            c,
            spatial,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut out,
            None,
        );
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.record(
            "batch_norm_running",
            out,
            Op::BatchNormRunning {
                x,
                gamma,
                beta,
                spatial,
                mean,
                inv_std,
            },
            rg,
        )
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        let (n, c, spatial) = match *xs {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(shape_err("batch_norm", format!("input {xs:?}"))),
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {xs:?} with affine {:?}/{:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok((n, c, spatial))
    }

    /// Runs the reverse pass from the scalar `loss`.
    ///
    /// The tape can be differentiated once; a second call fails with
    /// [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let shaped = |v: Var, data: Vec<T>| Tensor::new(val(v).shape(), data);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = as_matrix(val(*a), "matmul")?;
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, dy.data(), false, val(*b).data(), true, &mut da, false);
                    accumulate(grads, *a, shaped(*a, da)?)?;
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a).data(), true, dy.data(), false, &mut db, false);
                    accumulate(grads, *b, shaped(*b, db)?)?;
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, dy.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.clone())?;
                }
            }
            Op::AddRowBias { x, bias } => {
                if wants(*x) {
                    accumulate(grads, *x, dy.clone())?;
                }
                if wants(*bias) {
                    let c = val(*bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in dy.data().chunks(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(grads, *bias, shaped(*bias, db)?)?;
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, dy.zip(val(*b), "mul", |g, q| g * q)?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.zip(val(*a), "mul", |g, p| g * p)?)?;
                }
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, dy.scale(*s))?;
            }
            Op::Relu { x } => {
                let dx = dy.zip(&node.value, "relu", |g, y| if y > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(val(*x).shape(), dy.item()))?;
            }
            Op::Softmax { x } => {
                let c = node.value.shape()[1];
                let mut dx = vec![T::zero(); node.value.numel()];
                for ((y, g), d) in node
                    .value
                    .data()
                    .chunks(c)
                    .zip(dy.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot = y.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for ((d, &yy), &gg) in d.iter_mut().zip(y).zip(g) {
                        *d = yy * (gg - dot);
                    }
                }
                accumulate(grads, *x, shaped(*x, dx)?)?;
            }
            Op::LogClamped { x, eps } => {
                let dx = dy.zip(val(*x), "log_clamped", |g, v| if v > *eps { g / v } else { T::zero() })?;
                accumulate(grads, *x, dx)?;
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::one() / T::from_usize(*spatial).unwrap();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (d, &g) in dx.chunks_mut(*spatial).zip(dy.data()) {
                    d.fill(g * inv);
                }
                accumulate(grads, *x, shaped(*x, dx)?)?;
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    dy.data(),
                    val(*x).data(),
                    val(*w).data(),
                    wants(*x),
                    wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, shaped(*x, dx)?)?;
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, shaped(*w, dw)?)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                xhat,
                inv_std,
            } => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let (dbeta, dgamma) = kernels::bn_reduce(dy.data(), xhat, c, *spatial);
                if wants(*x) {
                    let g = val(*gamma).data();
                    let m = T::from_usize(n * spatial).unwrap();
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (j, ((d, gy), h)) in dx
                        .chunks_mut(*spatial)
                        .zip(dy.data().chunks(*spatial))
                        .zip(xhat.chunks(*spatial))
                        .enumerate()
                    {
                        let ch = j % c;
                        let k = g[ch] * inv_std[ch] / m;
                        let (sb, sg) = (dbeta[ch], dgamma[ch]);
                        for ((di, &gi), &hi) in d.iter_mut().zip(gy).zip(h) {
                            *di = k * (m * gi - sb - hi * sg);
                        }
                    }
                    accumulate(grads, *x, shaped(*x, dx)?)?;
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, shaped(*gamma, dgamma)?)?;
                }
                if wants(*beta) {
                    accumulate(grads, *beta, shaped(*beta, dbeta)?)?;
                }
            }
            Op::BatchNormRunning {
                x,
                gamma,
                beta,
                spatial,
                mean,
                inv_std,
            } => {
                let xv = val(*x);
                let c = xv.shape()[1];
                let g = val(*gamma).data();
                let mut xhat = vec![T::zero(); xv.numel()];
                for (j, (h, &v)) in xhat.iter_mut().zip(xv.data()).enumerate() {
                    let ch = (j / *spatial) % c;
                    *h = (v - mean[ch]) * inv_std[ch];
                }
                let (dbeta, dgamma) = kernels::bn_reduce(dy.data(), &xhat, c, *spatial);
                if wants(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (j, (d, gy)) in dx.chunks_mut(*spatial).zip(dy.data().chunks(*spatial)).enumerate() {
                        let ch = j % c;
                        let k = g[ch] * inv_std[ch];
                        for (di, &gi) in d.iter_mut().zip(gy) {
                            *di = gi * k;
                        }
                    }
                    accumulate(grads, *x, shaped(*x, dx)?)?;
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, shaped(*gamma, dgamma)?)?;
                }
                if wants(*beta) {
                    accumulate(grads, *beta, shaped(*beta, dbeta)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    g.ensure_finite("backward")?;
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
