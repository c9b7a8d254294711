//! Raw forward/backward kernels on flat buffers. Shapes are validated by the
//! tape before these are called.

use crate::scalar::Scalar;
use crate::tensor::gemm;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_spatial(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Target column count of one unfolded chunk; keeps the column buffer
/// cache-resident.
const CHUNK_COLUMNS: usize = 512;

impl ConvGeom {
    fn images_per_chunk(&self) -> usize {
        (CHUNK_COLUMNS / self.out_spatial()).clamp(1, self.batch.max(1))
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds images `n0..n0 + g` of `x` into a `[C*k*k, g*Ho*Wo]` column
/// matrix (column index `i * Ho*Wo + pos`).
pub fn im2col<T: Scalar>(geom: &ConvGeom, x: &[T], n0: usize, g: usize, cols: &mut Vec<T>) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (h, w, k, s, p) = (geom.height, geom.width, geom.kernel, geom.stride, geom.padding);
    let hw = h * w;
    let sp = ho * wo;
    let width = g * sp;
    cols.clear();
    cols.resize(geom.patch() * width, T::zero());
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &mut cols[r * width..(r + 1) * width];
                // valid output columns: 0 <= ow*s + kj - p < w
                let ow_lo = (p.saturating_sub(kj) + s - 1) / s;
                let ow_hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(wo) } else { 0 };
                for i in 0..g {
                    let img = &x[(n0 + i) * geom.image_len() + c * hw..][..hw];
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= h as isize || ow_lo >= ow_hi {
                            continue;
                        }
                        let src = &img[ih as usize * w..][..w];
                        let dst = &mut row[i * sp + oh * wo..][..wo];
                        let iw0 = ow_lo * s + kj - p;
                        if s == 1 {
                            dst[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            for (j, d) in dst[ow_lo..ow_hi].iter_mut().enumerate() {
                                *d = src[iw0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients into `dx`.
pub fn col2im_add<T: Scalar>(geom: &ConvGeom, cols: &[T], n0: usize, g: usize, dx: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (h, w, k, s, p) = (geom.height, geom.width, geom.kernel, geom.stride, geom.padding);
    let hw = h * w;
    let sp = ho * wo;
    let width = g * sp;
    let image_len = geom.image_len();
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &cols[r * width..(r + 1) * width];
                let ow_lo = (p.saturating_sub(kj) + s - 1) / s;
                let ow_hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(wo) } else { 0 };
                for i in 0..g {
                    let img = &mut dx[(n0 + i) * image_len + c * hw..][..hw];
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= h as isize || ow_lo >= ow_hi {
                            continue;
                        }
                        let dst = &mut img[ih as usize * w..][..w];
                        let src = &row[i * sp + oh * wo..][..wo];
                        let iw0 = ow_lo * s + kj - p;
                        for (j, &v) in src[ow_lo..ow_hi].iter().enumerate() {
                            let d = &mut dst[iw0 + j * s];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution, output `[N, F, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let sp = geom.out_spatial();
    let f = geom.filters;
    let mut out = vec![T::zero(); geom.batch * f * sp];
    let per = geom.images_per_chunk();
    let mut cols = Vec::new();
    let mut out_mat = Vec::new();
    let mut n0 = 0;
    while n0 < geom.batch {
        let g = per.min(geom.batch - n0);
        im2col(geom, x, n0, g, &mut cols);
        if g == 1 {
            gemm(f, geom.patch(), sp, w, false, &cols, false, &mut out[n0 * f * sp..][..f * sp], false);
        } else {
            out_mat.clear();
            out_mat.resize(f * g * sp, T::zero());
            gemm(f, geom.patch(), g * sp, w, false, &cols, false, &mut out_mat, false);
            for fi in 0..f {
                for i in 0..g {
                    out[((n0 + i) * f + fi) * sp..][..sp]
                        .copy_from_slice(&out_mat[fi * g * sp + i * sp..][..sp]);
                }
            }
        }
        n0 += g;
    }
    out
}

/// Gradients of a convolution with respect to the input and/or the kernel.
/// Columns are recomputed from `x` chunk by chunk.
pub fn conv2d_backward<T: Scalar>(
    geom: &ConvGeom,
    dy: &[T],
    x: &[T],
    w: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let sp = geom.out_spatial();
    let f = geom.filters;
    let patch = geom.patch();
    let per = geom.images_per_chunk();
    let mut dx = want_dx.then(|| vec![T::zero(); geom.batch * geom.image_len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); f * patch]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut dy_mat = Vec::new();
    let mut n0 = 0;
    while n0 < geom.batch {
        let g = per.min(geom.batch - n0);
        let dy_chunk: &[T] = if g == 1 {
            &dy[n0 * f * sp..][..f * sp]
        } else {
            dy_mat.clear();
            dy_mat.resize(f * g * sp, T::zero());
            for fi in 0..f {
                for i in 0..g {
                    dy_mat[fi * g * sp + i * sp..][..sp]
                        .copy_from_slice(&dy[((n0 + i) * f + fi) * sp..][..sp]);
                }
            }
            &dy_mat
        };
        if let Some(dw) = dw.as_mut() {
            im2col(geom, x, n0, g, &mut cols);
            gemm(f, g * sp, patch, dy_chunk, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(patch * g * sp, T::zero());
            gemm(patch, f, g * sp, w, true, dy_chunk, false, &mut dcols, false);
            col2im_add(geom, &dcols, n0, g, dx);
        }
        n0 += g;
    }
    (dx, dw)
}

/// Per-channel biased mean and variance of a `[N, C, S]` buffer, accumulated
/// in f64.
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut means = vec![0.0; channels];
    let mut vars = vec![0.0; channels];
    for (j, run) in x.chunks(spatial).enumerate() {
        means[j % channels] += lane_sum(run, |v| v);
    }
    for mean in &mut means {
        *mean /= m;
    }
    for (j, run) in x.chunks(spatial).enumerate() {
        let mean = means[j % channels];
        vars[j % channels] += lane_sum(run, |v| (v - mean) * (v - mean));
    }
    for var in &mut vars {
        *var /= m;
    }
    (means, vars)
}

/// Sum of `f(v)` over a run using eight independent f64 lanes.
fn lane_sum<T: Scalar>(run: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut chunks = run.chunks_exact(8);
    for ch in &mut chunks {
        for (l, v) in lanes.iter_mut().zip(ch) {
            *l += f(v.as_f64());
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| f(v.as_f64())).sum();
    lanes.iter().sum::<f64>() + tail
}

/// `out = gamma * (x - mean) * inv_std + beta` per channel; optionally stores
/// the normalized input.
#[allow(clippy::too_many_arguments)]
pub fn bn_apply<T: Scalar>(
    x: &[T],
    channels: usize,
    spatial: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    mut xhat: Option<&mut [T]>,
) {
    for (j, (src, dst)) in x.chunks(spatial).zip(out.chunks_mut(spatial)).enumerate() {
        let c = j % channels;
        let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        match xhat.as_deref_mut() {
            Some(xh) => {
                let xh = &mut xh[j * spatial..(j + 1) * spatial];
                for ((d, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                    *h = (v - m) * is;
                    *d = g * *h + b;
                }
            }
            None => {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = g * ((v - m) * is) + b;
                }
            }
        }
    }
}

/// Per-channel `(sum dy, sum dy * xhat)`.
pub fn bn_reduce<T: Scalar>(dy: &[T], xhat: &[T], channels: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let mut dbeta = vec![T::zero(); channels];
    let mut dgamma = vec![T::zero(); channels];
    for (j, (g, h)) in dy.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
        let c = j % channels;
        let (mut sb, mut sg) = (T::zero(), T::zero());
        for (&gi, &hi) in g.iter().zip(h) {
            sb = sb + gi;
            sg = sg + gi * hi;
        }
        dbeta[c] = dbeta[c] + sb;
        dgamma[c] = dgamma[c] + sg;
    }
    (dbeta, dgamma)
}

/// Softmax over the last axis of a `[rows, cols]` buffer.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z = z + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}
