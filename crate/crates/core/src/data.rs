//! Procedural "shapegrid" images, corruptions, and test streams.
//!
//! Every glyph is an even function of the horizontal offset from its centre,
//! so a horizontal flip maps an image of class `c` to another image the
//! generator could have drawn for class `c`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dplot_tensor::{Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_store, write_store, Record, TensorKind};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 16;
pub const IMAGE_LEN: usize = CHANNELS * SIDE * SIDE;
pub const MAX_CLASSES: usize = 8;

/// Images `[N, 3, 16, 16]` in `[0, 1]` with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Data(format!(
                "images {s:?} with {} labels",
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
        })
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.images).collect();
        Ok(Self {
            images: Tensor::concat_rows(&images)?,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        })
    }

    /// Images in the model's scalar type.
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        self.images.cast()
    }

    pub fn flip_h(&self) -> Self {
        Self {
            images: flip_h(&self.images),
            labels: self.labels.clone(),
        }
    }

    /// Consecutive batches of at most `size` images.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let n = self.len();
        (0..n.div_ceil(size.max(1))).map(move |i| {
            let end = ((i + 1) * size).min(n);
            self.slice(i * size, end).expect("in-range slice")
        })
    }
}

/// Reverses the last axis of a rank-4 tensor.
pub fn flip_h<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w.max(1)) {
        row.reverse();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapegridConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Maximum glyph-centre offset in pixels along each axis.
    #[serde(default = "default_jitter")]
    pub position_jitter: f64,
    /// Half-width of the per-image hue perturbation, in hue turns.
    #[serde(default = "default_hue_jitter")]
    pub hue_jitter: f64,
    /// Glyph size multiplier range `[1 - s, 1 + s]`.
    #[serde(default = "default_scale_jitter")]
    pub scale_jitter: f64,
}

fn default_classes() -> usize {
    4
}
fn default_jitter() -> f64 {
    2.5
}
fn default_hue_jitter() -> f64 {
    0.2
}
fn default_scale_jitter() -> f64 {
    0.15
}

impl Default for ShapegridConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            position_jitter: default_jitter(),
            hue_jitter: default_hue_jitter(),
            scale_jitter: default_scale_jitter(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Disk,
    Cross,
    Stripes,
    Checkerboard,
    Ring,
    Bar,
    Saltire,
    Frame,
}

impl Glyph {
    pub const ALL: [Glyph; MAX_CLASSES] = [
        Glyph::Disk,
        Glyph::Cross,
        Glyph::Stripes,
        Glyph::Checkerboard,
        Glyph::Ring,
        Glyph::Bar,
        Glyph::Saltire,
        Glyph::Frame,
    ];

    /// Coverage at offset `(dx, dy)` from the glyph centre, for glyph size
    /// `s` (nominal half-extent in pixels). Even in `dx` for every glyph.
    pub fn covers(self, dx: f64, dy: f64, s: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Glyph::Disk => dx * dx + dy * dy <= s * s * 0.8,
            Glyph::Cross => (ax <= 1.0 && ay <= s) || (ay <= 1.0 && ax <= s),
            Glyph::Stripes => {
                ax <= s && ay <= s && ((dy + s) / (s / 2.5)).floor() as i64 % 2 == 0
            }
            Glyph::Checkerboard => {
                let cell = s / 1.5;
                ax <= s && ay <= s && ((ax / cell).round() as i64 + (ay / cell).round() as i64) % 2 == 0
            }
            Glyph::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= s * s && r2 >= (s - 1.8) * (s - 1.8)
            }
            Glyph::Bar => ax <= 1.3 && ay <= s,
            Glyph::Saltire => (ax - ay).abs() <= 1.0 && ax <= s,
            Glyph::Frame => {
                let m = ax.max(ay);
                m <= s && m >= s - 1.6
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SUPERSAMPLE: [f64; 2] = [-0.25, 0.25];

/// Renders one image of class `class` into `out` (`IMAGE_LEN` values).
pub fn render(class: usize, cfg: &ShapegridConfig, rng: &mut Rng, out: &mut [f32]) {
    let glyph = Glyph::ALL[class];
    let j = cfg.position_jitter;
    let centre = SIDE as f64 / 2.0;
    let cx = centre + rng.uniform_range(-j, j);
    let cy = centre + rng.uniform_range(-j, j);
    let size = 5.0 * rng.uniform_range(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
    let hue = class as f64 / cfg.classes as f64 + rng.uniform_range(-cfg.hue_jitter, cfg.hue_jitter);
    let fg = hsv_to_rgb(hue, rng.uniform_range(0.55, 0.9), rng.uniform_range(0.7, 1.0));
    let bg_level = rng.uniform_range(0.08, 0.35);
    let mut bg = [0.0; 3];
    for b in &mut bg {
        *b = (bg_level + rng.uniform_range(-0.05, 0.05)).clamp(0.0, 1.0);
    }
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut hits = 0u32;
            for oy in SUPERSAMPLE {
                for ox in SUPERSAMPLE {
                    let dx = x as f64 + 0.5 + ox - cx;
                    let dy = y as f64 + 0.5 + oy - cy;
                    hits += glyph.covers(dx, dy, size) as u32;
                }
            }
            let m = hits as f64 / 4.0;
            for c in 0..CHANNELS {
                out[(c * SIDE + y) * SIDE + x] = ((1.0 - m) * bg[c] + m * fg[c]) as f32;
            }
        }
    }
}

/// `n` labelled images with classes cycling `0, 1, .., C-1`, then shuffled.
pub fn gen_shapegrid(n: usize, cfg: &ShapegridConfig, rng: &mut Rng) -> Result<ImageBatch> {
    if !(2..=MAX_CLASSES).contains(&cfg.classes) {
        return Err(Error::Data(format!(
            "{} classes; supported range is 2..={MAX_CLASSES}",
            cfg.classes
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = vec![0f32; n * IMAGE_LEN];
    for (i, img) in data.chunks_exact_mut(IMAGE_LEN).enumerate() {
        render(labels[i], cfg, rng, img);
    }
    ImageBatch::new(Tensor::new(&[n, CHANNELS, SIDE, SIDE], data)?, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Brightness,
    Contrast,
    Blur,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Blur,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown corruption {s:?}")))
    }
}

pub const MAX_SEVERITY: u8 = 5;
const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const BRIGHTNESS_DELTA: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
const CONTRAST_FACTOR: [f64; 5] = [0.85, 0.7, 0.55, 0.4, 0.3];
const BLUR_RADIUS: [usize; 5] = [1, 1, 2, 2, 3];
const BLUR_BLEND: [f64; 5] = [0.4, 0.7, 0.6, 0.85, 1.0];
const PIXELATE_FACTOR: [usize; 5] = [2, 2, 4, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::Data(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { kind, severity })
    }

    pub fn gaussian_sigma(severity: u8) -> f64 {
        if severity == 0 {
            0.0
        } else {
            GAUSSIAN_SIGMA[severity as usize - 1]
        }
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Sum of a row visited as mirrored pairs, so a reversed row sums to the
/// same bits.
fn mirrored_sum(row: &[f32]) -> f64 {
    let n = row.len();
    let mut s = 0.0f64;
    for j in 0..n / 2 {
        s += row[j] as f64 + row[n - 1 - j] as f64;
    }
    if n % 2 == 1 {
        s += row[n / 2] as f64;
    }
    s
}

/// Applies one corruption to every image; severity 0 returns the input.
pub fn corrupt(x: &ImageBatch, spec: CorruptionSpec, rng: &mut Rng) -> Result<ImageBatch> {
    let images = corrupt_tensor(&x.images, spec, rng)?;
    Ok(ImageBatch {
        images,
        labels: x.labels.clone(),
    })
}

pub fn corrupt_tensor(x: &Tensor<f32>, spec: CorruptionSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Data(format!("corrupt expects [N, C, H, W], got {s:?}")));
    }
    if spec.severity == 0 {
        return Ok(x.clone());
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let sev = spec.severity as usize - 1;
    let mut out = x.clone();
    let data = out.data_mut();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[sev];
            for v in data.iter_mut() {
                *v = clamp01(*v + rng.normal(0.0, sigma) as f32);
            }
        }
        CorruptionKind::Brightness => {
            let d = BRIGHTNESS_DELTA[sev] as f32;
            for v in data.iter_mut() {
                *v = clamp01(*v + d);
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[sev];
            for img in data.chunks_exact_mut(c * h * w) {
                let mean = img.chunks_exact(w).map(mirrored_sum).sum::<f64>() / img.len() as f64;
                for v in img.iter_mut() {
                    *v = clamp01(((*v as f64 - mean) * f + mean) as f32);
                }
            }
        }
        CorruptionKind::Blur => {
            let (r, blend) = (BLUR_RADIUS[sev], BLUR_BLEND[sev]);
            for plane in data.chunks_exact_mut(h * w) {
                let blurred = box_blur(plane, h, w, r);
                for (v, b) in plane.iter_mut().zip(blurred) {
                    *v = clamp01(((1.0 - blend) * *v as f64 + blend * b) as f32);
                }
            }
        }
        CorruptionKind::Pixelate => {
            let f = PIXELATE_FACTOR[sev];
            if h % f != 0 || w % f != 0 {
                return Err(Error::Data(format!("pixelate factor {f} does not divide {h}x{w}")));
            }
            for plane in data.chunks_exact_mut(h * w) {
                pixelate(plane, h, w, f);
            }
        }
    }
    Ok(out)
}

/// Box average over the in-bounds part of a `(2r+1)^2` window.
fn box_blur(plane: &[f32], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut horiz = vec![0.0f64; h * w];
    let mut count_h = vec![0.0f64; w];
    for x in 0..w {
        let mut n = 1.0;
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let mut s = row[x] as f64;
            n = 1.0;
            for d in 1..=r {
                // mirrored pairs keep the sum invariant under horizontal flips
                let left = x.checked_sub(d).map(|i| row[i] as f64);
                let right = (x + d < w).then(|| row[x + d] as f64);
                match (left, right) {
                    (Some(a), Some(b)) => {
                        s += a + b;
                        n += 2.0;
                    }
                    (Some(a), None) | (None, Some(a)) => {
                        s += a;
                        n += 1.0;
                    }
                    (None, None) => {}
                }
            }
            horiz[y * w + x] = s;
        }
        count_h[x] = n;
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut s = 0.0;
            for yy in lo..=hi {
                s += horiz[yy * w + x];
            }
            out[y * w + x] = s / (count_h[x] * (hi - lo + 1) as f64);
        }
    }
    out
}

fn pixelate(plane: &mut [f32], h: usize, w: usize, f: usize) {
    for by in 0..h / f {
        for bx in 0..w / f {
            let mut s = 0.0f64;
            for y in by * f..(by + 1) * f {
                s += mirrored_sum(&plane[y * w + bx * f..y * w + (bx + 1) * f]);
            }
            let mean = (s / (f * f) as f64) as f32;
            for y in by * f..(by + 1) * f {
                plane[y * w + bx * f..y * w + (bx + 1) * f].fill(mean);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSetting {
    Continual,
    Gradual,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub setting: StreamSetting,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<CorruptionKind>,
    #[serde(default = "default_batches")]
    pub batches_per_segment: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn all_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}
fn default_batches() -> usize {
    20
}
fn default_batch() -> usize {
    64
}

pub const GRADUAL_WALK: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

/// One stretch of the stream with a fixed corruption; `kind` is `None` for
/// mixed segments, where each image draws its own kind at severity 5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub kind: Option<CorruptionKind>,
    pub severity: u8,
}

impl Segment {
    pub fn kind_name(&self) -> &'static str {
        self.kind.map_or("mixed", CorruptionKind::name)
    }
}

impl StreamSpec {
    pub fn segments(&self) -> Vec<Segment> {
        let seg = |index, kind, severity| Segment { index, kind, severity };
        match self.setting {
            StreamSetting::Continual => self
                .kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| seg(i, Some(k), MAX_SEVERITY))
                .collect(),
            StreamSetting::Gradual => self
                .kinds
                .iter()
                .flat_map(|&k| GRADUAL_WALK.iter().map(move |&s| (k, s)))
                .enumerate()
                .map(|(i, (k, s))| seg(i, Some(k), s))
                .collect(),
            StreamSetting::Mixed => vec![seg(0, None, MAX_SEVERITY)],
        }
    }

    pub fn num_batches(&self) -> usize {
        self.segments().len() * self.batches_per_segment
    }

    pub fn num_images(&self) -> usize {
        self.num_batches() * self.batch_size
    }

    fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.batch_size == 0 || self.batches_per_segment == 0 {
            return Err(Error::Data("stream needs kinds, batch size and batches per segment".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StreamBatch {
    /// Zero-based batch position in the stream.
    pub position: usize,
    pub segment: Segment,
    pub batch: ImageBatch,
}

/// Lazily materialized corrupted batches drawn without replacement from a
/// pool.
pub struct Stream<'a> {
    spec: StreamSpec,
    pool: &'a ImageBatch,
    order: Vec<usize>,
    segments: Vec<Segment>,
    position: usize,
    rng: Rng,
}

pub fn build_stream<'a>(spec: &StreamSpec, pool: &'a ImageBatch) -> Result<Stream<'a>> {
    spec.validate()?;
    let needed = spec.num_images();
    if needed > pool.len() {
        return Err(Error::PoolExhausted {
            needed,
            available: pool.len(),
        });
    }
    let rng = Rng::new(spec.seed);
    let mut order = rng.fork(0).permutation(pool.len());
    order.truncate(needed);
    Ok(Stream {
        spec: spec.clone(),
        pool,
        order,
        segments: spec.segments(),
        position: 0,
        rng,
    })
}

impl Stream<'_> {
    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    fn make(&self, position: usize) -> Result<StreamBatch> {
        let b = self.spec.batch_size;
        let segment = self.segments[position / self.spec.batches_per_segment];
        let rows = &self.order[position * b..(position + 1) * b];
        let clean = self.pool.select(rows)?;
        let mut rng = self.rng.fork(1 + position as u64);
        let batch = match segment.kind {
            Some(kind) => corrupt(&clean, CorruptionSpec::new(kind, segment.severity)?, &mut rng)?,
            None => {
                let kinds = &self.spec.kinds;
                let mut data = Vec::with_capacity(clean.images.numel());
                for i in 0..clean.len() {
                    let kind = kinds[rng.below(kinds.len())];
                    let one = clean.images.slice_rows(i, i + 1)?;
                    let out = corrupt_tensor(&one, CorruptionSpec::new(kind, segment.severity)?, &mut rng)?;
                    data.extend_from_slice(out.data());
                }
                ImageBatch::new(Tensor::new(clean.images.shape(), data)?, clean.labels)?
            }
        };
        Ok(StreamBatch {
            position,
            segment,
            batch,
        })
    }
}

impl Iterator for Stream<'_> {
    type Item = Result<StreamBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.position >= self.spec.num_batches() {
            return None;
        }
        let out = self.make(self.position);
        self.position += 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.num_batches() - self.position;
        (left, Some(left))
    }
}

/// Additive Gaussian noise with the given mean and variance, clamped.
pub fn add_gaussian(x: &Tensor<f32>, mean: f64, variance: f64, rng: &mut Rng) -> Tensor<f32> {
    let std = variance.max(0.0).sqrt();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = clamp01(*v + rng.normal(mean, std) as f32);
    }
    out
}

/// Writes a dataset in the tensor-store format.
pub fn save_dataset(data: &ImageBatch, dir: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let records = vec![
        Record {
            name: "images".into(),
            block_index: 0,
            kind: TensorKind::Data,
            shape: data.images.shape().to_vec(),
            data: data.images.data().to_vec(),
        },
        Record {
            name: "labels".into(),
            block_index: 0,
            kind: TensorKind::Data,
            shape: vec![data.len()],
            data: data.labels.iter().map(|&l| l as f32).collect(),
        },
    ];
    write_store(dir, None, meta, records)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<ImageBatch> {
    let (manifest, mut arrays) = read_store(dir)?;
    let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != ["images", "labels"] {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("expected images and labels, found {names:?}"),
        });
    }
    let labels = arrays.pop().unwrap_or_default().into_iter().map(|v| v as usize).collect();
    let images = Tensor::new(&manifest.tensors[0].shape, arrays.pop().unwrap_or_default())?;
    ImageBatch::new(images, labels)
}
