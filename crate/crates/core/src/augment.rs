//! Random views used by the multi-view pseudo-label variants.

use dplot_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_tensor, CorruptionKind, CorruptionSpec, CHANNELS, IMAGE_LEN, SIDE};
use crate::error::Result;

/// How the teacher's pseudo-label is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMenu {
    /// Mean of the teacher's predictions on `x` and its horizontal flip.
    #[default]
    PairedView,
    /// Mean over random views with gaussian noise and blur.
    NoiseBlur,
    /// Mean over random views with brightness, contrast and saturation jitter.
    ColorJitter,
    /// Mean over random views combining every augmentation above.
    All,
}

impl PseudoLabelMenu {
    pub const ALL: [PseudoLabelMenu; 4] = [
        PseudoLabelMenu::PairedView,
        PseudoLabelMenu::NoiseBlur,
        PseudoLabelMenu::ColorJitter,
        PseudoLabelMenu::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PseudoLabelMenu::PairedView => "paired_view",
            PseudoLabelMenu::NoiseBlur => "noise_blur",
            PseudoLabelMenu::ColorJitter => "color_jitter",
            PseudoLabelMenu::All => "all",
        }
    }
}

fn noise_blur(x: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
    let n = x.dim(0);
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..n {
        let mut img = x.slice_rows(i, i + 1)?;
        let sev = 1 + rng.below(2) as u8;
        img = corrupt_tensor(&img, CorruptionSpec::new(CorruptionKind::GaussianNoise, sev)?, rng)?;
        if rng.bernoulli(0.5) {
            img = corrupt_tensor(&img, CorruptionSpec::new(CorruptionKind::Blur, 1)?, rng)?;
        }
        out.extend_from_slice(img.data());
    }
    Ok(Tensor::new(x.shape(), out)?)
}

fn color_jitter(x: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
    let mut out = x.clone();
    let plane = SIDE * SIDE;
    for img in out.data_mut().chunks_exact_mut(IMAGE_LEN) {
        let brightness = rng.uniform_range(0.8, 1.2) as f32;
        let contrast = rng.uniform_range(0.8, 1.2) as f32;
        let saturation = rng.uniform_range(0.8, 1.2) as f32;
        for v in img.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean = img.iter().sum::<f32>() / img.len() as f32;
        for v in img.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        for p in 0..plane {
            let grey = (0..CHANNELS).map(|c| img[c * plane + p]).sum::<f32>() / CHANNELS as f32;
            for c in 0..CHANNELS {
                let v = &mut img[c * plane + p];
                *v = ((*v - grey) * saturation + grey).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn random_flip(x: &mut Tensor<f32>, rng: &mut Rng) {
    for img in x.data_mut().chunks_exact_mut(IMAGE_LEN) {
        if rng.bernoulli(0.5) {
            for row in img.chunks_exact_mut(SIDE) {
                row.reverse();
            }
        }
    }
}

/// One random view of `x` for a multi-view menu, including a per-image
/// horizontal flip with probability one half.
pub fn random_view(x: &Tensor<f32>, menu: PseudoLabelMenu, rng: &mut Rng) -> Result<Tensor<f32>> {
    let mut v = match menu {
        PseudoLabelMenu::PairedView => x.clone(),
        PseudoLabelMenu::NoiseBlur => noise_blur(x, rng)?,
        PseudoLabelMenu::ColorJitter => color_jitter(x, rng)?,
        PseudoLabelMenu::All => {
            let c = color_jitter(x, rng)?;
            noise_blur(&c, rng)?
        }
    };
    random_flip(&mut v, rng);
    Ok(v)
}
