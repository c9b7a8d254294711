#![allow(dead_code)]

use std::sync::OnceLock;

use dplot::config::PretrainConfig;
use dplot::data::{gen_shapegrid, ImageBatch, ShapegridConfig};
use dplot::harness::pretrain;
use dplot::model::{ArchSpec, BlockNet, BlockSpec};
use dplot_tensor::Rng;

pub const CLASSES: usize = 3;

pub fn tiny_arch(classes: usize) -> ArchSpec {
    let conv = |channels, stride| BlockSpec::ResidualConv {
        channels,
        stride,
        batch_norm: true,
    };
    ArchSpec {
        in_channels: 3,
        height: 16,
        width: 16,
        num_classes: classes,
        blocks: vec![
            BlockSpec::Stem {
                channels: 4,
                batch_norm: true,
            },
            conv(4, 2),
            conv(8, 2),
            conv(8, 1),
            BlockSpec::Classifier,
        ],
    }
}

/// Untrained 4-block model with running statistics set from real images.
pub fn tiny(seed: u64) -> BlockNet<f64> {
    let mut m = BlockNet::new(&tiny_arch(CLASSES), &mut Rng::new(seed)).unwrap();
    m.recalibrate_bn(&data(64, 99).images.cast()).unwrap();
    m
}

pub fn shapes(classes: usize) -> ShapegridConfig {
    ShapegridConfig {
        classes,
        ..ShapegridConfig::default()
    }
}

pub fn data(n: usize, seed: u64) -> ImageBatch {
    gen_shapegrid(n, &shapes(CLASSES), &mut Rng::new(seed)).unwrap()
}

/// Briefly trained 4-class model shared within one test binary.
pub fn trained() -> &'static (BlockNet<f32>, ImageBatch) {
    static MODEL: OnceLock<(BlockNet<f32>, ImageBatch)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = shapes(4);
        let train = gen_shapegrid(1536, &cfg, &mut Rng::new(11)).unwrap();
        let val = gen_shapegrid(512, &cfg, &mut Rng::new(12)).unwrap();
        let arch = ArchSpec {
            blocks: {
                let mut b = tiny_arch(4).blocks;
                b[0] = BlockSpec::Stem {
                    channels: 8,
                    batch_norm: true,
                };
                b[1] = BlockSpec::ResidualConv {
                    channels: 8,
                    stride: 1,
                    batch_norm: true,
                };
                b[2] = BlockSpec::ResidualConv {
                    channels: 16,
                    stride: 2,
                    batch_norm: true,
                };
                b[3] = BlockSpec::ResidualConv {
                    channels: 16,
                    stride: 2,
                    batch_norm: true,
                };
                b
            },
            ..tiny_arch(4)
        };
        let pcfg = PretrainConfig {
            epochs: 4,
            ..PretrainConfig::default()
        };
        let (model, _) = pretrain::<f32>(&arch, &train, &val, &pcfg, 256).unwrap();
        (model, val)
    })
}
