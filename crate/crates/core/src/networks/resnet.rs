//! Residual encoders: the CIFAR variant of ResNet18 (3x3 stem, no max-pool)
//! and ResNet50 (v1.5 bottlenecks), both without the classification layer.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d};
use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

const G: ParamGroup = ParamGroup::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderArch {
    #[serde(rename = "resnet18-cifar")]
    Resnet18Cifar,
    #[serde(rename = "resnet50")]
    Resnet50,
}

impl EncoderArch {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderArch::Resnet18Cifar => "resnet18-cifar",
            EncoderArch::Resnet50 => "resnet50",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    /// Channels of the first stage; 64 for the standard networks.
    pub base_width: usize,
    /// Expected square input resolution.
    pub resolution: u32,
}

impl EncoderConfig {
    pub fn resnet18_cifar() -> Self {
        Self {
            arch: EncoderArch::Resnet18Cifar,
            base_width: 64,
            resolution: 32,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            arch: EncoderArch::Resnet50,
            base_width: 64,
            resolution: 224,
        }
    }

    /// 512 for ResNet18, 2048 for ResNet50 at the standard width.
    pub fn representation_width(&self) -> usize {
        match self.arch {
            EncoderArch::Resnet18Cifar => self.base_width * 8,
            EncoderArch::Resnet50 => self.base_width * 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.resolution == 0 {
            return Err(Error::Config("encoder width and resolution must be positive".into()));
        }
        if self.arch == EncoderArch::Resnet50 && self.resolution < 32 {
            return Err(Error::Config("resnet50 needs inputs of at least 32 pixels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Downsample {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.0"), cin, cout, 1, stride, 0, G)?,
            bn: BatchNorm::new(store, &format!("{name}.1"), cout, G)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<Downsample>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some(Downsample::new(store, &format!("{name}.downsample"), cin, cout, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, G)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout, G)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, G)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout, G)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<Downsample>,
}

impl Bottleneck {
    const EXPANSION: usize = 4;

    fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, stride: usize) -> Result<Self> {
        let cout = width * Self::EXPANSION;
        let downsample = if stride != 1 || cin != cout {
            Some(Downsample::new(store, &format!("{name}.downsample"), cin, cout, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, width, 1, 1, 0, G)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), width, G)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, stride, 1, G)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), width, G)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), width, cout, 1, 1, 0, G)?,
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), cout, G)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Block::Basic(b) => b.forward(x, train),
            Block::Bottleneck(b) => b.forward(x, train),
        }
    }
}

/// The encoder `f`: images `[B, 3, R, R]` to representations `[B, width]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let strides = [1, 2, 2, 2];
        let mut blocks = Vec::new();
        let (stem, stem_bn) = match config.arch {
            EncoderArch::Resnet18Cifar => {
                let stem = Conv2d::new(store, "encoder.conv1", 3, w, 3, 1, 1, G)?;
                let bn = BatchNorm::new(store, "encoder.bn1", w, G)?;
                let mut cin = w;
                for (stage, (&width, &stride)) in widths.iter().zip(&strides).enumerate() {
                    for i in 0..2 {
                        let name = format!("encoder.layer{}.{i}", stage + 1);
                        let s = if i == 0 { stride } else { 1 };
                        blocks.push(Block::Basic(BasicBlock::new(store, &name, cin, width, s)?));
                        cin = width;
                    }
                }
                (stem, bn)
            }
            EncoderArch::Resnet50 => {
                let stem = Conv2d::new(store, "encoder.conv1", 3, w, 7, 2, 3, G)?;
                let bn = BatchNorm::new(store, "encoder.bn1", w, G)?;
                let mut cin = w;
                for (stage, ((&width, &stride), &count)) in widths.iter().zip(&strides).zip(&[3, 4, 6, 3]).enumerate() {
                    for i in 0..count {
                        let name = format!("encoder.layer{}.{i}", stage + 1);
                        let s = if i == 0 { stride } else { 1 };
                        blocks.push(Block::Bottleneck(Bottleneck::new(store, &name, cin, width, s)?));
                        cin = width * Bottleneck::EXPANSION;
                    }
                }
                (stem, bn)
            }
        };
        Ok(Self {
            config,
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn representation_width(&self) -> usize {
        self.config.representation_width()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let r = self.config.resolution as usize;
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != r || dims[3] != r {
            return Err(Error::shape(format!("[B, 3, {r}, {r}]"), format!("{dims:?}")));
        }
        let mut y = self.stem_bn.forward(&self.stem.forward(x)?, train)?.relu()?;
        if self.config.arch == EncoderArch::Resnet50 {
            // post-ReLU activations are non-negative, so zero padding acts as -inf padding
            y = y
                .pad_with_zeros(2, 1, 1)?
                .pad_with_zeros(3, 1, 1)?
                .max_pool2d_with_stride(3, 2)?;
        }
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        Ok(y.flatten_from(2)?.mean(2)?)
    }
}
