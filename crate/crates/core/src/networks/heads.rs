use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear};
use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// Projection head: `layers` fully-connected layers, each followed by batch
/// norm and ReLU except the last, which gets batch norm only when
/// `final_bn` is set. Zero layers means the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out: usize,
    pub final_bn: bool,
}

impl HeadConfig {
    /// Three layers, 2048 hidden, 128 out, batch norm on the output.
    pub fn equivariance() -> Self {
        Self {
            layers: 3,
            hidden: 2048,
            out: 128,
            final_bn: true,
        }
    }

    pub fn output_width(&self, input: usize) -> usize {
        if self.layers == 0 {
            input
        } else {
            self.out
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.layers > 0 && (self.out == 0 || (self.layers > 1 && self.hidden == 0)) {
            return Err(Error::Config(format!("{what}: widths must be positive")));
        }
        Ok(())
    }
}

/// Equivariance predictor: FC + BN, optionally with a hidden FC-BN-ReLU layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { layers: 1, hidden: 0 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.layers {
            1 => Ok(()),
            2 if self.hidden > 0 => Ok(()),
            _ => Err(Error::Config(format!(
                "predictor must have 1 layer or 2 layers with a positive hidden width, got {self:?}"
            ))),
        }
    }
}

/// Perceptron that projects the normalized trace vector. Zero layers feeds
/// the normalized vector to the predictor unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugProjectorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out: usize,
}

impl Default for AugProjectorConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            hidden: 0,
            out: 128,
        }
    }
}

impl AugProjectorConfig {
    pub fn output_width(&self, encoding_len: usize) -> usize {
        if self.layers == 0 {
            encoding_len
        } else {
            self.out
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers {
            0 => Ok(()),
            1 if self.out > 0 => Ok(()),
            2 if self.out > 0 && self.hidden > 0 => Ok(()),
            _ => Err(Error::Config(format!("invalid augmentation projector {self:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct MlpLayer {
    linear: Linear,
    bn: Option<BatchNorm>,
    relu: bool,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
    input_width: usize,
    output_width: usize,
}

impl Mlp {
    /// `widths` lists each layer's output width. Hidden layers get
    /// batch norm when `hidden_bn`; the output layer when `final_bn`.
    /// Layers followed by batch norm carry no bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        widths: &[usize],
        hidden_bn: bool,
        final_bn: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = input_width;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let has_bn = if last { final_bn } else { hidden_bn };
            let linear = Linear::new(store, &format!("{name}.{i}.fc"), cin, w, !has_bn, group)?;
            let bn = if has_bn {
                Some(BatchNorm::new(store, &format!("{name}.{i}.bn"), w, group)?)
            } else {
                None
            };
            layers.push(MlpLayer { linear, bn, relu: !last });
            cin = w;
        }
        Ok(Self {
            layers,
            input_width,
            output_width: cin,
        })
    }

    pub fn head(store: &mut ParamStore, name: &str, input_width: usize, config: &HeadConfig, group: ParamGroup) -> Result<Self> {
        config.validate(name)?;
        let widths: Vec<usize> = (0..config.layers)
            .map(|i| if i + 1 == config.layers { config.out } else { config.hidden })
            .collect();
        Self::new(store, name, input_width, &widths, true, config.final_bn, group)
    }

    pub fn predictor(store: &mut ParamStore, name: &str, input_width: usize, output_width: usize, config: &PredictorConfig) -> Result<Self> {
        config.validate()?;
        let widths = if config.layers == 1 {
            vec![output_width]
        } else {
            vec![config.hidden, output_width]
        };
        Self::new(store, name, input_width, &widths, true, true, ParamGroup::Predictor)
    }

    pub fn aug_projector(store: &mut ParamStore, name: &str, encoding_len: usize, config: &AugProjectorConfig) -> Result<Self> {
        config.validate()?;
        let widths = match config.layers {
            0 => vec![],
            1 => vec![config.out],
            _ => vec![config.hidden, config.out],
        };
        Self::new(store, name, encoding_len, &widths, false, false, ParamGroup::AugProjector)
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, cols) = x.dims2()?;
        if cols != self.input_width {
            return Err(Error::shape(format!("{} input features", self.input_width), cols));
        }
        let mut y = x.clone();
        for l in &self.layers {
            y = l.linear.forward(&y)?;
            if let Some(bn) = &l.bn {
                y = bn.forward(&y, train)?;
            }
            if l.relu {
                y = y.relu()?;
            }
        }
        Ok(y)
    }
}
