//! Encoder, projection heads, augmentation projector and equivariance predictor.

mod heads;
mod layers;
mod model;
mod params;
mod resnet;

pub use heads::{AugProjectorConfig, HeadConfig, Mlp, PredictorConfig};
pub use layers::{row_norms, BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use model::{images_to_tensor, EquiBranch, EquiModConfig, EquiModModel, ModelConfig, TargetNetwork};
pub use params::{Init, Param, ParamGroup, ParamKind, ParamStore};
pub use resnet::{Encoder, EncoderArch, EncoderConfig};
