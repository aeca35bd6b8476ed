use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::heads::{AugProjectorConfig, HeadConfig, Mlp, PredictorConfig};
use super::params::{Init, ParamGroup, ParamStore};
use super::resnet::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquiModConfig {
    pub equi_head: HeadConfig,
    pub predictor: PredictorConfig,
    pub aug_projector: AugProjectorConfig,
}

impl Default for EquiModConfig {
    fn default() -> Self {
        Self {
            equi_head: HeadConfig::equivariance(),
            predictor: PredictorConfig::default(),
            aug_projector: AugProjectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub inv_head: HeadConfig,
    /// Online predictor on top of the invariance head (BYOL only).
    pub byol_predictor: Option<HeadConfig>,
    /// `None` builds the plain invariance baseline.
    pub equimod: Option<EquiModConfig>,
    /// Length of the raw trace encoding for the dataset/baseline profile.
    pub encoding_len: usize,
}

#[derive(Debug, Clone)]
pub struct EquiBranch {
    pub head: Mlp,
    pub predictor: Mlp,
    pub aug_projector: Mlp,
}

/// Online network: encoder, invariance head, optional BYOL predictor and the
/// equivariance branch (head, augmentation projector, predictor).
#[derive(Debug)]
pub struct EquiModModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    inv_head: Mlp,
    byol_predictor: Option<Mlp>,
    equi: Option<EquiBranch>,
}

impl EquiModModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_init(config, seed, dtype, device, Init::Default)
    }

    pub fn with_init(config: ModelConfig, seed: u64, dtype: DType, device: &Device, init: Init) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device.clone()).with_init(init);
        let encoder = Encoder::new(&mut store, config.encoder)?;
        let rep = encoder.representation_width();
        let inv_head = Mlp::head(&mut store, "inv_head", rep, &config.inv_head, ParamGroup::InvHead)?;
        let byol_predictor = match &config.byol_predictor {
            Some(cfg) => Some(Mlp::head(
                &mut store,
                "byol_predictor",
                inv_head.output_width(),
                cfg,
                ParamGroup::ByolPredictor,
            )?),
            None => None,
        };
        let equi = match &config.equimod {
            Some(cfg) => {
                let head = Mlp::head(&mut store, "equi_head", rep, &cfg.equi_head, ParamGroup::EquiHead)?;
                let aug_projector = Mlp::aug_projector(&mut store, "aug_projector", config.encoding_len, &cfg.aug_projector)?;
                let predictor = Mlp::predictor(
                    &mut store,
                    "predictor",
                    aug_projector.output_width() + head.output_width(),
                    head.output_width(),
                    &cfg.predictor,
                )?;
                Some(EquiBranch {
                    head,
                    predictor,
                    aug_projector,
                })
            }
            None => None,
        };
        Ok(Self {
            config,
            store,
            encoder,
            inv_head,
            byol_predictor,
            equi,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn has_equimod(&self) -> bool {
        self.equi.is_some()
    }

    pub fn representation_width(&self) -> usize {
        self.encoder.representation_width()
    }

    pub fn equivariance_width(&self) -> Option<usize> {
        self.equi.as_ref().map(|e| e.head.output_width())
    }

    fn branch(&self) -> Result<&EquiBranch> {
        self.equi
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without the equivariance module".into()))
    }

    /// `h = f(x)`.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.encoder.forward(images, train)
    }

    /// `z = g(h)`.
    pub fn project_inv(&self, h: &Tensor, train: bool) -> Result<Tensor> {
        self.inv_head.forward(h, train)
    }

    pub fn predict_byol(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        match &self.byol_predictor {
            Some(p) => p.forward(z, train),
            None => Err(Error::Config("model has no BYOL predictor".into())),
        }
    }

    /// `z' = g'(h)`.
    pub fn project_equi(&self, h: &Tensor, train: bool) -> Result<Tensor> {
        self.branch()?.head.forward(h, train)
    }

    /// Projects normalized trace vectors `[B, L]` to augmentation codes.
    pub fn project_aug(&self, encoded: &Tensor, train: bool) -> Result<Tensor> {
        self.branch()?.aug_projector.forward(encoded, train)
    }

    /// `ẑ' = u([t-code, z'_o])`.
    pub fn predict_equi(&self, z_orig: &Tensor, t_code: &Tensor, train: bool) -> Result<Tensor> {
        let b = self.branch()?;
        let (n1, w1) = z_orig.dims2()?;
        let (n2, w2) = t_code.dims2()?;
        if w1 != b.head.output_width() || w2 != b.aug_projector.output_width() || n1 != n2 {
            return Err(Error::shape(
                format!(
                    "[B, {}] embeddings with [B, {}] codes",
                    b.head.output_width(),
                    b.aug_projector.output_width()
                ),
                format!("[{n1}, {w1}] with [{n2}, {w2}]"),
            ));
        }
        let input = Tensor::cat(&[t_code, z_orig], 1)?;
        b.predictor.forward(&input, train)
    }
}

/// BYOL's momentum network: encoder plus invariance head, same parameter
/// names as the online network.
#[derive(Debug)]
pub struct TargetNetwork {
    store: ParamStore,
    encoder: Encoder,
    projector: Mlp,
}

impl TargetNetwork {
    /// Built with the online seed, so it starts as an exact copy.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let encoder = Encoder::new(&mut store, config.encoder)?;
        let projector = Mlp::head(&mut store, "inv_head", encoder.representation_width(), &config.inv_head, ParamGroup::InvHead)?;
        Ok(Self { store, encoder, projector })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Target projections, detached from the graph.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.encoder.forward(images, train)?;
        Ok(self.projector.forward(&h, train)?.detach())
    }
}

/// Stacks `[0, 1]` RGB images into a standardized `[B, 3, H, W]` tensor.
pub fn images_to_tensor(
    images: &[crate::augcodec::Image],
    channel_stats: ([f32; 3], [f32; 3]),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("empty image batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let (mean, std) = channel_stats;
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::shape(format!("{w}x{h} images"), format!("{}x{}", img.width(), img.height())));
        }
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend(raw.iter().skip(c).step_by(3).map(|v| (v - mean[c]) / std[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}
