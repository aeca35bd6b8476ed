use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Trainable parameter groups; gradient-flow checks are reported per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    InvHead,
    ByolPredictor,
    EquiHead,
    Predictor,
    AugProjector,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::InvHead => "inv_head",
            ParamGroup::ByolPredictor => "byol_predictor",
            ParamGroup::EquiHead => "equi_head",
            ParamGroup::Predictor => "predictor",
            ParamGroup::AugProjector => "aug_projector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Biases and normalization parameters skip weight decay and the
    /// layer-wise trust ratio.
    pub fn is_excluded_from_adaptation(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Default,
    /// Every weight and bias zero, normalization scales one.
    Zeros,
}

/// Owns every variable of a network. Each tensor is initialized from an RNG
/// seeded by the store seed and the parameter's name, so a parameter gets
/// the same initial value no matter which other modules are built alongside.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Var)>,
    seed: u64,
    dtype: DType,
    device: Device,
    init: Init,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            seed,
            dtype,
            device,
            init: Init::Default,
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn init(&self) -> Init {
        self.init
    }

    fn make(&self, values: Vec<f64>, shape: Shape) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: Shape, kind: ParamKind, group: ParamGroup) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = self.make(values, shape)?;
        self.params.push(Param {
            name,
            var: var.clone(),
            kind,
            group,
        });
        Ok(var)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64, kind: ParamKind, group: ParamGroup) -> Result<Var> {
        let shape = shape.into();
        let values = match self.init {
            Init::Zeros => vec![0.0; shape.elem_count()],
            Init::Default => {
                let mut rng = seeding::rng(seeding::name_seed(self.seed, name), &[]);
                (0..shape.elem_count())
                    .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
                    .collect()
            }
        };
        self.register(name.to_string(), values, shape, kind, group)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64, kind: ParamKind, group: ParamGroup) -> Result<Var> {
        let shape = shape.into();
        let values = match self.init {
            Init::Zeros => vec![0.0; shape.elem_count()],
            Init::Default => {
                let mut rng = seeding::rng(seeding::name_seed(self.seed, name), &[]);
                (0..shape.elem_count())
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        self.register(name.to_string(), values, shape, kind, group)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64, kind: ParamKind, group: ParamGroup) -> Result<Var> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.register(name.to_string(), values, shape, kind, group)
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let shape = shape.into();
        let var = self.make(vec![value; shape.elem_count()], shape)?;
        self.buffers.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Every parameter and buffer, keyed by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .chain(self.buffers.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())))
            .collect()
    }

    /// Overwrites parameters and buffers from `tensors`; every name must be present.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        let vars = self
            .params
            .iter()
            .map(|p| (&p.name, &p.var))
            .chain(self.buffers.iter().map(|(n, v)| (n, v)));
        for (name, var) in vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Order-sensitive FNV checksum over the raw bytes of every parameter and buffer.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.named_tensors().values() {
            let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in flat {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        Ok(h)
    }
}
