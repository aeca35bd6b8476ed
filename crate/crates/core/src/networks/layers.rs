use candle_core::{Tensor, Var, D};

use super::params::{ParamGroup, ParamKind, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, bias: bool, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (out_features, in_features), bound, ParamKind::Weight, group)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), out_features, bound, ParamKind::Bias, group)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.dims2()?;
        if cols != self.in_features {
            return Err(Error::shape(format!("{} input features", self.in_features), cols));
        }
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Batch normalization over `[B, C]` or `[B, C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), channels, 1.0, ParamKind::NormScale, group)?,
            bias: store.constant(&format!("{name}.bias"), channels, 0.0, ParamKind::NormShift, group)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), channels, 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), channels, 1.0)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn stat_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![1; rank];
        s[1] = self.channels;
        s
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; evaluation mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        if !(rank == 2 || rank == 4) || x.dim(1)? != self.channels {
            return Err(Error::shape(format!("[B, {}] or [B, {}, H, W]", self.channels, self.channels), format!("{:?}", x.dims())));
        }
        let shape = self.stat_shape(rank);
        let reduce: Vec<usize> = if rank == 2 { vec![0] } else { vec![0, 2, 3] };
        let (mean, var) = if train {
            let count = x.elem_count() / self.channels;
            if x.dim(0)? < 2 || count < 2 {
                return Err(Error::Precondition(
                    "batch normalization in training mode needs at least two samples".into(),
                ));
            }
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(reduce.as_slice())?;
            let m = BN_MOMENTUM;
            let unbiased = var.detach().flatten_all()?.affine(count as f64 / (count - 1) as f64, 0.0)?;
            let new_mean = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let new_var = (self.running_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.affine(m, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape(shape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(shape.as_slice())?)?)
    }
}

/// Bias-free 2-D convolution (always followed by batch normalization here).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal init with fan-out, as in the reference ResNets.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            (out_channels, in_channels, kernel, kernel),
            (2.0 / fan_out).sqrt(),
            ParamKind::Weight,
            group,
        )?;
        Ok(Self { weight, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }
}

/// Row-wise L2 norms of a `[B, D]` tensor.
pub fn row_norms(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(1, DType::F64, Device::Cpu)
    }

    #[test]
    fn linear_shapes_and_mismatch() {
        let mut s = store();
        let l = Linear::new(&mut s, "fc", 5, 3, true, ParamGroup::InvHead).unwrap();
        let x = Tensor::ones((4, 5), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[4, 3]);
        let bad = Tensor::ones((4, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l.forward(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn batchnorm_training_standardizes() {
        let mut s = store();
        let bn = BatchNorm::new(&mut s, "bn", 2, ParamGroup::InvHead).unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0], [3.0, 20.0], [5.0, 60.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        for c in 0..2 {
            let col: Vec<f64> = y.iter().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running mean moved 10% towards the batch mean (3, 30)
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12 && (rm[1] - 3.0).abs() < 1e-12);
        // unbiased variance of column 0 is 4
        let rv = bn.running_var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rv[0] - (0.9 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_zero_input_gives_zero() {
        let mut s = store();
        let bn = BatchNorm::new(&mut s, "bn", 3, ParamGroup::EquiHead).unwrap();
        let x = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        let y = bn.forward(&x, false).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn batchnorm_needs_two_samples_in_training() {
        let mut s = store();
        let bn = BatchNorm::new(&mut s, "bn", 3, ParamGroup::EquiHead).unwrap();
        let x = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(bn.forward(&x, true), Err(Error::Precondition(_))));
    }

    #[test]
    fn batchnorm_4d() {
        let mut s = store();
        let bn = BatchNorm::new(&mut s, "bn", 2, ParamGroup::Encoder).unwrap();
        let x = Tensor::arange(0.0f64, 32.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 4)).unwrap();
        let y = bn.forward(&x, true).unwrap();
        assert_eq!(y.dims(), &[2, 2, 2, 4]);
        let per_channel = y.mean_keepdim(vec![0usize, 2, 3].as_slice()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(per_channel.iter().all(|m| m.abs() < 1e-12));
    }
}
