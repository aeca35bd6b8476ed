//! The EquiMod training step: view generation, the three encoder passes,
//! the combined loss, LARS, and the BYOL momentum target.

mod checkpoint;
mod lars;
mod metrics;
mod schedule;
mod views;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use lars::{lars_update, Lars, OptimizerConfig};
pub use metrics::{MetricsLog, MetricsRow, METRICS_COLUMNS, METRICS_SCHEMA_VERSION};
pub use schedule::{byol_momentum, cosine_lr, ScheduleConfig, StepSchedule};
pub use views::{generate_views, ViewBatch, AUGMENT_STREAM};

use crate::augcodec::{Baseline, Image, LayoutDescriptor, PolicyPair};
use crate::error::{Error, Result};
use crate::networks::{images_to_tensor, EquiModModel, ModelConfig, ParamGroup, ParamStore, TargetNetwork};
use crate::objectives::{
    barlow_twins_loss, byol_invariance_loss, equimod_loss, simclr_invariance_loss, total_loss, EmbeddingBundle, LossConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub baseline: Baseline,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Micro-batches per optimizer step. Batch-norm statistics are per micro-batch.
    #[serde(default = "one")]
    pub accumulation_steps: usize,
}

fn one() -> usize {
    1
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss values of one forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub invariance: f64,
    pub equivariance: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Index of the step just taken.
    pub step: u64,
    pub lr: f64,
    pub losses: LossValues,
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub images_per_second: f64,
}

struct LossTensors {
    invariance: Tensor,
    equivariance: Option<Tensor>,
    total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `τ·target + (1 − τ)·online`.
pub fn ema_tensor(target: &Tensor, online: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(((target * tau)? + (online * (1.0 - tau))?)?)
}

/// Moves every target parameter towards the online parameter of the same name.
pub fn ema_update(target: &ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    for p in target.params() {
        let q = online
            .param(&p.name)
            .ok_or_else(|| Error::Precondition(format!("online network has no parameter {}", p.name)))?;
        if p.var.dims() != q.var.dims() {
            return Err(Error::shape(format!("{:?}", p.var.dims()), format!("{:?}", q.var.dims())));
        }
        p.var.set(&ema_tensor(p.var.as_tensor(), q.var.as_tensor(), tau)?.detach())?;
    }
    Ok(())
}

pub struct Trainer {
    config: TrainerConfig,
    model: EquiModModel,
    target: Option<TargetNetwork>,
    policies: PolicyPair,
    layout: LayoutDescriptor,
    lars: Lars,
    schedule: StepSchedule,
    seed: u64,
    step: u64,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_config: ModelConfig,
        config: TrainerConfig,
        policies: PolicyPair,
        layout: LayoutDescriptor,
        steps_per_epoch: u64,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        policies.validate()?;
        layout.validate()?;
        let profile = policies.profile();
        if layout.profile()? != profile {
            return Err(Error::Config(format!(
                "layout {} does not match the {} policies",
                layout.profile_id,
                profile.id()
            )));
        }
        if profile.baseline != config.baseline {
            return Err(Error::Config("augmentation profile and trainer use different baselines".into()));
        }
        if model_config.encoding_len != layout.length {
            return Err(Error::Config(format!(
                "model expects {}-d trace encodings, layout has {}",
                model_config.encoding_len, layout.length
            )));
        }
        if model_config.encoder.resolution != policies.first.resolution {
            return Err(Error::Config(format!(
                "encoder resolution {} differs from view resolution {}",
                model_config.encoder.resolution, policies.first.resolution
            )));
        }
        if (config.baseline == Baseline::Byol) != model_config.byol_predictor.is_some() {
            return Err(Error::Config("a BYOL predictor is required exactly when training BYOL".into()));
        }
        if steps_per_epoch == 0 {
            return Err(Error::Config("an epoch must contain at least one step".into()));
        }
        let target = match config.baseline {
            Baseline::Byol => Some(TargetNetwork::new(&model_config, seed, dtype, device)?),
            _ => None,
        };
        let model = EquiModModel::new(model_config, seed, dtype, device)?;
        Ok(Self {
            lars: Lars::new(config.optimizer),
            schedule: config.schedule.steps(steps_per_epoch),
            config,
            model,
            target,
            policies,
            layout,
            seed,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &EquiModModel {
        &self.model
    }

    pub fn target(&self) -> Option<&TargetNetwork> {
        self.target.as_ref()
    }

    pub fn policies(&self) -> &PolicyPair {
        &self.policies
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn optimizer(&self) -> &Lars {
        &self.lars
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule
    }

    /// Number of optimizer steps taken so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.config.optimizer.base_lr, self.schedule)
    }

    fn forward(&self, batch: &ViewBatch) -> Result<LossTensors> {
        let store = self.model.store();
        let (dtype, device) = (store.dtype(), store.device());
        let stats = self.policies.profile().dataset.channel_stats();
        let x = images_to_tensor(&batch.views, stats, dtype, device)?;
        let h = self.model.encode(&x, true)?;
        let z = self.model.project_inv(&h, true)?;
        let loss = &self.config.loss;
        let invariance = match self.config.baseline {
            Baseline::Simclr => simclr_invariance_loss(&z, loss.tau)?,
            Baseline::Barlow => barlow_twins_loss(&z, loss.barlow_lambda)?,
            Baseline::Byol => {
                let target = self
                    .target
                    .as_ref()
                    .ok_or_else(|| Error::Config("BYOL needs a target network".into()))?;
                let p = self.model.predict_byol(&z, true)?;
                byol_invariance_loss(&p, &target.forward(&x, true)?)?
            }
        };
        let equivariance = if self.model.has_equimod() {
            // The originals get their own encoder pass; see the ledger on batch statistics.
            let xo = images_to_tensor(&batch.originals, stats, dtype, device)?;
            let ho = self.model.encode(&xo, true)?;
            let z_equi = self.model.project_equi(&h, true)?;
            let z_orig = self.model.project_equi(&ho, true)?;
            let views = batch.codes.len();
            let flat: Vec<f64> = batch.codes.iter().flatten().copied().collect();
            let codes = Tensor::from_vec(flat, (views, self.layout.length), device)?.to_dtype(dtype)?;
            let t_code = self.model.project_aug(&codes, true)?;
            let z_pred = self.model.predict_equi(&Tensor::cat(&[&z_orig, &z_orig], 0)?, &t_code, true)?;
            let bundle = EmbeddingBundle {
                z,
                z_equi,
                z_orig,
                z_pred,
            };
            Some(equimod_loss(&bundle, loss.tau_prime, loss.denominator)?)
        } else {
            None
        };
        let total = total_loss(&invariance, equivariance.as_ref(), loss.lambda)?;
        Ok(LossTensors {
            invariance,
            equivariance,
            total,
        })
    }

    fn values(t: &LossTensors) -> Result<LossValues> {
        Ok(LossValues {
            invariance: scalar(&t.invariance)?,
            equivariance: t.equivariance.as_ref().map(scalar).transpose()?,
            total: scalar(&t.total)?,
        })
    }

    fn micro_batches(&self, batch: &[Image]) -> Result<usize> {
        let acc = self.config.accumulation_steps;
        if batch.len() % acc != 0 || batch.len() / acc < 2 {
            return Err(Error::Precondition(format!(
                "batch of {} images cannot be split into {acc} micro-batches of at least 2",
                batch.len()
            )));
        }
        Ok(batch.len() / acc)
    }

    /// Loss of `batch` with the augmentations of step `step`, without
    /// touching parameters (batch-norm running statistics still update).
    pub fn evaluate(&self, batch: &[Image], step: u64) -> Result<LossValues> {
        let mb = self.micro_batches(batch)?;
        let mut sum = LossValues {
            invariance: 0.0,
            equivariance: self.model.has_equimod().then_some(0.0),
            total: 0.0,
        };
        for (m, chunk) in batch.chunks(mb).enumerate() {
            let views = generate_views(chunk, &self.policies, &self.layout, self.seed, step, m * mb)?;
            let v = Self::values(&self.forward(&views)?)?;
            sum.invariance += v.invariance;
            sum.equivariance = sum.equivariance.zip(v.equivariance).map(|(a, b)| a + b);
            sum.total += v.total;
        }
        let k = self.config.accumulation_steps as f64;
        Ok(LossValues {
            invariance: sum.invariance / k,
            equivariance: sum.equivariance.map(|e| e / k),
            total: sum.total / k,
        })
    }

    /// Per-parameter gradients of the total loss averaged over micro-batches.
    pub fn gradients(&self, batch: &[Image], step: u64) -> Result<(LossValues, HashMap<String, Tensor>)> {
        let mb = self.micro_batches(batch)?;
        let acc = self.config.accumulation_steps;
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        let mut sum = LossValues {
            invariance: 0.0,
            equivariance: self.model.has_equimod().then_some(0.0),
            total: 0.0,
        };
        for (m, chunk) in batch.chunks(mb).enumerate() {
            let views = generate_views(chunk, &self.policies, &self.layout, self.seed, step, m * mb)?;
            let losses = self.forward(&views)?;
            let v = Self::values(&losses)?;
            if !v.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "total loss {} at step {step} (invariance {}, equivariance {:?})",
                    v.total, v.invariance, v.equivariance
                )));
            }
            let objective = if acc > 1 { (losses.total / acc as f64)? } else { losses.total };
            let store = objective.backward()?;
            for p in self.model.store().params() {
                if let Some(g) = store.get(p.var.as_tensor()) {
                    let g = g.detach();
                    let g = match grads.remove(&p.name) {
                        Some(prev) => (prev + g)?,
                        None => g,
                    };
                    grads.insert(p.name.clone(), g);
                }
            }
            sum.invariance += v.invariance / acc as f64;
            sum.equivariance = sum.equivariance.zip(v.equivariance).map(|(a, b)| a + b / acc as f64);
            sum.total += v.total / acc as f64;
        }
        Ok((sum, grads))
    }

    /// Runs one optimizer step on a batch of `N` source images. On a
    /// non-finite loss or gradient nothing is updated.
    pub fn step(&mut self, batch: &[Image]) -> Result<StepOutcome> {
        let start = Instant::now();
        let lr = self.current_lr()?;
        let (losses, grads) = self.gradients(batch, self.step)?;

        let mut sq: BTreeMap<ParamGroup, f64> = self.model.store().groups().into_iter().map(|g| (g, 0.0)).collect();
        for p in self.model.store().params() {
            if let Some(g) = grads.get(&p.name) {
                *sq.entry(p.group).or_default() += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        if let Some((g, v)) = sq.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at step {} has norm² {v}", g.as_str(), self.step)));
        }

        self.lars.step(self.model.store().params(), &grads, lr)?;
        if let Some(target) = &self.target {
            let tau = byol_momentum(self.step, self.schedule.total, self.config.loss.tau_base);
            ema_update(target.store(), self.model.store(), tau)?;
        }
        let outcome = StepOutcome {
            step: self.step,
            lr,
            losses,
            grad_norms: sq.into_iter().map(|(g, v)| (g, v.sqrt())).collect(),
            images_per_second: batch.len() as f64 / start.elapsed().as_secs_f64().max(1e-9),
        };
        self.step += 1;
        Ok(outcome)
    }

    /// Parameters, buffers, optimizer state and target network in one archive.
    pub fn checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut tensors = HashMap::new();
        for (name, t) in self.model.store().named_tensors() {
            tensors.insert(format!("online.{name}"), t);
        }
        if let Some(target) = &self.target {
            for (name, t) in target.store().named_tensors() {
                tensors.insert(format!("target.{name}"), t);
            }
        }
        for (name, t) in self.lars.velocity() {
            tensors.insert(format!("lars.{name}"), t.clone());
        }
        metadata.insert("step".into(), self.step.to_string());
        metadata.insert("layout".into(), self.layout.to_toml()?);
        metadata.insert(
            "trainer".into(),
            toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let layout = LayoutDescriptor::from_toml(checkpoint.meta("layout")?)?;
        if layout != self.layout {
            return Err(Error::Checkpoint("checkpoint layout differs from the trainer's".into()));
        }
        let online: HashMap<String, Tensor> = checkpoint.section("online.").into_iter().collect();
        self.model.store().load(&online, "")?;
        if let Some(target) = &self.target {
            let t: HashMap<String, Tensor> = checkpoint.section("target.").into_iter().collect();
            target.store().load(&t, "")?;
        }
        let dtype = self.model.store().dtype();
        let velocity = checkpoint
            .section("lars.")
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        self.lars.set_velocity(velocity);
        self.step = checkpoint.meta_u64("step")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_landmarks() {
        let dev = Device::Cpu;
        let t = Tensor::new(&[2.0f64], &dev).unwrap();
        let o = Tensor::new(&[4.0f64], &dev).unwrap();
        let at = |tau| ema_tensor(&t, &o, tau).unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!(at(1.0), 2.0);
        assert_eq!(at(0.0), 4.0);
        assert_eq!(at(0.5), 3.0);
    }
}
