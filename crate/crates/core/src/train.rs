//! Optimization: Adam for the network, plain SGD for the identity centers,
//! step-decay learning rate, the PMI weight switch and the epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::{
    bce_attributes, center_loss, pmi_loss, pmi_mine, total_loss, wrt_loss, xent_label_smooth, LossComponents,
    LossValues, LossWeights, PmiSchedule,
};
use crate::model::{AsaNet, ModelConfig};
use crate::nn::{Mode, ParamGroup, ParamRegistry};
use crate::synth::{make_batch, Dataset, PkSampler, TrackletBatch};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub center_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            // ten times the long-schedule rate; the desk schedule is 60 epochs, not 700
            lr: 3e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            center_lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_epochs: 60,
            decay_epochs: vec![20, 40],
            decay_factor: 0.1,
        }
    }
}

impl Schedule {
    /// The long schedule: 700 epochs, decays at 100, 250 and 350.
    pub fn full() -> Self {
        Self {
            total_epochs: 700,
            decay_epochs: vec![100, 250, 350],
            decay_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("decay epochs must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return Err(config_err!("decay epochs must precede the last epoch"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(config_err!("decay factor {} outside (0, 1]", self.decay_factor));
        }
        Ok(())
    }
}

/// `base · factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, schedule: &Schedule, base_lr: f64) -> f64 {
    let n = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    let mut lr = base_lr;
    for _ in 0..n {
        lr *= schedule.decay_factor;
    }
    lr
}

/// Adam moment buffers, one pair per registry entry (empty for centers).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamRegistry) -> Self {
        let zeros = |p: &crate::nn::Param| match p.group {
            ParamGroup::Network => vec![0.0; p.value.len()],
            ParamGroup::Centers => Vec::new(),
        };
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// Apply one update from the accumulated gradients, then clear them.
///
/// Network parameters take an Adam step on `g + wd·θ` (decay only where the
/// parameter allows it); centers move by `−center_lr · g`. Nothing is
/// modified if any gradient is non-finite.
pub fn step(params: &mut ParamRegistry, state: &mut OptimState, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    if state.m.len() != params.len() {
        return Err(config_err!("optimizer state does not match the parameter registry"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        match p.group {
            ParamGroup::Centers => {
                for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *w -= cfg.center_lr * g;
                }
            }
            ParamGroup::Network => {
                let wd = if p.decay { cfg.weight_decay } else { 0.0 };
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                let grad = p.grad.data();
                for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[j] + wd * *w;
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    *w -= lr * mh / (libm::sqrt(vh) + cfg.eps);
                }
            }
        }
    }
    params.zero_grads();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
    pub frames: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 8, k: 4, frames: 6 }
    }
}

/// Loss switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSwitches {
    pub use_pmi: bool,
    pub use_bce: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            use_pmi: true,
            use_bce: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub switches: LossSwitches,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            switches: LossSwitches::default(),
            optim: OptimConfig::default(),
            schedule: Schedule::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.sampler.p < 2 || self.sampler.k < 2 || self.sampler.frames == 0 {
            return Err(config_err!("sampler needs P ≥ 2, K ≥ 2 and at least one frame"));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: LossValues,
    pub triplets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_bce: f64,
    pub lambda_pmi: f64,
}

/// Model plus everything needed to continue training deterministically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AsaNet,
    pub optim: OptimState,
    pub pmi: PmiSchedule,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = AsaNet::new(config.model.clone(), config.seed)?;
        let optim = OptimState::new(&model.params);
        Ok(Self {
            config,
            model,
            optim,
            pmi: PmiSchedule::default(),
            epoch: 0,
        })
    }

    pub fn lambda_pmi(&self) -> f64 {
        if self.config.switches.use_pmi {
            self.pmi.lambda(&self.config.loss)
        } else {
            0.0
        }
    }

    pub fn lambda_bce(&self) -> f64 {
        if self.config.switches.use_bce {
            self.config.loss.lambda_bce
        } else {
            0.0
        }
    }

    /// Sampling RNG of an epoch: a function of the seed and epoch number only,
    /// so a run resumed at an epoch boundary replays the same batches.
    pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Forward, losses, backward and update on one batch.
    pub fn train_step(&mut self, batch: &TrackletBatch, lr: f64) -> Result<(LossValues, usize)> {
        let m = self.config.model.num_identities;
        if let Some(y) = batch.labels.iter().find(|&&y| y >= m) {
            return Err(Error::Label(format!("training label {y} outside {m} identities")));
        }
        self.model.set_mode(Mode::Train);
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &batch.frames)?;
        let comps = losses_for(&mut tape, &out, batch, &self.config.loss, self.model.centers())?;
        let (total, values) = total_loss(&mut tape, &comps.0, &self.config.loss, self.lambda_bce(), self.lambda_pmi())?;
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.optim.step)));
        }
        tape.backward(total)?;
        self.model.params.collect_grads(&tape, &out.bindings);
        step(&mut self.model.params, &mut self.optim, &self.config.optim, lr)?;
        Ok((values, comps.1))
    }

    /// Run the next epoch over the training split of `ds`.
    pub fn run_epoch(&mut self, ds: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.config.schedule, self.config.optim.lr);
        let mut rng = Self::epoch_rng(self.config.seed, epoch);
        let s = self.config.sampler;
        let batches = PkSampler { p: s.p, k: s.k }.epoch(&ds.train_groups(), &mut rng)?;
        let lambda_pmi = self.lambda_pmi();
        let (mut sum_total, mut sum_bce) = (0.0, 0.0);
        for idx in &batches {
            let batch = make_batch(ds, idx, s.frames, &mut rng)?;
            let (losses, triplets) = self.train_step(&batch, lr)?;
            sum_total += losses.total;
            sum_bce += losses.bce;
            on_step(&StepRecord {
                epoch,
                step: self.optim.step,
                lr,
                losses,
                triplets,
            });
        }
        let n = batches.len().max(1) as f64;
        let mean_bce = sum_bce / n;
        self.pmi.observe(mean_bce, &self.config.loss);
        self.epoch += 1;
        Ok(EpochSummary {
            epoch,
            steps: batches.len(),
            mean_total: sum_total / n,
            mean_bce,
            lambda_pmi,
        })
    }
}

/// The five loss terms of a forward pass, plus the number of PMI triplets.
pub fn losses_for(
    tape: &mut Tape,
    out: &crate::model::ModelOutput,
    batch: &TrackletBatch,
    w: &LossWeights,
    centers: crate::nn::ParamId,
) -> Result<(LossComponents, usize)> {
    let triplets = pmi_mine(tape.value(out.features.f_ir_attr), &batch.labels);
    losses_with_triplets(tape, out, batch, w, centers, &triplets).map(|c| (c, triplets.len()))
}

/// Like [`losses_for`] with the PMI triplets fixed by the caller.
pub fn losses_with_triplets(
    tape: &mut Tape,
    out: &crate::model::ModelOutput,
    batch: &TrackletBatch,
    w: &LossWeights,
    centers: crate::nn::ParamId,
    triplets: &[crate::losses::TripletIndex],
) -> Result<LossComponents> {
    let xent = xent_label_smooth(tape, out.logits, &batch.labels, w.smoothing_eps)?;
    let wrt = wrt_loss(tape, out.f_final, &batch.labels)?.loss;
    let cent = center_loss(tape, out.f_final, &batch.labels, out.bindings[centers])?;
    let p = tape.concat(&[out.p_re, out.p_ir], 1)?;
    let bce = bce_attributes(tape, p, &batch.y_attr())?.loss;
    let pmi = pmi_loss(tape, triplets, out.f_final)?;
    Ok(LossComponents {
        xent,
        wrt,
        cent,
        bce,
        pmi,
    })
}

/// Scalar-parameter Adam helper for hand checks: the value after `grads.len()` steps.
pub fn adam_scalar(theta: f64, grads: &[f64], cfg: &OptimConfig, lr: f64) -> f64 {
    let mut reg = ParamRegistry::new();
    let id = reg
        .register("theta", Tensor::vector(vec![theta]), ParamGroup::Network, false)
        .expect("fresh registry");
    let mut st = OptimState::new(&reg);
    for &g in grads {
        reg.get_mut(id).grad = Tensor::vector(vec![g]);
        step(&mut reg, &mut st, cfg, lr).expect("finite gradient");
    }
    reg.get(id).value.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let s = Schedule::full();
        assert_eq!(lr_at(0, &s, 3e-4), 3e-4);
        assert!((lr_at(100, &s, 3e-4) - 3e-5).abs() < 1e-18);
        assert!((lr_at(99, &s, 3e-4) - 3e-4).abs() < 1e-18);
        assert!((lr_at(400, &s, 3e-4) - 3e-7).abs() < 1e-20);
        assert!(Schedule {
            total_epochs: 10,
            decay_epochs: vec![5, 5],
            decay_factor: 0.1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_grad_only_decays() {
        let mut reg = ParamRegistry::new();
        let a = reg.register("a", Tensor::vector(vec![2.0]), ParamGroup::Network, true).unwrap();
        let b = reg.register("b", Tensor::vector(vec![2.0]), ParamGroup::Network, false).unwrap();
        let c = reg.register("c", Tensor::vector(vec![2.0]), ParamGroup::Centers, false).unwrap();
        let mut st = OptimState::new(&reg);
        step(&mut reg, &mut st, &OptimConfig::default(), 1e-3).unwrap();
        assert!(reg.get(a).value.item() < 2.0);
        assert_eq!(reg.get(b).value.item(), 2.0);
        assert_eq!(reg.get(c).value.item(), 2.0);
    }

    #[test]
    fn centers_take_plain_sgd() {
        let mut reg = ParamRegistry::new();
        let c = reg.register("c", Tensor::vector(vec![1.0, -1.0]), ParamGroup::Centers, false).unwrap();
        reg.get_mut(c).grad = Tensor::vector(vec![0.2, 0.4]);
        let mut st = OptimState::new(&reg);
        step(&mut reg, &mut st, &OptimConfig::default(), 1e-3).unwrap();
        assert_eq!(reg.get(c).value.data(), &[1.0 - 0.5 * 0.2, -1.0 - 0.5 * 0.4]);
        assert_eq!(reg.get(c).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut reg = ParamRegistry::new();
        let c = reg.register("layer.w", Tensor::vector(vec![1.0]), ParamGroup::Network, true).unwrap();
        reg.get_mut(c).grad = Tensor::vector(vec![f64::NAN]);
        let mut st = OptimState::new(&reg);
        match step(&mut reg, &mut st, &OptimConfig::default(), 1e-3) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layer.w")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(reg.get(c).value.item(), 1.0);
    }
}
