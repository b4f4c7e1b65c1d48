//! Network building blocks: parameter registry, batch normalization with
//! running statistics, 1×1 and 3×3 convolutions, fully connected layers,
//! residual blocks and spatial/temporal mean pooling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Network,
    Centers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    /// Whether L2 weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("parameter `{}` registered twice", name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            group,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Push every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Add the tape's leaf gradients into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Tape handles for a [`ParamRegistry`], indexed by [`ParamId`].
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bindings {
    /// Wrap handles that are already in registry order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Non-learnable half of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: Mode::Train,
        }
    }
}

/// Batch normalization of `x[N×C×…]` against `state`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (unbiased variance); eval mode only reads them.
pub fn batchnorm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState) -> Result<Var> {
    match state.mode {
        Mode::Eval => {
            let (y, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                state.eps,
                Some((&state.running_mean, &state.running_var)),
            )?;
            Ok(y)
        }
        Mode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, state.eps, None)?;
            let stats = stats.expect("train mode returns statistics");
            let m = state.momentum;
            let unbias = stats.count as f64 / (stats.count.max(2) - 1) as f64;
            for c in 0..stats.mean.len() {
                state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * stats.mean[c];
                state.running_var[c] = (1.0 - m) * state.running_var[c] + m * stats.var[c] * unbias;
            }
            Ok(y)
        }
    }
}

/// Fan-in scaled uniform initializer, `U(−√(3/fan_in), √(3/fan_in))`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(3.0 / fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState,
}

impl BatchNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<Self> {
        let gamma = reg.register(
            format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            ParamGroup::Network,
            false,
        )?;
        let beta = reg.register(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamGroup::Network,
            false,
        )?;
        Ok(Self {
            name: name.into(),
            gamma,
            beta,
            state: BatchNormState::new(channels),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        batchnorm(tape, x, b[self.gamma], b[self.beta], &mut self.state)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1 {
    pub fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = reg.register(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin], cin),
            ParamGroup::Network,
            true,
        )?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Network, true)?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        conv1x1(tape, x, b[self.weight], Some(b[self.bias]))
    }
}

/// Per-pixel linear map across channels, `X[N×C_in×H×W] → [N×C_out×H×W]`.
pub fn conv1x1(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    tape.conv1x1(x, w, b)
}

#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = reg.register(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin, 3, 3], cin * 9),
            ParamGroup::Network,
            true,
        )?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Network, true)?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        tape.conv3x3(x, b[self.weight], Some(b[self.bias]), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = reg.register(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[dout, din], din),
            ParamGroup::Network,
            true,
        )?;
        let bias = if bias {
            Some(reg.register(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamGroup::Network, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            din,
            dout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        fc(tape, x, b[self.weight], self.bias.map(|id| b[id]))
    }
}

/// Affine map `x[N×d_in] · Wᵀ + b` with `W[d_out×d_in]`.
pub fn fc(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (sx, sw) = (tape.shape(x), tape.shape(w));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
        return Err(shape_err!("fc input {:?} with weight {:?}", sx, sw));
    }
    let y = tape.matmul_t(x, w, false, true)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// `ReLU(main(X) + skip(X))`, main = conv→BN→ReLU→conv→BN with 1×1 convs;
/// the skip path is a 1×1 projection when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv1x1,
    pub bn1: BatchNorm,
    pub conv2: Conv1x1,
    pub bn2: BatchNorm,
    pub proj: Option<Conv1x1>,
}

impl ResidualBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv1x1::new(reg, &format!("{name}.conv1"), cin, cout, rng)?,
            bn1: BatchNorm::new(reg, &format!("{name}.bn1"), cout)?,
            conv2: Conv1x1::new(reg, &format!("{name}.conv2"), cout, cout, rng)?,
            bn2: BatchNorm::new(reg, &format!("{name}.bn2"), cout)?,
            proj: if cin != cout {
                Some(Conv1x1::new(reg, &format!("{name}.proj"), cin, cout, rng)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let h = self.bn1.forward(tape, b, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, b, h)?;
        let h = self.bn2.forward(tape, b, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, b, x)?,
            None => x,
        };
        let s = tape.add(h, skip)?;
        Ok(tape.relu(s))
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    pub fn batch_norms(&self) -> [&BatchNorm; 2] {
        [&self.bn1, &self.bn2]
    }
}

/// Mean over the two trailing spatial axes: `[N×C×H×W] → [N×C]`.
pub fn spatial_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(shape_err!("spatial_pool expects non-empty N×C×H×W, got {:?}", s));
    }
    tape.reduce(ReduceKind::Mean, x, &[2, 3])
}

/// Mean over the time axis: `[T×C] → [C]` or `[B×T×C] → [B×C]`.
pub fn temporal_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if !(2..=3).contains(&s.len()) || s[s.len() - 2] == 0 {
        return Err(shape_err!("temporal_pool expects non-empty [B×]T×C, got {:?}", s));
    }
    let axis = s.len() - 2;
    tape.reduce(ReduceKind::Mean, x, &[axis])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv1x1_identity_and_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let w = t.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let b = t.constant(Tensor::vector(vec![0.0]));
        let y = conv1x1(&mut t, x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[7.0]);

        let eye = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = conv1x1(&mut t, x, eye, None).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(conv1x1(&mut t, x, w, None), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn fc_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let w = t.constant(Tensor::from_rows(&[&[2.0, 3.0]]));
        let b = t.constant(Tensor::vector(vec![1.0]));
        let y = fc(&mut t, x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
        let bad = t.constant(Tensor::zeros(&[1, 3]));
        assert!(fc(&mut t, x, bad, None).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_identity() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 1.3).sin() * 4.0 + 2.0).collect();
        let x = t.constant(Tensor::new(&[2, 3, 2, 2], data.clone()).unwrap());
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let mut st = BatchNormState::new(3);
        let y = batchnorm(&mut t, x, g, b, &mut st).unwrap();
        let yv = t.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| yv.data()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-7);
            assert!((var - 1.0).abs() <= 1e-3);
        }
        assert!(st.running_var.iter().all(|&v| v > 0.0));
        assert_ne!(st.running_mean, vec![0.0; 3]);

        let mut ev = BatchNormState::new(3);
        ev.mode = Mode::Eval;
        let y = batchnorm(&mut t, x, g, b, &mut ev).unwrap();
        for (a, b) in t.value(y).data().iter().zip(&data) {
            assert!((a - b / libm::sqrt(1.0 + BN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_single_sample_train_is_degenerate() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            batchnorm(&mut t, x, g, b, &mut st),
            Err(crate::Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn residual_zero_main_path_is_relu_of_input() {
        let mut reg = ParamRegistry::new();
        let mut blk = ResidualBlock::new(&mut reg, "res", 4, 4, &mut rng()).unwrap();
        reg.get_mut(blk.bn2.gamma).value = Tensor::zeros(&[4]);
        let mut t = Tape::new();
        let b = reg.bind(&mut t);
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = t.constant(Tensor::new(&[2, 4, 2, 2], data.clone()).unwrap());
        let y = blk.forward(&mut t, &b, x).unwrap();
        for (a, v) in t.value(y).data().iter().zip(&data) {
            assert!((a - v.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_zero_input_zero_bias_is_zero() {
        let mut reg = ParamRegistry::new();
        let mut blk = ResidualBlock::new(&mut reg, "res", 2, 4, &mut rng()).unwrap();
        let mut t = Tape::new();
        let b = reg.bind(&mut t);
        let x = t.constant(Tensor::zeros(&[2, 2, 2, 2]));
        let y = blk.forward(&mut t, &b, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(y), &[2, 4, 2, 2]);
    }

    #[test]
    fn pooling() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 3, 4, 2], 5.0));
        let s = spatial_pool(&mut t, x).unwrap();
        assert_eq!(t.shape(s), &[2, 3]);
        assert!(t.value(s).data().iter().all(|&v| v == 5.0));
        let f = t.constant(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let p = temporal_pool(&mut t, f).unwrap();
        assert_eq!(t.value(p).data(), &[2.0]);
        let empty = t.constant(Tensor::zeros(&[0, 3]));
        assert!(temporal_pool(&mut t, empty).is_err());
    }

    #[test]
    fn registry_rejects_duplicates_and_binds_in_order() {
        let mut reg = ParamRegistry::new();
        let a = reg.register("a", Tensor::vector(vec![1.0]), ParamGroup::Network, true).unwrap();
        reg.register("c", Tensor::vector(vec![2.0, 3.0]), ParamGroup::Centers, false)
            .unwrap();
        assert!(reg.register("a", Tensor::scalar(0.0), ParamGroup::Network, true).is_err());
        let names: Vec<&str> = reg.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "c"]);
        assert_eq!(reg.num_values(), 3);
        let mut t = Tape::new();
        let b = reg.bind(&mut t);
        let l = t.sum_all(b[a]).unwrap();
        t.backward(l).unwrap();
        reg.collect_grads(&t, &b);
        assert_eq!(reg.get(a).grad.data(), &[1.0]);
    }
}
