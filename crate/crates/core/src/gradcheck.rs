//! Finite-difference verification suites for every differentiable piece,
//! from single tape operations up to the full network with all losses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    bce_attributes, center_loss, pmi_loss, pmi_mine, total_loss, wrt_loss, xent_label_smooth, LossComponents,
    LossWeights, TripletIndex,
};
use crate::model::{clip_pool, Asre, AsaNet, Branches, BranchFeatures, Fusion, FusionHead, ModelConfig};
use crate::nn::{BatchNorm, Bindings, Conv1x1, Linear, Mode, ParamRegistry, ResidualBlock};
use crate::synth::{make_batch, gen_dataset, GenConfig};
use crate::tensor::{grad_check, ReduceKind, Tape, Tensor, Var};
use crate::train::losses_with_triplets;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Blocks,
    Asre,
    Losses,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Ops, Scope::Blocks, Scope::Asre, Scope::Losses, Scope::Full];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub scope: Scope,
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
}

impl CheckItem {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub items: Vec<CheckItem>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.items.iter().all(CheckItem::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.items.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Options {
    /// Random instances per item.
    pub seeds: usize,
    /// Add an operation whose backward rule is deliberately wrong.
    pub inject_fault: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seeds: 3,
            inject_fault: false,
        }
    }
}

pub fn run(scope: Scope, opts: &Options) -> Result<Report> {
    let items = match scope {
        Scope::Ops => ops(opts)?,
        Scope::Blocks => blocks(opts)?,
        Scope::Asre => asre(opts)?,
        Scope::Losses => losses(opts)?,
        Scope::Full => vec![full()?],
    };
    Ok(Report { items })
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Reduce any output to a scalar by a fixed random projection.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

type Build = dyn Fn(&mut Tape, &[Var], u64) -> Result<Var>;

struct Case<'a> {
    name: &'a str,
    /// Per-input shape and sampling range.
    inputs: Vec<(Vec<usize>, f64, f64)>,
    build: &'a Build,
}

fn run_case(scope: Scope, case: &Case, seeds: usize) -> Result<CheckItem> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let params: Vec<Tensor> = case.inputs.iter().map(|(s, lo, hi)| uniform(&mut rng, s, *lo, *hi)).collect();
        let err = grad_check(&params, EPS, |t, v| {
            let y = (case.build)(t, v, seed)?;
            if t.shape(y).is_empty() {
                Ok(y)
            } else {
                project(t, y, seed)
            }
        })?;
        worst = worst.max(err);
    }
    Ok(CheckItem {
        scope,
        name: case.name.into(),
        seeds,
        max_rel_err: worst,
    })
}

fn shape(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

fn sym(s: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape(s), -1.0, 1.0)
}

fn positive(s: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape(s), 0.5, 2.0)
}

fn square(x: f64) -> f64 {
    x * x
}

/// The deliberately broken derivative used by the fault fixture.
fn wrong_square_grad(x: f64) -> f64 {
    x
}

fn ops(opts: &Options) -> Result<Vec<CheckItem>> {
    let mut cases: Vec<Case> = vec![
        Case {
            name: "add (broadcast)",
            inputs: vec![sym(&[3, 4]), sym(&[4])],
            build: &|t, v, _| t.add(v[0], v[1]),
        },
        Case {
            name: "sub (broadcast)",
            inputs: vec![sym(&[2, 1, 3]), sym(&[4, 1])],
            build: &|t, v, _| t.sub(v[0], v[1]),
        },
        Case {
            name: "mul (broadcast)",
            inputs: vec![sym(&[2, 3, 2]), sym(&[3, 1])],
            build: &|t, v, _| t.mul(v[0], v[1]),
        },
        Case {
            name: "div",
            inputs: vec![sym(&[3, 3]), positive(&[3, 1])],
            build: &|t, v, _| t.div(v[0], v[1]),
        },
        Case {
            name: "relu",
            inputs: vec![sym(&[5, 4])],
            build: &|t, v, _| Ok(t.relu(v[0])),
        },
        Case {
            name: "sigmoid",
            inputs: vec![sym(&[5, 4])],
            build: &|t, v, _| Ok(t.sigmoid(v[0])),
        },
        Case {
            name: "exp",
            inputs: vec![sym(&[5])],
            build: &|t, v, _| Ok(t.exp(v[0])),
        },
        Case {
            name: "log",
            inputs: vec![positive(&[5])],
            build: &|t, v, _| t.log(v[0]),
        },
        Case {
            name: "sqrt",
            inputs: vec![positive(&[5])],
            build: &|t, v, _| t.sqrt(v[0]),
        },
        Case {
            name: "softplus",
            inputs: vec![sym(&[6])],
            build: &|t, v, _| Ok(t.softplus(v[0])),
        },
        Case {
            name: "matmul",
            inputs: vec![sym(&[3, 4]), sym(&[4, 5])],
            build: &|t, v, _| t.matmul(v[0], v[1]),
        },
        Case {
            name: "matmul (transposed operands)",
            inputs: vec![sym(&[4, 3]), sym(&[5, 4])],
            build: &|t, v, _| t.matmul_t(v[0], v[1], true, true),
        },
        Case {
            name: "matmul (batched)",
            inputs: vec![sym(&[2, 3, 4]), sym(&[2, 5, 4])],
            build: &|t, v, _| t.matmul_t(v[0], v[1], false, true),
        },
        Case {
            name: "softmax rows",
            inputs: vec![(shape(&[2, 3, 5]), -2.0, 2.0)],
            build: &|t, v, _| t.softmax_rows(v[0]),
        },
        Case {
            name: "log-softmax rows",
            inputs: vec![(shape(&[4, 5]), -2.0, 2.0)],
            build: &|t, v, _| t.log_softmax_rows(v[0]),
        },
        Case {
            name: "reduce sum",
            inputs: vec![sym(&[2, 3, 4])],
            build: &|t, v, _| t.reduce(ReduceKind::Sum, v[0], &[1, 2]),
        },
        Case {
            name: "reduce mean",
            inputs: vec![sym(&[2, 3, 4])],
            build: &|t, v, _| t.reduce(ReduceKind::Mean, v[0], &[0, 2]),
        },
        Case {
            name: "reduce max",
            inputs: vec![sym(&[3, 6])],
            build: &|t, v, _| t.reduce(ReduceKind::Max, v[0], &[1]),
        },
        Case {
            name: "reshape",
            inputs: vec![sym(&[2, 6])],
            build: &|t, v, _| t.reshape(v[0], &[3, 4]),
        },
        Case {
            name: "concat",
            inputs: vec![sym(&[2, 3]), sym(&[2, 2])],
            build: &|t, v, _| t.concat(&[v[0], v[1]], 1),
        },
        Case {
            name: "index select",
            inputs: vec![sym(&[4, 3])],
            build: &|t, v, _| t.index_select(v[0], &[2, 0, 2, 3]),
        },
        Case {
            name: "conv 1x1",
            inputs: vec![sym(&[2, 3, 2, 3]), sym(&[4, 3]), sym(&[4])],
            build: &|t, v, _| t.conv1x1(v[0], v[1], Some(v[2])),
        },
        Case {
            name: "conv 3x3",
            inputs: vec![sym(&[2, 2, 4, 3]), sym(&[3, 2, 3, 3]), sym(&[3])],
            build: &|t, v, _| t.conv3x3(v[0], v[1], Some(v[2]), 1),
        },
        Case {
            name: "conv 3x3 stride 2",
            inputs: vec![sym(&[1, 2, 5, 4]), sym(&[2, 2, 3, 3]), sym(&[2])],
            build: &|t, v, _| t.conv3x3(v[0], v[1], Some(v[2]), 2),
        },
        Case {
            name: "average pool 2x2",
            inputs: vec![sym(&[2, 2, 4, 6])],
            build: &|t, v, _| t.avg_pool2(v[0]),
        },
        Case {
            name: "batch norm (batch statistics)",
            inputs: vec![sym(&[3, 2, 2, 2]), positive(&[2]), sym(&[2])],
            build: &|t, v, _| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0),
        },
        Case {
            name: "batch norm (running statistics)",
            inputs: vec![sym(&[3, 2]), positive(&[2]), sym(&[2])],
            build: &|t, v, _| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&[0.1, -0.2], &[0.5, 2.0])))?.0),
        },
    ];
    if opts.inject_fault {
        cases.push(Case {
            name: "square with a faulty backward rule",
            inputs: vec![sym(&[4])],
            build: &|t, v, _| Ok(t.custom_unary(v[0], square, wrong_square_grad)),
        });
    }
    cases.iter().map(|c| run_case(Scope::Ops, c, opts.seeds)).collect()
}

/// Check a layer built on its own registry: every registered parameter and
/// the layer input are perturbed.
fn layer_case<L, F>(name: &str, seeds: usize, input: &[usize], make: impl Fn(&mut ParamRegistry, &mut ChaCha8Rng) -> L, fwd: F) -> Result<CheckItem>
where
    F: Fn(&mut L, &mut Tape, &Bindings, Var) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 104_729 + 3);
        let mut reg = ParamRegistry::new();
        let mut layer = make(&mut reg, &mut rng);
        let mut params: Vec<Tensor> = vec![uniform(&mut rng, input, -1.0, 1.0)];
        params.extend(reg.iter().map(|p| perturb(&p.value, &mut rng)));
        let err = grad_check(&params, EPS, |t, v| {
            let b = Bindings::from_vars(v[1..].to_vec());
            let y = fwd(&mut layer, t, &b, v[0])?;
            project(t, y, seed)
        })?;
        worst = worst.max(err);
    }
    Ok(CheckItem {
        scope: Scope::Blocks,
        name: name.into(),
        seeds,
        max_rel_err: worst,
    })
}

/// Move zero-initialized values (biases, BN shifts) off zero so every term
/// of the backward rule is exercised.
fn perturb(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = t.data().iter().map(|&v| v + rng.random_range(-0.3..0.3)).collect();
    Tensor::new(t.shape(), data).expect("shape")
}

fn blocks(opts: &Options) -> Result<Vec<CheckItem>> {
    let s = opts.seeds;
    let mut items = vec![
        layer_case(
            "conv 1x1 layer",
            s,
            &[2, 3, 2, 2],
            |r, g| Conv1x1::new(r, "c", 3, 4, g).unwrap(),
            |l, t, b, x| l.forward(t, b, x),
        )?,
        layer_case(
            "fully connected layer",
            s,
            &[3, 5],
            |r, g| Linear::new(r, "fc", 5, 2, true, g).unwrap(),
            |l, t, b, x| l.forward(t, b, x),
        )?,
        layer_case(
            "batch norm layer",
            s,
            &[4, 3, 2, 1],
            |r, _| BatchNorm::new(r, "bn", 3).unwrap(),
            |l, t, b, x| l.forward(t, b, x),
        )?,
        layer_case(
            "residual block",
            s,
            &[2, 4, 2, 2],
            |r, g| ResidualBlock::new(r, "res", 4, 4, g).unwrap(),
            |l, t, b, x| l.forward(t, b, x),
        )?,
        layer_case(
            "residual block with projection",
            s,
            &[2, 4, 2, 2],
            |r, g| ResidualBlock::new(r, "res", 4, 6, g).unwrap(),
            |l, t, b, x| l.forward(t, b, x),
        )?,
        layer_case(
            "spatio-temporal pooling",
            s,
            &[6, 3, 2, 2],
            |_, _| (),
            |_, t, _, x| clip_pool(t, x, 2),
        )?,
    ];
    for fusion in [Fusion::A, Fusion::B] {
        let cfg = ModelConfig {
            channels: 8,
            fusion,
            branches: Branches::ALL,
            ..ModelConfig::default()
        };
        items.push(layer_case(
            match fusion {
                Fusion::A => "fusion (a)",
                Fusion::B => "fusion (b)",
            },
            s,
            &[5, 3, 2],
            |r, g| FusionHead::new(r, &cfg, g).unwrap(),
            |l, t, b, x| {
                // five [3×2] features packed along the first axis
                let parts: Vec<Var> = (0..5)
                    .map(|i| {
                        let sel = t.index_select(x, &[i])?;
                        t.reshape(sel, &[3, 2])
                    })
                    .collect::<Result<_>>()?;
                let f = BranchFeatures {
                    f_re_attr: parts[0],
                    f_re_id: parts[1],
                    f_id: parts[2],
                    f_ir_id: parts[3],
                    f_ir_attr: parts[4],
                };
                l.forward(t, b, &f)
            },
        )?);
    }
    Ok(items)
}

fn asre(opts: &Options) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    for (name, out) in [("enhanced identity map", 0), ("saliency mask", 1), ("attention", 2)] {
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 11);
            let mut reg = ParamRegistry::new();
            let mut m = Asre::new(&mut reg, "asre", 4, 2, 0.7, &mut rng)?;
            let mut params = vec![
                uniform(&mut rng, &[2, 4, 2, 3], -1.0, 1.0),
                uniform(&mut rng, &[2, 2, 2, 3], -1.0, 1.0),
            ];
            params.extend(reg.iter().map(|p| perturb(&p.value, &mut rng)));
            let err = grad_check(&params, EPS, |t, v| {
                let b = Bindings::from_vars(v[2..].to_vec());
                let o = m.forward(t, &b, v[0], v[1])?;
                let y = [o.out, o.mask, o.attention][out];
                project(t, y, seed)
            })?;
            worst = worst.max(err);
        }
        items.push(CheckItem {
            scope: Scope::Asre,
            name: format!("asre {name}"),
            seeds: opts.seeds,
            max_rel_err: worst,
        });
    }
    Ok(items)
}

fn losses(opts: &Options) -> Result<Vec<CheckItem>> {
    let cases: Vec<Case> = vec![
        Case {
            name: "weighted regularization triplet",
            inputs: vec![sym(&[8, 4])],
            build: &|t, v, _| Ok(wrt_loss(t, v[0], &[0, 0, 0, 1, 1, 1, 2, 2])?.loss),
        },
        Case {
            name: "center loss",
            inputs: vec![sym(&[8, 4]), sym(&[3, 4])],
            build: &|t, v, _| center_loss(t, v[0], &[0, 0, 0, 1, 1, 1, 2, 2], v[1]),
        },
        Case {
            name: "label-smoothed cross-entropy",
            inputs: vec![(shape(&[8, 3]), -2.0, 2.0)],
            build: &|t, v, _| xent_label_smooth(t, v[0], &[0, 0, 0, 1, 1, 1, 2, 2], 0.1),
        },
        Case {
            name: "attribute binary cross-entropy",
            inputs: vec![(shape(&[8, 5]), -2.0, 2.0)],
            build: &|t, v, seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
                let y = Tensor::new(&[8, 5], (0..40).map(|_| rng.random_range(0..2) as f64).collect())?;
                let p = t.sigmoid(v[0]);
                Ok(bce_attributes(t, p, &y)?.loss)
            },
        },
        Case {
            name: "pmi triplet",
            inputs: vec![sym(&[8, 4])],
            build: &|t, v, _| {
                // mining is detached: indices come from a fixed random embedding
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let attr = uniform(&mut rng, &[8, 3], -1.0, 1.0);
                let trip = pmi_mine(&attr, &[0, 0, 0, 1, 1, 1, 2, 2]);
                pmi_loss(t, &trip, v[0])
            },
        },
        Case {
            name: "total loss",
            inputs: vec![sym(&[8, 4]), sym(&[3, 4]), (shape(&[8, 3]), -2.0, 2.0)],
            build: &|t, v, _| {
                let labels = [0, 0, 0, 1, 1, 1, 2, 2];
                let c = LossComponents {
                    xent: xent_label_smooth(t, v[2], &labels, 0.1)?,
                    wrt: wrt_loss(t, v[0], &labels)?.loss,
                    cent: center_loss(t, v[0], &labels, v[1])?,
                    bce: {
                        let p = t.sigmoid(v[2]);
                        bce_attributes(t, p, &Tensor::zeros(&[8, 3]))?.loss
                    },
                    pmi: pmi_loss(t, &fixed_triplets(), v[0])?,
                };
                let w = LossWeights::default();
                Ok(total_loss(t, &c, &w, 0.3, 0.7)?.0)
            },
        },
    ];
    cases.iter().map(|c| run_case(Scope::Losses, c, opts.seeds)).collect()
}

fn fixed_triplets() -> Vec<TripletIndex> {
    vec![
        TripletIndex {
            anchor: 0,
            positive: 1,
            negative: 2,
        },
        TripletIndex {
            anchor: 4,
            positive: 3,
            negative: 5,
        },
    ]
}

/// Configuration of the full-network micro check: C = 8, two identities with
/// three clips each, two frames per clip.
pub fn micro_config() -> (ModelConfig, GenConfig) {
    let model = ModelConfig {
        frame_height: 16,
        frame_width: 8,
        channels: 8,
        num_identities: 2,
        ..ModelConfig::default()
    };
    let data = GenConfig {
        seed: 3,
        num_identities: 2,
        tracklets_per_identity: 3,
        frame_height: 16,
        frame_width: 8,
        min_length: 2,
        max_length: 4,
        unmatched_identities: 0,
        distractors: 0,
        ..GenConfig::default()
    };
    (model, data)
}

/// All five losses of the full network on a micro-batch, differentiated with
/// respect to every parameter (centers included).
pub fn full() -> Result<CheckItem> {
    let (mcfg, dcfg) = micro_config();
    let ds = gen_dataset(&dcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = make_batch(&ds, &[0, 1, 2, 3, 4, 5], 2, &mut rng)?;
    let mut net = AsaNet::new(mcfg, 17)?;
    net.set_mode(Mode::Train);
    let mut prng = ChaCha8Rng::seed_from_u64(2);
    let params: Vec<Tensor> = net.params.iter().map(|p| perturb(&p.value, &mut prng)).collect();
    for (p, v) in net.params.iter_mut().zip(&params) {
        p.value = v.clone();
    }
    let centers = net.centers();
    let w = LossWeights::default();
    let triplets = {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &batch.frames)?;
        pmi_mine(tape.value(out.features.f_ir_attr), &batch.labels)
    };
    let err = grad_check(&params, EPS, |t, v| {
        let out = net.forward_with(t, Bindings::from_vars(v.to_vec()), &batch.frames)?;
        let c = losses_with_triplets(t, &out, &batch, &w, centers, &triplets)?;
        Ok(total_loss(t, &c, &w, w.lambda_bce, w.lambda_pmi_high)?.0)
    })?;
    Ok(CheckItem {
        scope: Scope::Full,
        name: "network with all losses".into(),
        seeds: 1,
        max_rel_err: err,
    })
}
