//! Training objectives.
//!
//! Metric losses (weighted-regularization triplet, center, PMI) read the
//! pre-neck descriptor; the smoothed cross-entropy reads the classifier
//! logits; the attribute BCE reads the sigmoid outputs of both heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

/// Probabilities are clamped into `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

/// Large negative offset that removes an entry from a masked softmax.
const MASKED: f64 = -1e30;

/// An intra-identity triplet of batch indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cent: f64,
    pub lambda_bce: f64,
    pub lambda_pmi_low: f64,
    pub lambda_pmi_high: f64,
    pub bce_threshold: f64,
    pub smoothing_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cent: 1.5,
            lambda_bce: 0.0005,
            lambda_pmi_low: 0.005,
            lambda_pmi_high: 0.01,
            bce_threshold: 0.15,
            smoothing_eps: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cent,
            self.lambda_bce,
            self.lambda_pmi_low,
            self.lambda_pmi_high,
            self.bce_threshold,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(config_err!("loss weights must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(config_err!("smoothing eps {} outside [0, 1)", self.smoothing_eps));
        }
        Ok(())
    }

    /// PMI weight for a given attribute loss level.
    pub fn lambda_pmi(&self, current_bce: f64) -> f64 {
        if current_bce < self.bce_threshold {
            self.lambda_pmi_high
        } else {
            self.lambda_pmi_low
        }
    }
}

/// One-way switch of the PMI weight: raised the first time the observed
/// attribute loss drops below the threshold, never lowered afterwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmiSchedule {
    pub raised: bool,
}

impl PmiSchedule {
    pub fn observe(&mut self, mean_bce: f64, w: &LossWeights) {
        if mean_bce < w.bce_threshold {
            self.raised = true;
        }
    }

    pub fn lambda(&self, w: &LossWeights) -> f64 {
        if self.raised {
            w.lambda_pmi_high
        } else {
            w.lambda_pmi_low
        }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mine one triplet per anchor from the ID-irrelevant attribute features.
///
/// Within each identity, the positive is the nearest other sample and the
/// negative the farthest (L2). Groups with fewer than three members are
/// skipped. Ties go to the lowest index; the negative is searched among the
/// candidates other than the chosen positive so the three indices are always
/// distinct.
pub fn pmi_mine(features: &Tensor, labels: &[usize]) -> Vec<TripletIndex> {
    let b = labels.len();
    if features.ndim() != 2 || features.shape()[0] != b {
        return Vec::new();
    }
    let mut out = Vec::new();
    for a in 0..b {
        let group: Vec<usize> = (0..b).filter(|&j| j != a && labels[j] == labels[a]).collect();
        if group.len() < 2 {
            continue;
        }
        let fa = features.row(a);
        let dist: Vec<f64> = group.iter().map(|&j| l2(fa, features.row(j))).collect();
        let mut pos = 0;
        for i in 1..group.len() {
            if dist[i] < dist[pos] {
                pos = i;
            }
        }
        let mut neg = if pos == 0 { 1 } else { 0 };
        for i in 0..group.len() {
            if i != pos && dist[i] > dist[neg] {
                neg = i;
            }
        }
        out.push(TripletIndex {
            anchor: a,
            positive: group[pos],
            negative: group[neg],
        });
    }
    out
}

/// Row-wise unit normalization; zero rows are a domain error.
pub fn l2_normalize_rows(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("expected a B×d matrix, got {:?}", s));
    }
    let sq = tape.mul(f, f)?;
    let sq = tape.reduce(ReduceKind::Sum, sq, &[1])?;
    if tape.value(sq).data().iter().any(|&v| v == 0.0) {
        return Err(Error::Domain("zero-norm feature under cosine distance".into()));
    }
    let norm = tape.sqrt(sq)?;
    let norm = tape.reshape(norm, &[s[0], 1])?;
    tape.div(f, norm)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean over triplets of `max(d⁻ − d⁺, 0)` with cosine distances on `f`.
/// Returns a constant zero when there are no triplets.
pub fn pmi_loss(tape: &mut Tape, triplets: &[TripletIndex], f: Var) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(zero(tape));
    }
    let b = tape.shape(f)[0];
    if triplets.iter().any(|t| t.anchor.max(t.positive).max(t.negative) >= b) {
        return Err(shape_err!("triplet index out of range for batch of {}", b));
    }
    let n = l2_normalize_rows(tape, f)?;
    let pick = |tape: &mut Tape, sel: fn(&TripletIndex) -> usize| -> Result<Var> {
        let idx: Vec<usize> = triplets.iter().map(sel).collect();
        tape.index_select(n, &idx)
    };
    let a = pick(tape, |t| t.anchor)?;
    let p = pick(tape, |t| t.positive)?;
    let ng = pick(tape, |t| t.negative)?;
    // d⁻ − d⁺ = cos(a, p) − cos(a, n)
    let ap = tape.mul(a, p)?;
    let ap = tape.reduce(ReduceKind::Sum, ap, &[1])?;
    let an = tape.mul(a, ng)?;
    let an = tape.reduce(ReduceKind::Sum, an, &[1])?;
    let gap = tape.sub(ap, an)?;
    let hinge = tape.relu(gap);
    tape.mean_all(hinge)
}

/// Pairwise Euclidean distances of the rows of `f[B×d]`.
pub fn pairwise_euclidean(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("expected a B×d matrix, got {:?}", s));
    }
    let b = s[0];
    let sq = tape.mul(f, f)?;
    let sq = tape.reduce(ReduceKind::Sum, sq, &[1])?;
    let col = tape.reshape(sq, &[b, 1])?;
    let row = tape.reshape(sq, &[1, b])?;
    let gram = tape.matmul_t(f, f, false, true)?;
    let gram = tape.scale(gram, -2.0);
    let d2 = tape.add(col, row)?;
    let d2 = tape.add(d2, gram)?;
    let d2 = tape.clamp_min(d2, 1e-12);
    tape.sqrt(d2)
}

pub struct WrtOutput {
    pub loss: Var,
    /// Anchors without an in-batch positive or negative.
    pub skipped: usize,
}

/// Softmax weights of one anchor's positives (`exp(d)`) and negatives (`exp(−d)`).
pub fn wrt_anchor_weights(dist: &[f64], labels: &[usize], anchor: usize) -> (Vec<f64>, Vec<f64>) {
    let mut wp = vec![0.0; dist.len()];
    let mut wn = vec![0.0; dist.len()];
    let pos = |j: usize| j != anchor && labels[j] == labels[anchor];
    let neg = |j: usize| labels[j] != labels[anchor];
    let mp = (0..dist.len()).filter(|&j| pos(j)).map(|j| dist[j]).fold(f64::NEG_INFINITY, f64::max);
    let mn = (0..dist.len()).filter(|&j| neg(j)).map(|j| -dist[j]).fold(f64::NEG_INFINITY, f64::max);
    for j in 0..dist.len() {
        if pos(j) {
            wp[j] = libm::exp(dist[j] - mp);
        } else if neg(j) {
            wn[j] = libm::exp(-dist[j] - mn);
        }
    }
    let (sp, sn): (f64, f64) = (wp.iter().sum(), wn.iter().sum());
    if sp > 0.0 {
        wp.iter_mut().for_each(|w| *w /= sp);
    }
    if sn > 0.0 {
        wn.iter_mut().for_each(|w| *w /= sn);
    }
    (wp, wn)
}

/// Weighted-regularization triplet loss, averaged over valid anchors.
pub fn wrt_loss(tape: &mut Tape, f: Var, labels: &[usize]) -> Result<WrtOutput> {
    let b = labels.len();
    let s = tape.shape(f);
    if s.len() != 2 || s[0] != b {
        return Err(shape_err!("features {:?} for {} labels", s, b));
    }
    let valid: Vec<usize> = (0..b)
        .filter(|&i| {
            let has_pos = (0..b).any(|j| j != i && labels[j] == labels[i]);
            let has_neg = (0..b).any(|j| labels[j] != labels[i]);
            has_pos && has_neg
        })
        .collect();
    let skipped = b - valid.len();
    if valid.is_empty() {
        return Ok(WrtOutput {
            loss: zero(tape),
            skipped,
        });
    }
    let n = valid.len();
    let dist = pairwise_euclidean(tape, f)?;
    let dist = tape.index_select(dist, &valid)?;
    let mut pos_mask = vec![MASKED; n * b];
    let mut neg_mask = vec![MASKED; n * b];
    let mut pos_sel = vec![0.0; n * b];
    let mut neg_sel = vec![0.0; n * b];
    for (r, &i) in valid.iter().enumerate() {
        for j in 0..b {
            if labels[j] == labels[i] && j != i {
                pos_mask[r * b + j] = 0.0;
                pos_sel[r * b + j] = 1.0;
            } else if labels[j] != labels[i] {
                neg_mask[r * b + j] = 0.0;
                neg_sel[r * b + j] = 1.0;
            }
        }
    }
    let pm = tape.constant(Tensor::new(&[n, b], pos_mask)?);
    let nm = tape.constant(Tensor::new(&[n, b], neg_mask)?);
    let ps = tape.constant(Tensor::new(&[n, b], pos_sel)?);
    let ns = tape.constant(Tensor::new(&[n, b], neg_sel)?);

    let lp = tape.add(dist, pm)?;
    let wp = tape.softmax_rows(lp)?;
    let neg_d = tape.scale(dist, -1.0);
    let ln = tape.add(neg_d, nm)?;
    let wn = tape.softmax_rows(ln)?;
    // the selectors zero out masked distances so no 0·∞ or stray terms leak in
    let dp = tape.mul(dist, ps)?;
    let dp = tape.mul(dp, wp)?;
    let dp = tape.reduce(ReduceKind::Sum, dp, &[1])?;
    let dn = tape.mul(dist, ns)?;
    let dn = tape.mul(dn, wn)?;
    let dn = tape.reduce(ReduceKind::Sum, dn, &[1])?;
    let gap = tape.sub(dp, dn)?;
    let per_anchor = tape.softplus(gap);
    Ok(WrtOutput {
        loss: tape.mean_all(per_anchor)?,
        skipped,
    })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::Label(format!("label {y} outside {classes} classes"))),
        None => Ok(()),
    }
}

/// `½ · mean_i ‖f_i − c_{y_i}‖₂`, the plain (unsquared) distance.
pub fn center_loss(tape: &mut Tape, f: Var, labels: &[usize], centers: Var) -> Result<Var> {
    let (sf, sc) = (tape.shape(f).to_vec(), tape.shape(centers).to_vec());
    if sf.len() != 2 || sc.len() != 2 || sf[1] != sc[1] || sf[0] != labels.len() {
        return Err(shape_err!("center loss on features {:?}, centers {:?}", sf, sc));
    }
    check_labels(labels, sc[0])?;
    let c = tape.index_select(centers, labels)?;
    let diff = tape.sub(f, c)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.reduce(ReduceKind::Sum, sq, &[1])?;
    // zero subgradient when a feature sits exactly on its center
    let norm = tape.custom_unary(sq, libm::sqrt, |x| if x > 0.0 { 0.5 / libm::sqrt(x) } else { 0.0 });
    let total = tape.sum_all(norm)?;
    Ok(tape.scale(total, 0.5 / labels.len() as f64))
}

/// Smoothed one-hot targets: `1 − (M−1)/M·ε` on the true class, `ε/M` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    check_labels(labels, classes)?;
    let off = eps / classes as f64;
    let on = 1.0 - (classes as f64 - 1.0) / classes as f64 * eps;
    let mut t = vec![off; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        t[i * classes + y] = on;
    }
    Tensor::new(&[labels.len(), classes], t)
}

/// Label-smoothed cross-entropy, averaged over the batch.
pub fn xent_label_smooth(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(config_err!("smoothing eps {} outside [0, 1)", eps));
    }
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(shape_err!("logits {:?} for {} labels", s, labels.len()));
    }
    let q = tape.constant(smoothed_targets(labels, s[1], eps)?);
    let lp = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(lp, q)?;
    let total = tape.sum_all(prod)?;
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}

pub struct BceOutput {
    pub loss: Var,
    /// Entries that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

/// Binary cross-entropy summed over categories and averaged over the batch.
pub fn bce_attributes(tape: &mut Tape, p: Var, y: &Tensor) -> Result<BceOutput> {
    let s = tape.shape(p).to_vec();
    if s.len() != 2 || s != y.shape() || s[0] == 0 {
        return Err(shape_err!("predictions {:?} vs targets {:?}", s, y.shape()));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Label("attribute targets must be 0 or 1".into()));
    }
    let clamped = tape
        .value(p)
        .data()
        .iter()
        .filter(|&&v| !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&v))
        .count();
    let pc = tape.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let yv = tape.constant(y.clone());
    let one_minus_y = tape.constant(Tensor::new(&s, y.data().iter().map(|v| 1.0 - v).collect())?);
    let log_p = tape.log(pc)?;
    let q = tape.scale(pc, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let log_q = tape.log(q)?;
    let a = tape.mul(yv, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let sum = tape.add(a, b)?;
    let total = tape.sum_all(sum)?;
    Ok(BceOutput {
        loss: tape.scale(total, -1.0 / s[0] as f64),
        clamped,
    })
}

/// The five loss terms of one step, on a shared tape.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub xent: Var,
    pub wrt: Var,
    pub cent: Var,
    pub bce: Var,
    pub pmi: Var,
}

/// Scalar values of a step's losses, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub xent: f64,
    pub wrt: f64,
    pub cent: f64,
    pub bce: f64,
    pub pmi: f64,
    pub lambda_pmi: f64,
    pub total: f64,
}

/// `L_xent + L_wrt + λ_cent·L_cent + λ_bce·L_bce + λ_pmi·L_pmi`.
pub fn total_loss(
    tape: &mut Tape,
    c: &LossComponents,
    w: &LossWeights,
    lambda_bce: f64,
    lambda_pmi: f64,
) -> Result<(Var, LossValues)> {
    let mut total = tape.add(c.xent, c.wrt)?;
    for (v, lambda) in [(c.cent, w.lambda_cent), (c.bce, lambda_bce), (c.pmi, lambda_pmi)] {
        let t = tape.scale(v, lambda);
        total = tape.add(total, t)?;
    }
    let item = |v: Var| tape.value(v).item();
    let values = LossValues {
        xent: item(c.xent),
        wrt: item(c.wrt),
        cent: item(c.cent),
        bce: item(c.bce),
        pmi: item(c.pmi),
        lambda_pmi,
        total: item(total),
    };
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn mining_scalar_example() {
        let f = Tensor::new(&[4, 1], vec![0.0, 1.0, 2.0, 10.0]).unwrap();
        let t = pmi_mine(&f, &[0, 0, 0, 0]);
        assert_eq!(
            t[0],
            TripletIndex {
                anchor: 0,
                positive: 1,
                negative: 3
            }
        );
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn mining_ties_and_small_groups() {
        let f = Tensor::zeros(&[6, 2]);
        let t = pmi_mine(&f, &[0, 0, 0, 0, 1, 1]);
        assert_eq!(t.len(), 4);
        assert_eq!((t[0].positive, t[0].negative), (1, 2));
        assert_eq!((t[1].positive, t[1].negative), (0, 2));
    }

    #[test]
    fn pmi_loss_examples() {
        let trip = [TripletIndex {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        let v = eval(|t| {
            let f = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]));
            pmi_loss(t, &trip, f)
        });
        assert_eq!(v, 0.0);
        let v = eval(|t| {
            let f = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
            pmi_loss(t, &trip, f)
        });
        assert_eq!(v, 1.0);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        assert!(matches!(pmi_loss(&mut tape, &trip, f), Err(Error::Domain(_))));
    }

    #[test]
    fn wrt_examples() {
        let v = eval(|t| {
            let f = t.constant(Tensor::from_rows(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, libm::sqrt(3.0)]]));
            Ok(wrt_loss(t, f, &[0, 0, 1])?.loss)
        });
        // equilateral triangle: anchors 0 and 1 see d⁺ = d⁻ = 2; anchor 2 has no positive
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        let v = eval(|t| {
            let f = t.constant(Tensor::from_rows(&[&[0.0], &[0.0], &[50.0], &[50.0]]));
            Ok(wrt_loss(t, f, &[0, 0, 1, 1])?.loss)
        });
        assert!(v <= 1e-9);
    }

    #[test]
    fn center_and_xent_examples() {
        let v = eval(|t| {
            let f = t.constant(Tensor::from_rows(&[&[3.0, 4.0]]));
            let c = t.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
            center_loss(t, f, &[0], c)
        });
        assert_eq!(v, 2.5);
        let q = smoothed_targets(&[0], 4, 0.1).unwrap();
        for (a, b) in q.data().iter().zip([0.925, 0.025, 0.025, 0.025]) {
            assert!((a - b).abs() < 1e-15);
        }
        let v = eval(|t| {
            let l = t.constant(Tensor::zeros(&[2, 4]));
            xent_label_smooth(t, l, &[1, 3], 0.1)
        });
        assert!((v - libm::log(4.0)).abs() < 1e-12);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(xent_label_smooth(&mut tape, l, &[4], 0.1), Err(Error::Label(_))));
    }

    #[test]
    fn bce_examples() {
        let v = eval(|t| {
            let p = t.constant(Tensor::full(&[2, 21], 0.5));
            Ok(bce_attributes(t, p, &Tensor::zeros(&[2, 21]))?.loss)
        });
        assert!((v - 21.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let mut tape = Tape::new();
        let y = Tensor::from_rows(&[&[1.0, 0.0]]);
        let p = tape.constant(y.clone());
        let out = bce_attributes(&mut tape, p, &y).unwrap();
        assert_eq!(out.clamped, 2);
        assert!(tape.value(out.loss).item() <= 1e-10);
    }

    #[test]
    fn pmi_schedule_is_one_way() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_pmi(0.2), 0.005);
        assert_eq!(w.lambda_pmi(0.1), 0.01);
        let mut s = PmiSchedule::default();
        s.observe(0.3, &w);
        assert_eq!(s.lambda(&w), 0.005);
        s.observe(0.149, &w);
        s.observe(0.9, &w);
        assert_eq!(s.lambda(&w), 0.01);
    }
}
