//! Direct-evaluation oracles shared by the oracle tests and the acceptance
//! run. Everything here is written from the formulas with plain loops and
//! never calls into the library code it checks.
#![allow(dead_code)]

use asanet_core::eval::{cmc_map, distance_matrix, FeatureSet, Metric, Setup};
use asanet_core::losses::{
    bce_attributes, center_loss, pmi_loss, pmi_mine, smoothed_targets, wrt_anchor_weights, wrt_loss,
    xent_label_smooth, TripletIndex,
};
use asanet_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn eval1(f: impl FnOnce(&mut Tape) -> asanet_core::Result<asanet_core::Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

/// Labels for `p` identities with `k` samples each, shuffled.
pub fn pk_labels(r: &mut ChaCha8Rng, p: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..10).collect();
    ids.shuffle(r);
    let mut labels: Vec<usize> = ids[..p].iter().flat_map(|&i| std::iter::repeat_n(i, k)).collect();
    labels.shuffle(r);
    labels
}

pub fn wrt_oracle(f: &Tensor, labels: &[usize]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let d = |j: usize| dist(f.row(i), f.row(j));
        let zp: f64 = pos.iter().map(|&j| d(j).exp()).sum();
        let zn: f64 = neg.iter().map(|&j| (-d(j)).exp()).sum();
        let dp: f64 = pos.iter().map(|&j| d(j).exp() / zp * d(j)).sum();
        let dn: f64 = neg.iter().map(|&j| (-d(j)).exp() / zn * d(j)).sum();
        total += (1.0 + (dp - dn).exp()).ln();
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Largest relative deviation of a loss from its oracle over `n` instances.
fn worst(n: usize, mut one: impl FnMut() -> (f64, f64)) -> f64 {
    (0..n)
        .map(|_| {
            let (got, want) = one();
            (got - want).abs() / (1.0 + want.abs())
        })
        .fold(0.0, f64::max)
}

/// Per-loss worst deviation over 100 random instances each:
/// `[wrt, pmi, xent, bce, center]`.
pub fn loss_deviations() -> [(&'static str, f64); 5] {
    let mut r = rng(4);
    let wrt = worst(100, || {
        let (p, k, d) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..8));
        let labels = pk_labels(&mut r, p, k);
        let f = random_tensor(&mut r, &[labels.len(), d]);
        let got = eval1(|t| {
            let v = t.constant(f.clone());
            wrt_loss(t, v, &labels).map(|o| o.loss)
        });
        (got, wrt_oracle(&f, &labels))
    });

    let mut r = rng(6);
    let pmi = worst(100, || {
        let (b, d) = (r.random_range(3..12), r.random_range(2..8));
        let f = random_tensor(&mut r, &[b, d]);
        let n = r.random_range(1..8);
        let triplets: Vec<TripletIndex> = (0..n)
            .map(|_| TripletIndex {
                anchor: r.random_range(0..b),
                positive: r.random_range(0..b),
                negative: r.random_range(0..b),
            })
            .collect();
        let got = eval1(|t| {
            let v = t.constant(f.clone());
            pmi_loss(t, &triplets, v)
        });
        let cos = |i: usize, j: usize| {
            f.row(i).iter().zip(f.row(j)).map(|(x, y)| x * y).sum::<f64>() / (norm(f.row(i)) * norm(f.row(j)))
        };
        let want = triplets
            .iter()
            .map(|t| (cos(t.anchor, t.positive) - cos(t.anchor, t.negative)).max(0.0))
            .sum::<f64>()
            / n as f64;
        (got, want)
    });

    let mut r = rng(7);
    let xent = worst(100, || {
        let (b, m) = (r.random_range(1..8), r.random_range(2..10));
        let eps = r.random_range(0.0..0.5);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..m)).collect();
        let logits = random_tensor(&mut r, &[b, m]);
        let got = eval1(|t| {
            let v = t.constant(logits.clone());
            xent_label_smooth(t, v, &labels, eps)
        });
        let mut want = 0.0;
        for i in 0..b {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            for (j, &l) in logits.row(i).iter().enumerate() {
                let q = if j == labels[i] { 1.0 - eps + eps / m as f64 } else { eps / m as f64 };
                want -= q * (l.exp() / z).ln();
            }
        }
        (got, want / b as f64)
    });

    let mut r = rng(8);
    let bce = worst(100, || {
        let (b, d) = (r.random_range(1..8), r.random_range(1..22));
        let p: Vec<f64> = (0..b * d).map(|_| r.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..b * d).map(|_| r.random_range(0..2) as f64).collect();
        let pt = Tensor::new(&[b, d], p.clone()).unwrap();
        let yt = Tensor::new(&[b, d], y.clone()).unwrap();
        let got = eval1(|t| {
            let v = t.constant(pt);
            bce_attributes(t, v, &yt).map(|o| o.loss)
        });
        let want = -p.iter().zip(&y).map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / b as f64;
        (got, want)
    });

    let mut r = rng(9);
    let center = worst(100, || {
        let (b, m, d) = (r.random_range(1..10), r.random_range(1..6), r.random_range(1..8));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..m)).collect();
        let f = random_tensor(&mut r, &[b, d]);
        let c = random_tensor(&mut r, &[m, d]);
        let got = eval1(|t| {
            let (vf, vc) = (t.constant(f.clone()), t.constant(c.clone()));
            center_loss(t, vf, &labels, vc)
        });
        let want = 0.5 * (0..b).map(|i| dist(f.row(i), c.row(labels[i]))).sum::<f64>() / b as f64;
        (got, want)
    });

    [("wrt", wrt), ("pmi", pmi), ("xent", xent), ("bce", bce), ("center", center)]
}

/// Worst `|Σw − 1|` over WRT anchor weights, and over smoothed target rows.
pub fn weight_sum_deviations() -> (f64, f64) {
    let mut r = rng(5);
    let mut wrt = 0.0f64;
    for _ in 0..100 {
        let labels = pk_labels(&mut r, 3, 3);
        let b = labels.len();
        let d: Vec<f64> = (0..b).map(|_| r.random_range(0.0..5.0)).collect();
        let (wp, wn) = wrt_anchor_weights(&d, &labels, r.random_range(0..b));
        wrt = wrt.max((wp.iter().sum::<f64>() - 1.0).abs()).max((wn.iter().sum::<f64>() - 1.0).abs());
    }
    let mut smooth = 0.0f64;
    for _ in 0..100 {
        let m = r.random_range(2..10);
        let labels: Vec<usize> = (0..r.random_range(1..8)).map(|_| r.random_range(0..m)).collect();
        let q = smoothed_targets(&labels, m, r.random_range(0.0..0.5)).unwrap();
        for i in 0..labels.len() {
            smooth = smooth.max((q.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    (wrt, smooth)
}

/// Exhaustive search over all (positive, negative) pairs of an anchor's
/// identity: nearest positive first, then farthest negative, lowest indices
/// on ties.
pub fn mine_oracle(f: &Tensor, labels: &[usize]) -> Vec<TripletIndex> {
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let mut best: Option<(usize, usize)> = None;
        for &p in &same {
            for &n in &same {
                if p == n {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bn)) => {
                        let (dp, dbp) = (dist(f.row(a), f.row(p)), dist(f.row(a), f.row(bp)));
                        let (dn, dbn) = (dist(f.row(a), f.row(n)), dist(f.row(a), f.row(bn)));
                        dp < dbp || (dp == dbp && p < bp) || (p == bp && (dn > dbn || (dn == dbn && n < bn)))
                    }
                };
                if better {
                    best = Some((p, n));
                }
            }
        }
        if let Some((positive, negative)) = best {
            out.push(TripletIndex {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    out
}

/// Index of the first of `batches` random PK batches (P, K ≤ 8) where
/// mining and the oracle disagree.
pub fn first_mining_mismatch(batches: usize) -> Option<usize> {
    let mut r = rng(10);
    for i in 0..batches {
        let (p, k) = (r.random_range(1..=8), r.random_range(1..=8));
        let labels = pk_labels(&mut r, p, k);
        let d = r.random_range(1..5);
        // coarse values every few batches so ties actually happen
        let coarse = i % 3 == 0;
        let f = Tensor::new(
            &[labels.len(), d],
            (0..labels.len() * d)
                .map(|_| {
                    if coarse {
                        r.random_range(0..3) as f64
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
                .collect(),
        )
        .unwrap();
        if pmi_mine(&f, &labels) != mine_oracle(&f, &labels) {
            return Some(i);
        }
    }
    None
}

/// Direct CMC/mAP: filter, stable sort, then precision at each hit.
pub fn ranking_oracle(dist: &Tensor, q: &FeatureSet, g: &FeatureSet, rule: bool) -> Option<(Vec<f64>, f64, usize)> {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    for i in 0..q.len() {
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for j in 0..g.len() {
            if g.tracklets[j] == q.tracklets[i] {
                continue;
            }
            if rule && g.ids[j].is_some() && g.ids[j] == q.ids[i] && g.cameras[j] == q.cameras[i] {
                continue;
            }
            cand.push((dist.data()[i * g.len() + j], j));
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let hits: Vec<usize> = cand
            .iter()
            .enumerate()
            .filter(|(_, c)| q.ids[i].is_some() && g.ids[c.1] == q.ids[i])
            .map(|(r, _)| r)
            .collect();
        if hits.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        for (n, &r) in hits.iter().enumerate() {
            ap += (n + 1) as f64 / (r + 1) as f64;
        }
        aps.push(ap / hits.len() as f64);
        first_hits.push(hits[0]);
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    let cmc = (0..g.len().max(1))
        .map(|r| first_hits.iter().filter(|&&h| h <= r).count() as f64 / n)
        .collect();
    Some((cmc, aps.iter().sum::<f64>() / n, aps.len()))
}

pub fn random_set(r: &mut ChaCha8Rng, n: usize, d: usize, ids: usize, offset: usize) -> FeatureSet {
    FeatureSet {
        features: Tensor::new(&[n, d], (0..n * d).map(|_| r.random_range(0..4) as f64).collect()).unwrap(),
        ids: (0..n)
            .map(|_| if r.random_bool(0.1) { None } else { Some(r.random_range(0..ids)) })
            .collect(),
        cameras: (0..n).map(|_| r.random_range(0..2)).collect(),
        tracklets: (offset..offset + n).collect(),
    }
}

/// Compare `cmc_map` with the oracle on `instances` random problems
/// (≤ 20 queries × ≤ 50 gallery). Returns how many had valid queries, or
/// the first instance that disagreed.
pub fn ranking_agreement(instances: usize) -> Result<usize, usize> {
    let mut r = rng(11);
    let mut checked = 0;
    for i in 0..instances {
        let (nq, ng, d) = (r.random_range(1..=20), r.random_range(1..=50), r.random_range(1..4));
        let ids = r.random_range(1..8);
        let q = random_set(&mut r, nq, d, ids, 0);
        let g = random_set(&mut r, ng, d, ids, 100);
        let rule = r.random_bool(0.5);
        let dist = distance_matrix(&q.features, &g.features, Metric::Euclidean).unwrap();
        let got = cmc_map(&dist, &q, &g, Setup::Usual, rule);
        let same = match (ranking_oracle(&dist, &q, &g, rule), got) {
            (None, got) => got.is_err(),
            (Some((cmc, map, n)), Ok(got)) => {
                checked += 1;
                got.cmc == cmc && got.map == map && got.queries.len() == n
            }
            (Some(_), Err(_)) => false,
        };
        if !same {
            return Err(i);
        }
    }
    Ok(checked)
}

/// The worked example: query APs 5/6 and 1/2, so mAP 2/3 and CMC
/// [0.5, 1, 1, 1].
pub fn hand_example() -> (f64, Vec<f64>) {
    let set = |ids: &[Option<usize>], cams: &[usize], t0: usize| FeatureSet {
        features: Tensor::zeros(&[ids.len(), 1]),
        ids: ids.to_vec(),
        cameras: cams.to_vec(),
        tracklets: (t0..t0 + ids.len()).collect(),
    };
    let q = set(&[Some(0), Some(1)], &[0, 0], 100);
    let g = set(&[Some(0), Some(2), Some(0), Some(1)], &[1, 1, 1, 1], 0);
    let dist = Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[0.1, 0.5, 0.6, 0.2]]);
    let r = cmc_map(&dist, &q, &g, Setup::Usual, true).unwrap();
    (r.map, r.cmc)
}
