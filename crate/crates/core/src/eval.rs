//! Retrieval evaluation: descriptor extraction, distance matrices and
//! CMC/mAP under the usual and mixing protocols.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::model::AsaNet;
use crate::nn::Mode;
use crate::synth::{make_batch, Dataset, Pose, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    /// Queries without a valid gallery match are dropped.
    Usual,
    /// Queries join the gallery; each query skips its own tracklet.
    Mixing,
}

/// Which clip descriptor is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descriptor {
    /// The fused feature the metric losses see.
    Final,
    /// The same feature after the BNNeck, as the classifier sees it.
    Neck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub descriptor: Descriptor,
    pub setup: Setup,
    pub same_camera_rule: bool,
    pub frames: usize,
    pub seed: u64,
    /// Clips per forward pass.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            descriptor: Descriptor::Final,
            setup: Setup::Usual,
            same_camera_rule: true,
            frames: 6,
            seed: 7,
            batch: 16,
        }
    }
}

/// Descriptors with their identity, camera and tracklet ids, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    /// `None` marks a distractor that matches nothing.
    pub ids: Vec<Option<usize>>,
    pub cameras: Vec<usize>,
    pub tracklets: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(shape_err!("feature widths {} and {} differ", self.dim(), other.dim()));
        }
        let d = self.dim().max(other.dim());
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        Ok(FeatureSet {
            features: Tensor::new(&[self.len() + other.len(), d], data)?,
            ids: self.ids.iter().chain(&other.ids).copied().collect(),
            cameras: self.cameras.iter().chain(&other.cameras).copied().collect(),
            tracklets: self.tracklets.iter().chain(&other.tracklets).copied().collect(),
        })
    }
}

/// Descriptors (`f_final`) of the given tracklets, in eval mode, with frames
/// drawn by the constrained sampler under a fixed seed.
pub fn extract_features(model: &mut AsaNet, ds: &Dataset, tracklets: &[usize], cfg: &EvalConfig) -> Result<FeatureSet> {
    let (mh, mw) = (model.config.frame_height, model.config.frame_width);
    if ds.config.frame_height != mh || ds.config.frame_width != mw {
        return Err(config_err!(
            "dataset frames {}×{} do not fit a {}×{} model",
            ds.config.frame_height,
            ds.config.frame_width,
            mh,
            mw
        ));
    }
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.config.feature_dim();
    let mut data = Vec::with_capacity(tracklets.len() * d);
    let result = (|| {
        for chunk in tracklets.chunks(cfg.batch.max(1)) {
            let batch = make_batch(ds, chunk, cfg.frames, &mut rng)?;
            for b in model.forward_full(&batch.frames)? {
                let f = match cfg.descriptor {
                    Descriptor::Final => &b.f_final,
                    Descriptor::Neck => &b.f_neck,
                };
                data.extend_from_slice(f.data());
            }
        }
        Ok::<(), Error>(())
    })();
    model.set_mode(previous);
    result?;
    Ok(FeatureSet {
        features: Tensor::new(&[tracklets.len(), d], data)?,
        ids: tracklets.iter().map(|&t| ds.tracklets[t].identity).collect(),
        cameras: tracklets.iter().map(|&t| ds.tracklets[t].camera).collect(),
        tracklets: tracklets.to_vec(),
    })
}

/// `1 − cos(q, g)` or squared Euclidean distance for every query/gallery pair.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Tensor> {
    if q.ndim() != 2 || g.ndim() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(shape_err!("query {:?} vs gallery {:?}", q.shape(), g.shape()));
    }
    let (nq, ng) = (q.shape()[0], g.shape()[0]);
    let norms = |t: &Tensor| -> Vec<f64> {
        (0..t.shape()[0])
            .map(|i| libm::sqrt(t.row(i).iter().map(|v| v * v).sum()))
            .collect()
    };
    let (qn, gn) = (norms(q), norms(g));
    if metric == Metric::Cosine && qn.iter().chain(&gn).any(|&n| n == 0.0) {
        return Err(Error::Domain("zero-norm feature under cosine distance".into()));
    }
    let mut out = vec![0.0; nq * ng];
    for i in 0..nq {
        for j in 0..ng {
            let (a, b) = (q.row(i), g.row(j));
            out[i * ng + j] = match metric {
                Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (qn[i] * gn[j]),
                Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            };
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// Ranking of one evaluated query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    /// Row of the query in the query set.
    pub query: usize,
    /// Gallery rows in rank order, after exclusions.
    pub ranked: Vec<usize>,
    pub correct: Vec<bool>,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub setup: Setup,
    pub queries: Vec<QueryRanking>,
    /// `cmc[r]` is the hit rate within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries dropped for lacking a valid match.
    pub dropped: usize,
}

impl RankingResult {
    pub fn rank(&self, r: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(r.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Rank a gallery for each query given their distance matrix.
///
/// Gallery rows sharing the query's tracklet are skipped; with
/// `same_camera_rule`, so are rows of the same identity and camera. Queries
/// left without any correct gallery row are dropped. Ties keep gallery order.
pub fn cmc_map(dist: &Tensor, query: &FeatureSet, gallery: &FeatureSet, setup: Setup, same_camera_rule: bool) -> Result<RankingResult> {
    let (nq, ng) = (query.len(), gallery.len());
    if dist.shape() != [nq, ng] {
        return Err(shape_err!("distances {:?} for {}×{} sets", dist.shape(), nq, ng));
    }
    let mut queries = Vec::new();
    let mut hits_at = vec![0usize; ng.max(1)];
    let mut dropped = 0;
    for qi in 0..nq {
        let row = dist.row(qi);
        let keep = |j: usize| {
            if gallery.tracklets[j] == query.tracklets[qi] {
                return false;
            }
            !(same_camera_rule && gallery.ids[j].is_some() && gallery.ids[j] == query.ids[qi] && gallery.cameras[j] == query.cameras[qi])
        };
        let mut order: Vec<usize> = (0..ng).filter(|&j| keep(j)).collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let correct: Vec<bool> = order
            .iter()
            .map(|&j| query.ids[qi].is_some() && gallery.ids[j] == query.ids[qi])
            .collect();
        let total = correct.iter().filter(|&&c| c).count();
        if total == 0 {
            dropped += 1;
            continue;
        }
        let first = correct.iter().position(|&c| c).expect("has a match");
        hits_at[first] += 1;
        let mut found = 0;
        let mut ap = 0.0;
        for (r, &c) in correct.iter().enumerate() {
            if c {
                found += 1;
                ap += found as f64 / (r + 1) as f64;
            }
        }
        queries.push(QueryRanking {
            query: qi,
            ranked: order,
            correct,
            ap: ap / total as f64,
        });
    }
    if queries.is_empty() {
        return Err(Error::Protocol("no query has a valid gallery match".into()));
    }
    let n = queries.len() as f64;
    let mut cmc = Vec::with_capacity(hits_at.len());
    let mut acc = 0;
    for h in hits_at {
        acc += h;
        cmc.push(acc as f64 / n);
    }
    let map = queries.iter().map(|q| q.ap).sum::<f64>() / n;
    Ok(RankingResult {
        setup,
        queries,
        cmc,
        map,
        dropped,
    })
}

/// Run a protocol on extracted query and gallery sets.
pub fn evaluate(query: &FeatureSet, gallery: &FeatureSet, cfg: &EvalConfig) -> Result<RankingResult> {
    let gallery = match cfg.setup {
        Setup::Usual => gallery.clone(),
        Setup::Mixing => gallery.concat(query)?,
    };
    let dist = distance_matrix(&query.features, &gallery.features, cfg.metric)?;
    cmc_map(&dist, query, &gallery, cfg.setup, cfg.same_camera_rule)
}

/// Extract query and gallery descriptors of `ds` and evaluate them. With a
/// dataset other than the training one this is the cross-domain protocol.
pub fn evaluate_dataset(model: &mut AsaNet, ds: &Dataset, cfg: &EvalConfig) -> Result<(RankingResult, FeatureSet, FeatureSet)> {
    let q = extract_features(model, ds, &ds.split(Split::Query), cfg)?;
    let g = extract_features(model, ds, &ds.split(Split::Gallery), cfg)?;
    let r = evaluate(&q, &g, cfg)?;
    Ok((r, q, g))
}

/// Mean distance between same-identity descriptors sharing a pose, divided by
/// the mean distance between same-identity descriptors of different poses.
/// Returns `None` when either kind of pair is missing.
pub fn pose_distance_ratio(features: &Tensor, ids: &[usize], poses: &[Pose]) -> Option<f64> {
    let n = ids.len();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if ids[i] != ids[j] {
                continue;
            }
            let d = libm::sqrt(
                features
                    .row(i)
                    .iter()
                    .zip(features.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
            if poses[i] == poses[j] {
                within += d;
                nw += 1;
            } else {
                across += d;
                na += 1;
            }
        }
    }
    if nw == 0 || na == 0 || across == 0.0 {
        return None;
    }
    Some((within / nw as f64) / (across / na as f64))
}
