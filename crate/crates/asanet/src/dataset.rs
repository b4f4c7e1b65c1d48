//! On-disk datasets: `manifest.json` plus `frames.bin` (little-endian `f32`,
//! tracklet-major, each frame `3×H×W`).

use std::fs;
use std::path::Path;

use asanet_core::synth::{Dataset, GenConfig, IdentitySpec, Split, TrackletSpec, D_IR_ATTR, D_RE_ATTR};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const RE_ATTR_NAMES: [&str; D_RE_ATTR] = [
    "gender_male",
    "gender_female",
    "top_red",
    "top_green",
    "top_blue",
    "top_yellow",
    "top_white",
    "bottom_red",
    "bottom_green",
    "bottom_blue",
    "bottom_yellow",
    "bottom_white",
    "bag_no",
    "bag_yes",
];

pub const IR_ATTR_NAMES: [&str; D_IR_ATTR] = [
    "pose_front",
    "pose_back",
    "pose_side",
    "motion_standing",
    "motion_walking",
    "motion_running",
    "occluded",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub id_relevant: Vec<String>,
    pub id_irrelevant: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub frame_shape: [usize; 3],
    pub num_frames: usize,
    pub schema: Schema,
    pub identities: Vec<IdentitySpec>,
    pub tracklets: Vec<TrackletSpec>,
    pub splits: Splits,
}

pub fn manifest_of(ds: &Dataset) -> Manifest {
    let c = &ds.config;
    Manifest {
        config: c.clone(),
        frame_shape: [3, c.frame_height, c.frame_width],
        num_frames: ds.frames.len() / ds.frame_len(),
        schema: Schema {
            id_relevant: RE_ATTR_NAMES.iter().map(|s| s.to_string()).collect(),
            id_irrelevant: IR_ATTR_NAMES.iter().map(|s| s.to_string()).collect(),
        },
        identities: ds.identities.clone(),
        tracklets: ds.tracklets.clone(),
        splits: Splits {
            train: ds.split(Split::Train),
            query: ds.split(Split::Query),
            gallery: ds.split(Split::Gallery),
        },
    }
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let manifest = serde_json::to_vec_pretty(&manifest_of(ds))?;
    let mut bytes = Vec::with_capacity(ds.frames.len() * 4);
    for v in &ds.frames {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let p = dir.join("frames.bin");
    fs::write(&p, bytes).at(&p)?;
    let p = dir.join("manifest.json");
    fs::write(&p, manifest).at(&p)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let p = dir.join("manifest.json");
    let m: Manifest = serde_json::from_slice(&fs::read(&p).at(&p)?)?;
    let p = dir.join("frames.bin");
    let bytes = fs::read(&p).at(&p)?;
    let frame_len: usize = m.frame_shape.iter().product();
    if m.frame_shape != [3, m.config.frame_height, m.config.frame_width] {
        return Err(Error::Format("frame shape disagrees with the generator config".into()));
    }
    if bytes.len() != m.num_frames * frame_len * 4 {
        return Err(Error::Format(format!(
            "frames.bin holds {} bytes, manifest needs {}",
            bytes.len(),
            m.num_frames * frame_len * 4
        )));
    }
    let mut expected = 0;
    for (i, t) in m.tracklets.iter().enumerate() {
        if t.id != i || t.first_frame != expected || t.identity.is_some_and(|id| id >= m.identities.len()) {
            return Err(Error::Format(format!("tracklet {i} is inconsistent")));
        }
        expected += t.length;
    }
    if expected != m.num_frames {
        return Err(Error::Format("tracklet lengths do not add up to the frame count".into()));
    }
    let frames = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Dataset {
        config: m.config,
        identities: m.identities,
        tracklets: m.tracklets,
        frames,
    })
}
