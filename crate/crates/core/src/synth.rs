//! Synthetic pedestrian tracklets.
//!
//! Each identity has fixed appearance attributes (gender, top and bottom
//! colour, bag) and body proportions. Each tracklet adds nuisance factors
//! that do not identify the person: pose, motion, occlusion, camera and
//! background. Frames are rendered as layered sprites, fully determined by
//! the generator seed.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const D_RE_ATTR: usize = 14;
pub const D_IR_ATTR: usize = 7;
pub const D_ATTR: usize = D_RE_ATTR + D_IR_ATTR;

pub const GENDERS: usize = 2;
pub const COLORS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    Front,
    Back,
    Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Standing,
    Walking,
    Running,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Front, Pose::Back, Pose::Side];
}

impl Motion {
    pub const ALL: [Motion; 3] = [Motion::Standing, Motion::Walking, Motion::Running];

    /// Horizontal sprite displacement per frame, in pixels.
    pub fn speed(self) -> usize {
        match self {
            Motion::Standing => 0,
            Motion::Walking => 1,
            Motion::Running => 3,
        }
    }
}

/// Rendering family; the two styles differ in background statistics and
/// colour palette, giving a source and a target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub gender: usize,
    pub top_color: usize,
    pub bottom_color: usize,
    pub bag: bool,
    /// Torso height as a fraction of the frame height.
    pub torso: f64,
    /// Leg height as a fraction of the frame height.
    pub legs: f64,
    /// Body width as a fraction of the frame width.
    pub width: f64,
    /// Per-channel multiplicative colour jitter.
    pub tint: [f64; 3],
}

impl IdentitySpec {
    /// One-hot gender, top colour, bottom colour and bag.
    pub fn re_labels(&self) -> [f64; D_RE_ATTR] {
        let mut y = [0.0; D_RE_ATTR];
        y[self.gender] = 1.0;
        y[GENDERS + self.top_color] = 1.0;
        y[GENDERS + COLORS + self.bottom_color] = 1.0;
        y[GENDERS + 2 * COLORS + self.bag as usize] = 1.0;
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletSpec {
    pub id: usize,
    /// `None` for person-free distractors.
    pub identity: Option<usize>,
    pub pose: Pose,
    pub motion: Motion,
    pub occluded: bool,
    pub camera: usize,
    pub background_seed: u64,
    pub length: usize,
    /// Horizontal sprite offset of the first frame.
    pub start_x: usize,
    pub split: Split,
    /// Index of the first frame in the frame store.
    pub first_frame: usize,
}

impl TrackletSpec {
    /// One-hot pose, one-hot motion and the occlusion flag.
    pub fn ir_labels(&self) -> [f64; D_IR_ATTR] {
        let mut y = [0.0; D_IR_ATTR];
        y[self.pose as usize] = 1.0;
        y[3 + self.motion as usize] = 1.0;
        y[6] = self.occluded as u8 as f64;
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub num_identities: usize,
    pub tracklets_per_identity: usize,
    pub cameras: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Extra identities that only appear in the query split, two tracklets each.
    pub unmatched_identities: usize,
    /// Person-free gallery tracklets.
    pub distractors: usize,
    pub style: Style,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_identities: 20,
            tracklets_per_identity: 8,
            cameras: 2,
            frame_height: 64,
            frame_width: 32,
            min_length: 8,
            max_length: 14,
            unmatched_identities: 2,
            distractors: 4,
            style: Style::A,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(config_err!("need at least 2 identities, got {}", self.num_identities));
        }
        if self.tracklets_per_identity < 2 {
            return Err(config_err!(
                "need at least 2 tracklets per identity, got {}",
                self.tracklets_per_identity
            ));
        }
        if self.cameras == 0 {
            return Err(config_err!("need at least one camera"));
        }
        if self.frame_height < 16 || self.frame_width < 8 || self.frame_height % 4 != 0 || self.frame_width % 4 != 0 {
            return Err(config_err!(
                "frame {}×{} must be at least 16×8 and a multiple of 4",
                self.frame_height,
                self.frame_width
            ));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(config_err!(
                "invalid tracklet length range {}..={}",
                self.min_length,
                self.max_length
            ));
        }
        Ok(())
    }

    /// Held-out tracklets per identity: one query plus a quarter as gallery.
    /// Identities with fewer than four tracklets are used for training only.
    pub fn held_out(&self) -> (usize, usize) {
        if self.tracklets_per_identity >= 4 {
            (1, self.tracklets_per_identity / 4)
        } else {
            (0, 0)
        }
    }

    pub fn frame_len(&self) -> usize {
        3 * self.frame_height * self.frame_width
    }
}

/// A rendered dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub identities: Vec<IdentitySpec>,
    pub tracklets: Vec<TrackletSpec>,
    /// All frames, tracklet-major, each `3×H×W`.
    pub frames: Vec<f32>,
}

impl Dataset {
    pub fn frame_len(&self) -> usize {
        self.config.frame_len()
    }

    pub fn frame(&self, tracklet: usize, index: usize) -> &[f32] {
        let t = &self.tracklets[tracklet];
        let n = self.frame_len();
        let start = (t.first_frame + index) * n;
        &self.frames[start..start + n]
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        self.tracklets
            .iter()
            .filter(|t| t.split == split)
            .map(|t| t.id)
            .collect()
    }

    /// Training identities are `0..num_identities`; these index the classifier.
    pub fn num_train_identities(&self) -> usize {
        self.config.num_identities
    }

    /// Train tracklets grouped by identity.
    pub fn train_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_train_identities()];
        for t in &self.tracklets {
            if let (Split::Train, Some(id)) = (t.split, t.identity) {
                groups[id].push(t.id);
            }
        }
        groups
    }

    pub fn re_labels(&self, tracklet: usize) -> [f64; D_RE_ATTR] {
        match self.tracklets[tracklet].identity {
            Some(id) => self.identities[id].re_labels(),
            None => [0.0; D_RE_ATTR],
        }
    }
}

struct Palette {
    colors: [[f64; 3]; COLORS],
    skin: [f64; 3],
    hair: [f64; 3],
    bag: [f64; 3],
    occluder: [f64; 3],
    /// Background base level range and per-pixel noise amplitude.
    bg_base: (f64, f64),
    bg_noise: f64,
    bg_stripes: bool,
}

fn palette(style: Style) -> Palette {
    match style {
        Style::A => Palette {
            colors: [
                [0.85, 0.15, 0.15],
                [0.15, 0.70, 0.20],
                [0.15, 0.25, 0.85],
                [0.90, 0.85, 0.20],
                [0.92, 0.92, 0.92],
            ],
            skin: [0.85, 0.65, 0.50],
            hair: [0.20, 0.12, 0.08],
            bag: [0.45, 0.30, 0.15],
            occluder: [0.40, 0.40, 0.40],
            bg_base: (0.25, 0.55),
            bg_noise: 0.08,
            bg_stripes: false,
        },
        Style::B => Palette {
            colors: [
                [0.70, 0.25, 0.35],
                [0.30, 0.60, 0.45],
                [0.30, 0.35, 0.70],
                [0.80, 0.65, 0.30],
                [0.75, 0.78, 0.82],
            ],
            skin: [0.75, 0.58, 0.48],
            hair: [0.30, 0.22, 0.15],
            bag: [0.25, 0.25, 0.30],
            occluder: [0.60, 0.55, 0.50],
            bg_base: (0.15, 0.70),
            bg_noise: 0.15,
            bg_stripes: true,
        },
    }
}

const CAMERA_GAIN: [f64; 4] = [1.0, 0.82, 1.12, 0.9];
const CAMERA_SHIFT: [[f64; 3]; 4] = [
    [0.0, 0.0, 0.0],
    [0.04, 0.0, -0.04],
    [-0.03, 0.02, 0.03],
    [0.0, -0.03, 0.02],
];

/// Pre-drawn per-tracklet background.
struct Background {
    pixels: Vec<f64>,
}

fn background(seed: u64, pal: &Palette, h: usize, w: usize) -> Background {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // grey-ish scene so clothing colours carry the identity
    let grey = rng.random_range(pal.bg_base.0..pal.bg_base.1);
    let base: [f64; 3] = core::array::from_fn(|_| grey + rng.random_range(-0.04..0.04));
    let period = rng.random_range(3..7usize);
    let mut pixels = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let stripe = if pal.bg_stripes && (x / period) % 2 == 0 { 0.1 } else { 0.0 };
            for c in 0..3 {
                let n: f64 = rng.random_range(-1.0..1.0);
                pixels[(c * h + y) * w + x] = base[c] + stripe + pal.bg_noise * n;
            }
        }
    }
    Background { pixels }
}

/// Reflect `x` into `0..=span` (triangle wave).
fn bounce(x: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span;
    let r = x % period;
    if r <= span {
        r
    } else {
        period - r
    }
}

fn fill(img: &mut [f64], h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize, rgb: [f64; 3]) {
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            for c in 0..3 {
                img[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
}

fn render_frame(
    cfg: &GenConfig,
    pal: &Palette,
    bg: &Background,
    person: Option<&IdentitySpec>,
    t: &TrackletSpec,
    frame: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let mut img = bg.pixels.clone();
    if let Some(p) = person {
        let tinted = |rgb: [f64; 3]| -> [f64; 3] { core::array::from_fn(|c| rgb[c] * p.tint[c]) };
        let pose_width = match t.pose {
            Pose::Front | Pose::Back => 1.0,
            Pose::Side => 0.6,
        };
        let bw = ((p.width * w as f64 * pose_width) as usize).max(3);
        let span = w - bw;
        let x0 = bounce(t.start_x + frame * t.motion.speed(), span);
        let x1 = x0 + bw;
        let head_h = h / 8;
        let top = h / 16;
        let torso_h = (p.torso * h as f64) as usize;
        let legs_h = (p.legs * h as f64) as usize;
        let torso_y = top + head_h;
        let legs_y = torso_y + torso_h;
        let head_w = (bw / 2).max(2);
        let hx = x0 + (bw - head_w) / 2;
        // back view shows hair instead of a face
        let face = if t.pose == Pose::Back { pal.hair } else { pal.skin };
        fill(&mut img, h, w, top, torso_y, hx, hx + head_w, face);
        if p.gender == 1 {
            // long hair down to the shoulders
            fill(&mut img, h, w, top, torso_y + head_h / 2, hx, hx + 1, pal.hair);
            fill(&mut img, h, w, top, torso_y + head_h / 2, hx + head_w - 1, hx + head_w, pal.hair);
        }
        fill(&mut img, h, w, torso_y, legs_y, x0, x1, tinted(pal.colors[p.top_color]));
        let bottom = tinted(pal.colors[p.bottom_color]);
        // how far the feet spread: none when standing, a step when walking,
        // a wide alternating stride when running
        let stride = match t.motion {
            Motion::Standing => 0,
            Motion::Walking => 1,
            Motion::Running => 2 + frame % 2,
        };
        let (foot_y, lower_h) = (legs_y + legs_h / 2, legs_h - legs_h / 2);
        if p.gender == 1 {
            // a skirt: one block, then two thin legs
            let skirt = legs_h / 2;
            fill(&mut img, h, w, legs_y, legs_y + skirt, x0, x1, bottom);
            let leg_w = (bw / 4).max(1);
            let (l0, r1) = ((x0 + 1).saturating_sub(stride), x1 - 1 + stride);
            fill(&mut img, h, w, legs_y + skirt, legs_y + legs_h, l0, l0 + leg_w, pal.skin);
            fill(&mut img, h, w, legs_y + skirt, legs_y + legs_h, r1 - leg_w, r1, pal.skin);
        } else {
            let leg_w = (bw * 2 / 5).max(1);
            fill(&mut img, h, w, legs_y, foot_y, x0, x0 + leg_w, bottom);
            fill(&mut img, h, w, legs_y, foot_y, x1 - leg_w, x1, bottom);
            let (l0, r1) = (x0.saturating_sub(stride), x1 + stride);
            fill(&mut img, h, w, foot_y, foot_y + lower_h, l0, l0 + leg_w, bottom);
            fill(&mut img, h, w, foot_y, foot_y + lower_h, r1 - leg_w, r1, bottom);
        }
        if p.bag {
            let bag_h = (torso_h / 2).max(2);
            let bag_w = (bw / 3).max(2);
            let by = torso_y + torso_h / 3;
            let (bx0, bx1) = match t.pose {
                Pose::Front => (x1.saturating_sub(bag_w / 2), x1 + bag_w / 2),
                Pose::Back => (x0.saturating_sub(bag_w / 2), x0 + bag_w / 2),
                Pose::Side => (x0 + bw / 2 - bag_w / 2, x0 + bw / 2 + bag_w / 2 + 1),
            };
            fill(&mut img, h, w, by, by + bag_h, bx0, bx1, pal.bag);
        }
    }
    if t.occluded {
        let y0 = h / 2 + h / 8;
        fill(&mut img, h, w, y0, y0 + h / 6, 0, w, pal.occluder);
    }
    let cam = t.camera % CAMERA_GAIN.len();
    for c in 0..3 {
        for v in &mut img[c * h * w..(c + 1) * h * w] {
            let n: f64 = rng.random_range(-1.0..1.0);
            *v = (*v * CAMERA_GAIN[cam] + CAMERA_SHIFT[cam][c] + 0.02 * n).clamp(0.0, 1.0);
        }
    }
    img
}

fn draw_identity(id: usize, combo: usize, rng: &mut ChaCha8Rng) -> IdentitySpec {
    IdentitySpec {
        id,
        gender: combo % GENDERS,
        top_color: (combo / GENDERS) % COLORS,
        bottom_color: (combo / (GENDERS * COLORS)) % COLORS,
        bag: (combo / (GENDERS * COLORS * COLORS)) % 2 == 1,
        torso: rng.random_range(0.28..0.36),
        legs: rng.random_range(0.30..0.40),
        width: rng.random_range(0.35..0.55),
        tint: core::array::from_fn(|_| rng.random_range(0.92..1.08)),
    }
}

/// Generate a dataset. The same config always yields the same bytes.
///
/// Identities get distinct attribute combinations while fewer than 100 are
/// requested, and distinct clothing colour pairs while fewer than 26 are.
/// Within an identity the pose cycles through all three values so nuisance
/// labels always vary across its tracklets.
pub fn gen_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let combos_total = GENDERS * COLORS * COLORS * 2;
    let people = cfg.num_identities + cfg.unmatched_identities;
    let mut shuffled: Vec<usize> = (0..combos_total).collect();
    shuffled.shuffle(&mut rng);
    // clothing colour pairs are used up before any pair repeats
    let colours = |c: usize| (c / GENDERS) % (COLORS * COLORS);
    let mut seen = [false; COLORS * COLORS];
    let (mut combos, mut rest) = (Vec::with_capacity(combos_total), Vec::new());
    for c in shuffled {
        if core::mem::replace(&mut seen[colours(c)], true) {
            rest.push(c);
        } else {
            combos.push(c);
        }
    }
    combos.extend(rest);
    let identities: Vec<IdentitySpec> = (0..people)
        .map(|i| {
            let combo = if i < combos_total { combos[i] } else { rng.random_range(0..combos_total) };
            draw_identity(i, combo, &mut rng)
        })
        .collect();

    let (n_query, n_gallery) = cfg.held_out();
    let mut specs = Vec::new();
    let mut next_frame = 0;
    let mut push = |identity: Option<usize>, k: usize, split: Split, rng: &mut ChaCha8Rng| {
        let pose_offset = identity.unwrap_or(0);
        let length = rng.random_range(cfg.min_length..=cfg.max_length);
        let spec = TrackletSpec {
            id: specs.len(),
            identity,
            pose: Pose::ALL[(pose_offset + k) % 3],
            motion: Motion::ALL[rng.random_range(0..3)],
            occluded: rng.random_bool(0.25),
            camera: k % cfg.cameras,
            background_seed: rng.random(),
            length,
            start_x: rng.random_range(0..cfg.frame_width),
            split,
            first_frame: next_frame,
        };
        next_frame += length;
        specs.push(spec);
    };
    for id in 0..cfg.num_identities {
        for k in 0..cfg.tracklets_per_identity {
            let split = if k < n_query {
                Split::Query
            } else if k < n_query + n_gallery {
                Split::Gallery
            } else {
                Split::Train
            };
            push(Some(id), k, split, &mut rng);
        }
    }
    for id in cfg.num_identities..people {
        for k in 0..2 {
            push(Some(id), k, Split::Query, &mut rng);
        }
    }
    for k in 0..cfg.distractors {
        push(None, k, Split::Gallery, &mut rng);
    }

    let pal = palette(cfg.style);
    let mut frames = Vec::with_capacity(next_frame * cfg.frame_len());
    for t in &specs {
        let bg = background(t.background_seed, &pal, cfg.frame_height, cfg.frame_width);
        let mut frame_rng = ChaCha8Rng::seed_from_u64(t.background_seed ^ 0x9e37_79b9_7f4a_7c15);
        let person = t.identity.map(|i| &identities[i]);
        for f in 0..t.length {
            let img = render_frame(cfg, &pal, &bg, person, t, f, &mut frame_rng);
            frames.extend(img.iter().map(|&v| v as f32));
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        identities,
        tracklets: specs,
        frames,
    })
}

/// Pick `t` frame indices from a clip of `len` frames: the clip is cut into
/// `t` equal chunks and one frame is drawn uniformly from each. Clips shorter
/// than `t` are padded by cycling through their frames.
pub fn constrained_random_sample<R: Rng + ?Sized>(len: usize, t: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyTracklet);
    }
    if t == 0 {
        return Err(config_err!("cannot sample zero frames"));
    }
    if len < t {
        return Ok((0..t).map(|i| i % len).collect());
    }
    Ok((0..t)
        .map(|i| {
            let lo = i * len / t;
            let hi = (i + 1) * len / t;
            rng.random_range(lo..hi)
        })
        .collect())
}

/// A mini-batch of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletBatch {
    /// `[B×T×3×H×W]`.
    pub frames: Tensor,
    pub labels: Vec<usize>,
    /// `[B×14]`.
    pub y_re: Tensor,
    /// `[B×7]`.
    pub y_ir: Tensor,
    pub cameras: Vec<usize>,
    pub tracklets: Vec<usize>,
}

impl TrackletBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Both attribute target blocks side by side, `[B×21]`.
    pub fn y_attr(&self) -> Tensor {
        let b = self.len();
        let mut data = Vec::with_capacity(b * D_ATTR);
        for i in 0..b {
            data.extend_from_slice(self.y_re.row(i));
            data.extend_from_slice(self.y_ir.row(i));
        }
        Tensor::new(&[b, D_ATTR], data).expect("attribute rows")
    }
}

/// Assemble clips of `t` frames for the given tracklets. Labels are the
/// identity ids (distractors get `usize::MAX`).
pub fn make_batch<R: Rng + ?Sized>(ds: &Dataset, tracklets: &[usize], t: usize, rng: &mut R) -> Result<TrackletBatch> {
    let cfg = &ds.config;
    let b = tracklets.len();
    let fl = ds.frame_len();
    let mut frames = Vec::with_capacity(b * t * fl);
    let mut y_re = Vec::with_capacity(b * D_RE_ATTR);
    let mut y_ir = Vec::with_capacity(b * D_IR_ATTR);
    let mut labels = Vec::with_capacity(b);
    let mut cameras = Vec::with_capacity(b);
    for &i in tracklets {
        let spec = &ds.tracklets[i];
        for f in constrained_random_sample(spec.length, t, rng)? {
            frames.extend(ds.frame(i, f).iter().map(|&v| v as f64));
        }
        y_re.extend_from_slice(&ds.re_labels(i));
        y_ir.extend_from_slice(&spec.ir_labels());
        labels.push(spec.identity.unwrap_or(usize::MAX));
        cameras.push(spec.camera);
    }
    Ok(TrackletBatch {
        frames: Tensor::new(&[b, t, 3, cfg.frame_height, cfg.frame_width], frames)?,
        labels,
        y_re: Tensor::new(&[b, D_RE_ATTR], y_re)?,
        y_ir: Tensor::new(&[b, D_IR_ATTR], y_ir)?,
        cameras,
        tracklets: tracklets.to_vec(),
    })
}

/// Identity-balanced batches: `p` identities × `k` tracklets each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkSampler {
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    /// Tracklet index lists for one epoch. Identities are visited in shuffled
    /// order; the last batch is topped up with random other identities so
    /// every batch holds exactly `p` distinct identities. Identities with
    /// fewer than `k` tracklets are sampled with replacement.
    pub fn epoch<R: Rng + ?Sized>(&self, groups: &[Vec<usize>], rng: &mut R) -> Result<Vec<Vec<usize>>> {
        if self.p == 0 || self.k == 0 {
            return Err(config_err!("P and K must be positive"));
        }
        let mut ids: Vec<usize> = (0..groups.len()).filter(|&i| !groups[i].is_empty()).collect();
        if ids.len() < self.p {
            return Err(config_err!(
                "{} identities have training tracklets, need P = {}",
                ids.len(),
                self.p
            ));
        }
        ids.shuffle(rng);
        let mut batches = Vec::new();
        for chunk in ids.chunks(self.p) {
            let mut chosen = chunk.to_vec();
            while chosen.len() < self.p {
                let extra = ids[rng.random_range(0..ids.len())];
                if !chosen.contains(&extra) {
                    chosen.push(extra);
                }
            }
            let mut batch = Vec::with_capacity(self.p * self.k);
            for id in chosen {
                let g = &groups[id];
                if g.len() >= self.k {
                    let mut pool = g.clone();
                    pool.shuffle(rng);
                    batch.extend_from_slice(&pool[..self.k]);
                } else {
                    batch.extend((0..self.k).map(|_| g[rng.random_range(0..g.len())]));
                }
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}
