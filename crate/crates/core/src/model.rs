//! The five-branch attribute-assisted network.
//!
//! A shared trunk feeds three residual branches (ID-relevant attributes,
//! identity, ID-irrelevant attributes). Each attribute branch drives a
//! cross-attention mask over a reduced copy of the identity map ([`Asre`]),
//! and the pooled features are fused into the retrieval descriptor.
//!
//! Frames of every clip are processed as one `N = B·T` image batch; the
//! per-clip temporal mean happens after spatial pooling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    spatial_pool, temporal_pool, BatchNorm, Bindings, Conv1x1, Conv3x3, Linear, Mode,
    ParamGroup, ParamId, ParamRegistry, ResidualBlock,
};
use crate::synth::{D_IR_ATTR, D_RE_ATTR};
use crate::tensor::{Tape, Tensor, Var};

/// How the branch features are combined into the final descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Only the ID-relevant attribute feature joins the descriptor.
    A,
    /// Both attribute features are merged by one FC before joining.
    B,
}

/// Which enhanced identity features enter the descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub identity: bool,
    pub id_relevant: bool,
    pub id_irrelevant: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        identity: true,
        id_relevant: true,
        id_irrelevant: true,
    };

    pub fn count(&self) -> usize {
        self.identity as usize + self.id_relevant as usize + self.id_irrelevant as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Trunk width `C`; must be a positive multiple of 4.
    pub channels: usize,
    /// Number of training identities `M`.
    pub num_identities: usize,
    pub re_attr_dims: usize,
    pub ir_attr_dims: usize,
    pub fusion: Fusion,
    pub use_asre: bool,
    pub branches: Branches,
    /// Fuse the attribute feature(s) into the descriptor.
    pub fuse_attributes: bool,
    pub alpha_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_height: 64,
            frame_width: 32,
            channels: 32,
            num_identities: 20,
            re_attr_dims: D_RE_ATTR,
            ir_attr_dims: D_IR_ATTR,
            fusion: Fusion::B,
            use_asre: true,
            branches: Branches::ALL,
            fuse_attributes: true,
            alpha_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(config_err!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        if self.frame_height % 4 != 0 || self.frame_width % 4 != 0 || self.frame_height == 0 || self.frame_width == 0 {
            return Err(config_err!(
                "frame extents must be positive multiples of 4, got {}×{}",
                self.frame_height,
                self.frame_width
            ));
        }
        if self.num_identities == 0 || self.re_attr_dims == 0 || self.ir_attr_dims == 0 {
            return Err(config_err!("identity and attribute counts must be positive"));
        }
        if self.branches.count() == 0 && !self.fuse_attributes {
            return Err(config_err!("the fused descriptor would be empty"));
        }
        Ok(())
    }

    pub fn quarter(&self) -> usize {
        self.channels / 4
    }

    /// Width of the fused descriptor.
    pub fn feature_dim(&self) -> usize {
        (self.branches.count() + self.fuse_attributes as usize) * self.quarter()
    }

    /// Spatial extents of the trunk output.
    pub fn map_size(&self) -> (usize, usize) {
        (self.frame_height / 4, self.frame_width / 4)
    }
}

/// Attribute salient-region enhancement: a cross-attention mask computed
/// from an attribute map re-weights an identity map.
#[derive(Clone, Debug)]
pub struct Asre {
    pub query: Conv1x1,
    pub key: Conv1x1,
    pub value: Conv1x1,
    pub mask_bn: BatchNorm,
    pub mask_conv: Conv1x1,
    pub alpha: ParamId,
    pub key_dim: usize,
}

pub struct AsreOutput {
    /// `X_I + α·(M ⊗ X_I)`, `[N×C_I×H×W]`.
    pub out: Var,
    /// Saliency mask in (0, 1), `[N×H×W]`.
    pub mask: Var,
    /// Row-stochastic attention, `[N×HW×HW]`.
    pub attention: Var,
}

impl Asre {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        attr_channels: usize,
        id_channels: usize,
        alpha_init: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let key_dim = id_channels;
        Ok(Self {
            query: Conv1x1::new(reg, &format!("{name}.query"), id_channels, key_dim, rng)?,
            key: Conv1x1::new(reg, &format!("{name}.key"), attr_channels, key_dim, rng)?,
            value: Conv1x1::new(reg, &format!("{name}.value"), attr_channels, id_channels, rng)?,
            mask_bn: BatchNorm::new(reg, &format!("{name}.mask_bn"), id_channels)?,
            mask_conv: Conv1x1::new(reg, &format!("{name}.mask_conv"), id_channels, 1, rng)?,
            alpha: reg.register(
                format!("{name}.alpha"),
                Tensor::vector(vec![alpha_init]),
                ParamGroup::Network,
                false,
            )?,
            key_dim,
        })
    }

    /// Enhance `x_i[N×C_I×H×W]` using `x_a[N×C_A×H×W]`, frame by frame.
    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x_a: Var, x_i: Var) -> Result<AsreOutput> {
        let (sa, si) = (tape.shape(x_a).to_vec(), tape.shape(x_i).to_vec());
        if sa.len() != 4 || si.len() != 4 || sa[0] != si[0] || sa[2..] != si[2..] {
            return Err(shape_err!("ASRE maps {:?} and {:?} must share N, H and W", sa, si));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let hw = h * w;

        let q = self.query.forward(tape, b, x_i)?;
        let q = tape.relu(q);
        let q = tape.reshape(q, &[n, self.key_dim, hw])?;
        let k = self.key.forward(tape, b, x_a)?;
        let k = tape.relu(k);
        let k = tape.reshape(k, &[n, self.key_dim, hw])?;
        // scores[p, q] = Σ_c Q[c, p] K[c, q]
        let scores = tape.matmul_t(q, k, true, false)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(self.key_dim as f64));
        let attention = tape.softmax_rows(scores)?;

        let v = self.value.forward(tape, b, x_a)?;
        let v = tape.reshape(v, &[n, ci, hw])?;
        // X_V = (Att · V)ᵀ laid out channel-major: V[C×HW] · Attᵀ
        let xv = tape.matmul_t(v, attention, false, true)?;
        let xv = tape.reshape(xv, &[n, ci, h, w])?;
        let xv = self.mask_bn.forward(tape, b, xv)?;
        let m = self.mask_conv.forward(tape, b, xv)?;
        let m = tape.sigmoid(m);

        let enhanced = tape.mul(m, x_i)?;
        let alpha = b[self.alpha];
        let scaled = tape.mul(enhanced, alpha)?;
        let out = tape.add(x_i, scaled)?;
        let mask = tape.reshape(m, &[n, h, w])?;
        Ok(AsreOutput { out, mask, attention })
    }
}

/// `f = W₂(pool(X))`, `p = σ(W₁(ReLU(BN(f))))` with independent sigmoid outputs.
#[derive(Clone, Debug)]
pub struct AttrHead {
    pub reduce: Linear,
    pub bn: BatchNorm,
    pub classifier: Linear,
}

impl AttrHead {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_channels: usize,
        feat_dim: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(reg, &format!("{name}.reduce"), in_channels, feat_dim, true, rng)?,
            bn: BatchNorm::new(reg, &format!("{name}.bn"), feat_dim)?,
            classifier: Linear::new(reg, &format!("{name}.classifier"), feat_dim, outputs, true, rng)?,
        })
    }

    /// `x_attr[B·T×C×H×W]` → `(f_attr[B×C/4], p[B×D])`.
    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x_attr: Var, clips: usize) -> Result<(Var, Var)> {
        let pooled = clip_pool(tape, x_attr, clips)?;
        let f = self.reduce.forward(tape, b, pooled)?;
        let h = self.bn.forward(tape, b, f)?;
        let h = tape.relu(h);
        let logits = self.classifier.forward(tape, b, h)?;
        Ok((f, tape.sigmoid(logits)))
    }
}

/// Spatial then temporal mean: `[B·T×C×H×W] → [B×C]`.
pub fn clip_pool(tape: &mut Tape, x: Var, clips: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if clips == 0 || s.is_empty() || s[0] % clips != 0 {
        return Err(shape_err!("{:?} cannot be split into {} clips", s, clips));
    }
    let frames = s[0] / clips;
    let p = spatial_pool(tape, x)?;
    let p = tape.reshape(p, &[clips, frames, s[1]])?;
    temporal_pool(tape, p)
}

/// The three residual branch maps.
#[derive(Clone, Copy, Debug)]
pub struct BranchMaps {
    pub x_re_attr: Var,
    pub x_id: Var,
    pub x_ir_attr: Var,
}

/// Pooled per-clip branch features, each `[B×C/4]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures {
    pub f_re_attr: Var,
    pub f_re_id: Var,
    pub f_id: Var,
    pub f_ir_id: Var,
    pub f_ir_attr: Var,
}

/// FC reductions and concatenation producing `f_final`.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub fusion: Fusion,
    pub branches: Branches,
    pub re_id: Option<Linear>,
    pub id: Option<Linear>,
    pub ir_id: Option<Linear>,
    pub attr: Option<Linear>,
}

impl FusionHead {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let q = cfg.quarter();
        let br = cfg.branches;
        let mk = |on: bool, name: &str, din: usize, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng| -> Result<Option<Linear>> {
            if on {
                Ok(Some(Linear::new(reg, name, din, q, true, rng)?))
            } else {
                Ok(None)
            }
        };
        let attr_in = match cfg.fusion {
            Fusion::A => q,
            Fusion::B => 2 * q,
        };
        Ok(Self {
            fusion: cfg.fusion,
            branches: br,
            re_id: mk(br.id_relevant, "fuse.re_id", q, reg, rng)?,
            id: mk(br.identity, "fuse.id", q, reg, rng)?,
            ir_id: mk(br.id_irrelevant, "fuse.ir_id", q, reg, rng)?,
            attr: mk(cfg.fuse_attributes, "fuse.attr", attr_in, reg, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, f: &BranchFeatures) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        if let Some(l) = &self.re_id {
            parts.push(l.forward(tape, b, f.f_re_id)?);
        }
        if let Some(l) = &self.id {
            parts.push(l.forward(tape, b, f.f_id)?);
        }
        if let Some(l) = &self.ir_id {
            parts.push(l.forward(tape, b, f.f_ir_id)?);
        }
        if let Some(l) = &self.attr {
            let input = match self.fusion {
                Fusion::A => f.f_re_attr,
                Fusion::B => tape.concat(&[f.f_re_attr, f.f_ir_attr], 1)?,
            };
            parts.push(l.forward(tape, b, input)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 1)
    }
}

/// Everything one forward pass produces, as handles on the tape.
pub struct ModelOutput {
    pub bindings: Bindings,
    pub clips: usize,
    pub frames_per_clip: usize,
    pub maps: BranchMaps,
    pub features: BranchFeatures,
    pub f_final: Var,
    /// `f_final` after the BNNeck.
    pub f_neck: Var,
    pub p_re: Var,
    pub p_ir: Var,
    pub logits: Var,
    /// `[B·T×H×W]` masks of the two enhancement modules, when enabled.
    pub mask_re: Option<Var>,
    pub mask_ir: Option<Var>,
}

/// Per-tracklet values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub f_re_attr: Tensor,
    pub f_re_id: Tensor,
    pub f_id: Tensor,
    pub f_ir_id: Tensor,
    pub f_ir_attr: Tensor,
    pub f_final: Tensor,
    pub f_neck: Tensor,
    pub p_re: Tensor,
    pub p_ir: Tensor,
    pub id_logits: Tensor,
}

impl FeatureBundle {
    pub fn all_finite(&self) -> bool {
        [
            &self.f_re_attr,
            &self.f_re_id,
            &self.f_id,
            &self.f_ir_id,
            &self.f_ir_attr,
            &self.f_final,
            &self.f_neck,
            &self.p_re,
            &self.p_ir,
            &self.id_logits,
        ]
        .iter()
        .all(|t| t.all_finite())
    }
}

impl ModelOutput {
    pub fn bundles(&self, tape: &Tape) -> Vec<FeatureBundle> {
        let row = |v: Var, i: usize| Tensor::vector(tape.value(v).row(i).to_vec());
        (0..self.clips)
            .map(|i| FeatureBundle {
                f_re_attr: row(self.features.f_re_attr, i),
                f_re_id: row(self.features.f_re_id, i),
                f_id: row(self.features.f_id, i),
                f_ir_id: row(self.features.f_ir_id, i),
                f_ir_attr: row(self.features.f_ir_attr, i),
                f_final: row(self.f_final, i),
                f_neck: row(self.f_neck, i),
                p_re: row(self.p_re, i),
                p_ir: row(self.p_ir, i),
                id_logits: row(self.logits, i),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AsaNet {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    stem: Conv3x3,
    stem_bn: BatchNorm,
    trunk: ResidualBlock,
    branch_re: ResidualBlock,
    branch_id: ResidualBlock,
    branch_ir: ResidualBlock,
    reduce_re: Conv1x1,
    reduce_ir: Conv1x1,
    reduce_id: Conv1x1,
    asre_re: Option<Asre>,
    asre_ir: Option<Asre>,
    w_re: Linear,
    w_ir: Linear,
    head_re: AttrHead,
    head_ir: AttrHead,
    fusion: FusionHead,
    neck: BatchNorm,
    classifier: Linear,
    centers: ParamId,
    mode: Mode,
}

impl AsaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let c = config.channels;
        let (half, q) = (c / 2, c / 4);
        let rng = &mut rng;
        let r = &mut reg;
        let stem = Conv3x3::new(r, "backbone.stem", 3, c, 2, rng)?;
        let stem_bn = BatchNorm::new(r, "backbone.stem_bn", c)?;
        let trunk = ResidualBlock::new(r, "backbone.res", c, c, rng)?;
        let branch_re = ResidualBlock::new(r, "branch_re", c, half, rng)?;
        let branch_id = ResidualBlock::new(r, "branch_id", c, 2 * c, rng)?;
        let branch_ir = ResidualBlock::new(r, "branch_ir", c, half, rng)?;
        let reduce_re = Conv1x1::new(r, "reduce_re", 2 * c, q, rng)?;
        let reduce_ir = Conv1x1::new(r, "reduce_ir", 2 * c, q, rng)?;
        let reduce_id = Conv1x1::new(r, "reduce_id", 2 * c, q, rng)?;
        let (asre_re, asre_ir) = if config.use_asre {
            (
                Some(Asre::new(r, "asre_re", half, q, config.alpha_init, rng)?),
                Some(Asre::new(r, "asre_ir", half, q, config.alpha_init, rng)?),
            )
        } else {
            (None, None)
        };
        let w_re = Linear::new(r, "w_re", q, q, true, rng)?;
        let w_ir = Linear::new(r, "w_ir", q, q, true, rng)?;
        let head_re = AttrHead::new(r, "head_re", half, q, config.re_attr_dims, rng)?;
        let head_ir = AttrHead::new(r, "head_ir", half, q, config.ir_attr_dims, rng)?;
        let fusion = FusionHead::new(r, &config, rng)?;
        let d = config.feature_dim();
        let neck = BatchNorm::new(r, "neck", d)?;
        let classifier = Linear::new(r, "classifier", d, config.num_identities, false, rng)?;
        let centers = r.register(
            "centers",
            // centers start at the origin and follow their identities' features
            Tensor::zeros(&[config.num_identities, d]),
            ParamGroup::Centers,
            false,
        )?;
        Ok(Self {
            config,
            params: reg,
            stem,
            stem_bn,
            trunk,
            branch_re,
            branch_id,
            branch_ir,
            reduce_re,
            reduce_ir,
            reduce_id,
            asre_re,
            asre_ir,
            w_re,
            w_ir,
            head_re,
            head_ir,
            fusion,
            neck,
            classifier,
            centers,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for bn in self.batch_norms_mut() {
            bn.state.mode = mode;
        }
    }

    pub fn centers(&self) -> ParamId {
        self.centers
    }

    /// Every batch-norm layer in a fixed order.
    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.stem_bn];
        v.extend(self.trunk.batch_norms());
        v.extend(self.branch_re.batch_norms());
        v.extend(self.branch_id.batch_norms());
        v.extend(self.branch_ir.batch_norms());
        v.extend(self.asre_re.iter().map(|a| &a.mask_bn));
        v.extend(self.asre_ir.iter().map(|a| &a.mask_bn));
        v.push(&self.head_re.bn);
        v.push(&self.head_ir.bn);
        v.push(&self.neck);
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.stem_bn];
        v.extend(self.trunk.batch_norms_mut());
        v.extend(self.branch_re.batch_norms_mut());
        v.extend(self.branch_id.batch_norms_mut());
        v.extend(self.branch_ir.batch_norms_mut());
        v.extend(self.asre_re.iter_mut().map(|a| &mut a.mask_bn));
        v.extend(self.asre_ir.iter_mut().map(|a| &mut a.mask_bn));
        v.push(&mut self.head_re.bn);
        v.push(&mut self.head_ir.bn);
        v.push(&mut self.neck);
        v
    }

    /// Shared trunk, `[N×3×H₀×W₀] → [N×C×H₀/4×W₀/4]`.
    pub fn backbone_forward(&mut self, tape: &mut Tape, b: &Bindings, frames: Var) -> Result<Var> {
        let s = tape.shape(frames);
        let cfg = &self.config;
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.frame_height || s[3] != cfg.frame_width {
            return Err(shape_err!(
                "frames {:?} do not match N×3×{}×{}",
                s,
                cfg.frame_height,
                cfg.frame_width
            ));
        }
        let x = self.stem.forward(tape, b, frames)?;
        let x = self.stem_bn.forward(tape, b, x)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2(x)?;
        self.trunk.forward(tape, b, x)
    }

    pub fn branches_forward(&mut self, tape: &mut Tape, b: &Bindings, origin: Var) -> Result<BranchMaps> {
        Ok(BranchMaps {
            x_re_attr: self.branch_re.forward(tape, b, origin)?,
            x_id: self.branch_id.forward(tape, b, origin)?,
            x_ir_attr: self.branch_ir.forward(tape, b, origin)?,
        })
    }

    /// `f_ID`: 1×1 reduction of the identity map, pooled per clip.
    pub fn id_feature(&self, tape: &mut Tape, b: &Bindings, x_id: Var, clips: usize) -> Result<Var> {
        let x = self.reduce_id.forward(tape, b, x_id)?;
        clip_pool(tape, x, clips)
    }

    /// BNNeck then the identity classifier; returns `(f_neck, logits)`.
    pub fn id_logits(&mut self, tape: &mut Tape, b: &Bindings, f_final: Var) -> Result<(Var, Var)> {
        let h = self.neck.forward(tape, b, f_final)?;
        Ok((h, self.classifier.forward(tape, b, h)?))
    }

    /// Forward `frames[B×T×3×H₀×W₀]` with fresh parameter leaves.
    pub fn forward(&mut self, tape: &mut Tape, frames: &Tensor) -> Result<ModelOutput> {
        let b = self.params.bind(tape);
        self.forward_with(tape, b, frames)
    }

    /// Forward with caller-provided parameter handles (in registry order).
    pub fn forward_with(&mut self, tape: &mut Tape, b: Bindings, frames: &Tensor) -> Result<ModelOutput> {
        let s = frames.shape();
        if s.len() != 5 || s[0] == 0 || s[1] == 0 {
            return Err(shape_err!("expected non-empty B×T×3×H×W frames, got {:?}", s));
        }
        let (clips, t) = (s[0], s[1]);
        let flat = frames.clone().reshape(&[clips * t, s[2], s[3], s[4]])?;
        let x = tape.constant(flat);
        let origin = self.backbone_forward(tape, &b, x)?;
        let maps = self.branches_forward(tape, &b, origin)?;

        let xi_re = self.reduce_re.forward(tape, &b, maps.x_id)?;
        let xi_ir = self.reduce_ir.forward(tape, &b, maps.x_id)?;
        let (x_re_id, mask_re) = match &mut self.asre_re {
            Some(a) => {
                let o = a.forward(tape, &b, maps.x_re_attr, xi_re)?;
                (o.out, Some(o.mask))
            }
            None => (xi_re, None),
        };
        let (x_ir_id, mask_ir) = match &mut self.asre_ir {
            Some(a) => {
                let o = a.forward(tape, &b, maps.x_ir_attr, xi_ir)?;
                (o.out, Some(o.mask))
            }
            None => (xi_ir, None),
        };
        let p = clip_pool(tape, x_re_id, clips)?;
        let f_re_id = self.w_re.forward(tape, &b, p)?;
        let p = clip_pool(tape, x_ir_id, clips)?;
        let f_ir_id = self.w_ir.forward(tape, &b, p)?;
        let f_id = self.id_feature(tape, &b, maps.x_id, clips)?;
        let (f_re_attr, p_re) = self.head_re.forward(tape, &b, maps.x_re_attr, clips)?;
        let (f_ir_attr, p_ir) = self.head_ir.forward(tape, &b, maps.x_ir_attr, clips)?;
        let features = BranchFeatures {
            f_re_attr,
            f_re_id,
            f_id,
            f_ir_id,
            f_ir_attr,
        };
        let f_final = self.fusion.forward(tape, &b, &features)?;
        let (f_neck, logits) = self.id_logits(tape, &b, f_final)?;
        Ok(ModelOutput {
            bindings: b,
            clips,
            frames_per_clip: t,
            maps,
            features,
            f_final,
            f_neck,
            p_re,
            p_ir,
            logits,
            mask_re,
            mask_ir,
        })
    }

    /// One [`FeatureBundle`] per tracklet of `frames`.
    pub fn forward_full(&mut self, frames: &Tensor) -> Result<Vec<FeatureBundle>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, frames)?;
        Ok(out.bundles(&tape))
    }

    pub fn asre_re_mut(&mut self) -> Option<&mut Asre> {
        self.asre_re.as_mut()
    }

    pub fn fusion_head(&self) -> &FusionHead {
        &self.fusion
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNormState;

    fn micro() -> ModelConfig {
        ModelConfig {
            frame_height: 8,
            frame_width: 8,
            channels: 8,
            num_identities: 3,
            ..ModelConfig::default()
        }
    }

    fn frames(b: usize, t: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let n = b * t * 3 * cfg.frame_height * cfg.frame_width;
        let data = (0..n).map(|i| libm::sin(i as f64 * 0.61 + seed as f64)).collect();
        Tensor::new(&[b, t, 3, cfg.frame_height, cfg.frame_width], data).unwrap()
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let cfg = ModelConfig {
            channels: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(AsaNet::new(cfg, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let mut net = AsaNet::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &frames(2, 6, &cfg, 0)).unwrap();
        assert_eq!(tape.shape(out.maps.x_re_attr), &[12, 16, 16, 8]);
        assert_eq!(tape.shape(out.maps.x_id), &[12, 64, 16, 8]);
        assert_eq!(tape.shape(out.maps.x_ir_attr), &[12, 16, 16, 8]);
        assert_eq!(tape.shape(out.f_final), &[2, 32]);
        assert_eq!(tape.shape(out.features.f_id), &[2, 8]);
        assert_eq!(tape.shape(out.p_re), &[2, 14]);
        assert_eq!(tape.shape(out.p_ir), &[2, 7]);
        assert_eq!(tape.shape(out.logits), &[2, 20]);
        assert_eq!(tape.shape(out.mask_re.unwrap()), &[12, 16, 8]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = micro();
        let mut net = AsaNet::new(cfg.clone(), 3).unwrap();
        net.set_mode(Mode::Eval);
        let f = frames(3, 2, &cfg, 1);
        assert_eq!(net.forward_full(&f).unwrap(), net.forward_full(&f).unwrap());
    }

    #[test]
    fn asre_alpha_zero_is_identity_and_saturated_mask_doubles() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut asre = Asre::new(&mut reg, "a", 4, 2, 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = reg.bind(&mut tape);
        let xa = tape.constant(Tensor::new(&[2, 4, 2, 2], (0..32).map(|i| (i as f64).sin()).collect()).unwrap());
        let xi = tape.constant(Tensor::new(&[2, 2, 2, 2], (0..16).map(|i| (i as f64).cos()).collect()).unwrap());
        let o = asre.forward(&mut tape, &b, xa, xi).unwrap();
        assert_eq!(tape.value(o.out), tape.value(xi));

        reg.get_mut(asre.alpha).value = Tensor::vector(vec![1.0]);
        reg.get_mut(asre.mask_conv.bias).value = Tensor::vector(vec![1e3]);
        let mut tape = Tape::new();
        let b = reg.bind(&mut tape);
        let xa = tape.constant(Tensor::new(&[2, 4, 2, 2], (0..32).map(|i| (i as f64).sin()).collect()).unwrap());
        let xi = tape.constant(Tensor::new(&[2, 2, 2, 2], (0..16).map(|i| (i as f64).cos()).collect()).unwrap());
        let o = asre.forward(&mut tape, &b, xa, xi).unwrap();
        for (y, x) in tape.value(o.out).data().iter().zip(tape.value(xi).data()) {
            assert_eq!(*y, 2.0 * x);
        }
    }

    #[test]
    fn asre_single_pixel_attention_is_one() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut asre = Asre::new(&mut reg, "a", 4, 2, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = reg.bind(&mut tape);
        let xa = tape.constant(Tensor::full(&[2, 4, 1, 1], 0.3));
        let xi = tape.constant(Tensor::full(&[2, 2, 1, 1], -0.2));
        let o = asre.forward(&mut tape, &b, xa, xi).unwrap();
        assert_eq!(tape.value(o.attention).data(), &[1.0, 1.0]);
    }

    #[test]
    fn asre_spatial_mismatch() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut asre = Asre::new(&mut reg, "a", 4, 2, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = reg.bind(&mut tape);
        let xa = tape.constant(Tensor::zeros(&[2, 4, 2, 2]));
        let xi = tape.constant(Tensor::zeros(&[2, 2, 2, 1]));
        assert!(asre.forward(&mut tape, &b, xa, xi).is_err());
    }

    #[test]
    fn id_branch_perturbation_leaves_attribute_maps_unchanged() {
        let cfg = micro();
        let mut net = AsaNet::new(cfg.clone(), 9).unwrap();
        net.set_mode(Mode::Eval);
        let f = frames(2, 2, &cfg, 2);
        let mut t1 = Tape::new();
        let o1 = net.forward(&mut t1, &f).unwrap();
        let id = net.params.id("branch_id.conv1.weight").unwrap();
        for w in net.params.get_mut(id).value.data_mut() {
            *w += 0.5;
        }
        let mut t2 = Tape::new();
        let o2 = net.forward(&mut t2, &f).unwrap();
        assert_eq!(t1.value(o1.maps.x_re_attr), t2.value(o2.maps.x_re_attr));
        assert_eq!(t1.value(o1.maps.x_ir_attr), t2.value(o2.maps.x_ir_attr));
        assert_ne!(t1.value(o1.maps.x_id), t2.value(o2.maps.x_id));
    }

    #[test]
    fn id_logits_identity_when_neck_is_identity() {
        let mut reg = ParamRegistry::new();
        let mut neck = BatchNorm::new(&mut reg, "neck", 3).unwrap();
        neck.state = BatchNormState {
            running_mean: vec![0.0; 3],
            running_var: vec![1.0 - crate::nn::BN_EPS; 3],
            mode: Mode::Eval,
            ..BatchNormState::new(3)
        };
        let w = reg
            .register(
                "w",
                Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]),
                ParamGroup::Network,
                true,
            )
            .unwrap();
        let mut tape = Tape::new();
        let b = reg.bind(&mut tape);
        let f = tape.constant(Tensor::from_rows(&[&[0.5, -1.0, 2.0]]));
        let h = neck.forward(&mut tape, &b, f).unwrap();
        let y = crate::nn::fc(&mut tape, h, b[w], None).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
