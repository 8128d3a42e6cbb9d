//! Spatial and channel relation modules and the ways of combining them.
//!
//! The spatial module scores every pair of positions `(i, j)` of a feature
//! map with an embedded dot product `relu(u(x_i)ᵀ v(x_j))` and appends the
//! resulting `HW×H×W` relation volume to the input. The channel module pools
//! each channel to a scalar, embeds it, scores channel pairs the same way,
//! normalises each row with a softmax, and uses that `C×C` map to remix the
//! input's channels.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    None,
    SrmOnly,
    CrmOnly,
    Serial,
    Parallel,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 5] = [
        IntegrationMode::None,
        IntegrationMode::CrmOnly,
        IntegrationMode::SrmOnly,
        IntegrationMode::Parallel,
        IntegrationMode::Serial,
    ];

    pub fn uses_spatial(self) -> bool {
        matches!(
            self,
            IntegrationMode::SrmOnly | IntegrationMode::Serial | IntegrationMode::Parallel
        )
    }

    pub fn uses_channel(self) -> bool {
        matches!(
            self,
            IntegrationMode::CrmOnly | IntegrationMode::Serial | IntegrationMode::Parallel
        )
    }

    /// Channel count after integration for a `C`-channel map with `hw` positions.
    pub fn output_channels(self, channels: usize, hw: usize) -> usize {
        match self {
            IntegrationMode::None | IntegrationMode::CrmOnly => channels,
            IntegrationMode::SrmOnly | IntegrationMode::Serial => channels + hw,
            IntegrationMode::Parallel => 2 * channels + hw,
        }
    }

    /// Row label used in ablation tables.
    pub fn model_name(self) -> &'static str {
        match self {
            IntegrationMode::None => "Baseline FCN",
            IntegrationMode::CrmOnly => "RA-FCN-crm",
            IntegrationMode::SrmOnly => "RA-FCN-srm",
            IntegrationMode::Parallel => "P-RA-FCN",
            IntegrationMode::Serial => "S-RA-FCN",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationMode::None => "none",
            IntegrationMode::SrmOnly => "srm_only",
            IntegrationMode::CrmOnly => "crm_only",
            IntegrationMode::Serial => "serial",
            IntegrationMode::Parallel => "parallel",
        }
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for IntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IntegrationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown integration mode {s:?}")))
    }
}

/// Embedding weights of one spatial relation module, built for a fixed
/// `H×W` resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRelationParams {
    pub w_us: Tensor,
    pub b_us: Option<Tensor>,
    pub w_vs: Tensor,
    pub b_vs: Option<Tensor>,
    pub resolution: (usize, usize),
}

/// Embedding weights of one channel relation module. Column `p` of `w_uc`
/// embeds the pooled descriptor of channel `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRelationParams {
    pub w_uc: Tensor,
    pub b_uc: Option<Tensor>,
    pub w_vc: Tensor,
    pub b_vc: Option<Tensor>,
}

fn check_pair(w_u: &Tensor, b_u: &Option<Tensor>, w_v: &Tensor, b_v: &Option<Tensor>) -> Result<()> {
    if w_u.shape() != w_v.shape() {
        return Err(Error::dim("relation embeddings", w_u.shape(), w_v.shape()));
    }
    let [embed, _] = *w_u.shape() else {
        return Err(Error::InvalidShape {
            shape: w_u.shape().to_vec(),
            reason: "embedding weight must be C_e×C".into(),
        });
    };
    for b in [b_u, b_v].into_iter().flatten() {
        if b.shape() != [embed] {
            return Err(Error::dim("relation bias", b.shape(), &[embed]));
        }
    }
    Ok(())
}

impl SpatialRelationParams {
    pub fn new(
        w_us: Tensor,
        b_us: Option<Tensor>,
        w_vs: Tensor,
        b_vs: Option<Tensor>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        check_pair(&w_us, &b_us, &w_vs, &b_vs)?;
        Ok(Self {
            w_us,
            b_us,
            w_vs,
            b_vs,
            resolution,
        })
    }

    /// Glorot-uniform weights, zero biases (or none when `bias` is false).
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        embed: usize,
        resolution: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w_us = glorot_uniform(&[embed, channels], rng);
        let w_vs = glorot_uniform(&[embed, channels], rng);
        let b = bias.then(|| Tensor::zeros(&[embed]));
        Self {
            w_us,
            b_us: b.clone(),
            w_vs,
            b_vs: b,
            resolution,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_us.shape()[1]
    }

    pub fn embed(&self) -> usize {
        self.w_us.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> SpatialVars {
        let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        SpatialVars {
            w_u: put(&self.w_us),
            b_u: self.b_us.as_ref().map(&mut put),
            w_v: put(&self.w_vs),
            b_v: self.b_vs.as_ref().map(&mut put),
            resolution: self.resolution,
        }
    }
}

impl ChannelRelationParams {
    pub fn new(w_uc: Tensor, b_uc: Option<Tensor>, w_vc: Tensor, b_vc: Option<Tensor>) -> Result<Self> {
        check_pair(&w_uc, &b_uc, &w_vc, &b_vc)?;
        Ok(Self { w_uc, b_uc, w_vc, b_vc })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, embed: usize, bias: bool, rng: &mut R) -> Self {
        let w_uc = glorot_uniform(&[embed, channels], rng);
        let w_vc = glorot_uniform(&[embed, channels], rng);
        let b = bias.then(|| Tensor::zeros(&[embed]));
        Self {
            w_uc,
            b_uc: b.clone(),
            w_vc,
            b_vc: b,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_uc.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ChannelVars {
        let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        ChannelVars {
            w_u: put(&self.w_uc),
            b_u: self.b_uc.as_ref().map(&mut put),
            w_v: put(&self.w_vc),
            b_v: self.b_vc.as_ref().map(&mut put),
        }
    }
}

/// Spatial relation parameters recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub w_u: Var,
    pub b_u: Option<Var>,
    pub w_v: Var,
    pub b_v: Option<Var>,
    pub resolution: (usize, usize),
}

/// Channel relation parameters recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ChannelVars {
    pub w_u: Var,
    pub b_u: Option<Var>,
    pub w_v: Var,
    pub b_v: Option<Var>,
}

/// `HW×H×W` relation volume: channel `j` at position `i = h·W + w` holds
/// `relu(u(x_i)ᵀ v(x_j))`.
pub fn spatial_relation_feature(g: &mut Graph, x: Var, p: &SpatialVars) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    if (h, w) != p.resolution {
        return Err(Error::dim(
            "spatial relation resolution",
            &[h, w],
            &[p.resolution.0, p.resolution.1],
        ));
    }
    let hw = h * w;
    let u = g.conv1x1(x, p.w_u, p.b_u)?;
    let v = g.conv1x1(x, p.w_v, p.b_v)?;
    let embed = g.shape(u)[0];
    let u = g.reshape(u, &[embed, hw])?;
    let v = g.reshape(v, &[embed, hw])?;
    let vt = g.transpose2d(v)?;
    // scores[j, i] = v(x_j)ᵀ u(x_i)
    let scores = g.matmul(vt, u)?;
    let scores = g.relu(scores)?;
    g.reshape(scores, &[hw, h, w])
}

/// `[x, SR(x)]`, shape `(C+HW)×H×W`.
pub fn spatial_relation_augment(g: &mut Graph, x: Var, p: &SpatialVars) -> Result<Var> {
    let sr = spatial_relation_feature(g, x, p)?;
    g.concat_channels(&[x, sr])
}

/// Pre-softmax `C×C` channel affinities `raw[p,q] = e_u[:,p]ᵀ e_v[:,q]`.
pub fn channel_relation_scores(g: &mut Graph, x: Var, p: &ChannelVars) -> Result<Var> {
    let descriptor = g.global_avg_pool(x)?;
    let e_u = g.column_embed(descriptor, p.w_u, p.b_u)?;
    let e_v = g.column_embed(descriptor, p.w_v, p.b_v)?;
    let e_ut = g.transpose2d(e_u)?;
    g.matmul(e_ut, e_v)
}

/// Row-normalised channel relation map `CR(x)`.
pub fn channel_relation_map(g: &mut Graph, x: Var, p: &ChannelVars) -> Result<Var> {
    let raw = channel_relation_scores(g, x, p)?;
    g.softmax_rows(raw)
}

/// Remixes channels with a `C×C` map: `out[q] = Σ_p x[p]·cr[p,q]`.
pub fn channel_mix(g: &mut Graph, x: Var, cr: Var) -> Result<Var> {
    let (c, h, w) = g.value(x).chw()?;
    if g.shape(cr) != [c, c] {
        return Err(Error::dim("channel_mix", g.shape(cr), &[c, c]));
    }
    let flat = g.reshape(x, &[c, h * w])?;
    let flat_t = g.transpose2d(flat)?;
    let mixed = g.matmul(flat_t, cr)?;
    let mixed = g.transpose2d(mixed)?;
    g.reshape(mixed, &[c, h, w])
}

/// `X_c`: the input remixed by its own channel relation map, `C×H×W`.
pub fn channel_relation_augment(g: &mut Graph, x: Var, p: &ChannelVars) -> Result<Var> {
    let cr = channel_relation_map(g, x, p)?;
    channel_mix(g, x, cr)
}

pub fn apply_integration(
    g: &mut Graph,
    x: Var,
    mode: IntegrationMode,
    spatial: Option<&SpatialVars>,
    channel: Option<&ChannelVars>,
) -> Result<Var> {
    let need_spatial = || {
        spatial.ok_or_else(|| Error::Config(format!("mode {mode} needs spatial relation params")))
    };
    let need_channel = || {
        channel.ok_or_else(|| Error::Config(format!("mode {mode} needs channel relation params")))
    };
    match mode {
        IntegrationMode::None => Ok(x),
        IntegrationMode::SrmOnly => spatial_relation_augment(g, x, need_spatial()?),
        IntegrationMode::CrmOnly => channel_relation_augment(g, x, need_channel()?),
        IntegrationMode::Serial => {
            let (sp, cp) = (need_spatial()?, need_channel()?);
            let xc = channel_relation_augment(g, x, cp)?;
            spatial_relation_augment(g, xc, sp)
        }
        IntegrationMode::Parallel => {
            let (sp, cp) = (need_spatial()?, need_channel()?);
            let xs = spatial_relation_augment(g, x, sp)?;
            let xc = channel_relation_augment(g, x, cp)?;
            g.concat_channels(&[xs, xc])
        }
    }
}
