//! Relation-augmented FCN: a three-stage convolutional backbone, a relation
//! head and a 1×1 class squash per stage, nearest upsampling, and summed
//! fusion of the three class maps.

mod checkpoint;

pub use checkpoint::{read_container, write_container, Container};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::labels::LabelMap;
use crate::relation::{
    apply_integration, ChannelRelationParams, ChannelVars, IntegrationMode, SpatialRelationParams,
    SpatialVars,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// `[H₀, W₀]`
    pub tile: [usize; 2],
    pub stage_channels: [usize; 3],
    /// Cumulative downsampling factor at the output of each stage.
    pub stage_strides: [usize; 3],
    pub mode: IntegrationMode,
    /// Relation embedding width; `None` uses the stage's channel count.
    pub c_e: Option<usize>,
    pub relation_bias: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 6,
            tile: [32, 32],
            stage_channels: [16, 32, 32],
            stage_strides: [4, 8, 16],
            mode: IntegrationMode::Serial,
            c_e: None,
            relation_bias: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be ≥ 1".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.stage_channels.contains(&0) {
            return bad("stage channels must be ≥ 1".into());
        }
        if self.c_e == Some(0) {
            return bad("c_e must be ≥ 1".into());
        }
        let mut prev = 1;
        for &s in &self.stage_strides {
            if s < prev || s % prev != 0 || !matches!(s / prev, 1 | 2 | 4) {
                return bad(format!(
                    "stage strides {:?} must grow by a factor of 1, 2 or 4 per stage",
                    self.stage_strides
                ));
            }
            prev = s;
        }
        let largest = self.stage_strides[2];
        let [h, w] = self.tile;
        if h == 0 || w == 0 || h % largest != 0 || w % largest != 0 {
            return bad(format!(
                "tile {h}×{w} must be divisible by the largest stride {largest}"
            ));
        }
        Ok(())
    }

    /// Spatial resolution of each stage's feature map.
    pub fn stage_resolutions(&self) -> [(usize, usize); 3] {
        self.stage_strides
            .map(|s| (self.tile[0] / s, self.tile[1] / s))
    }

    /// Classifier input width of each stage under the configured mode.
    pub fn classifier_widths(&self) -> [usize; 3] {
        let res = self.stage_resolutions();
        [0, 1, 2].map(|s| {
            self.mode
                .output_channels(self.stage_channels[s], res[s].0 * res[s].1)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub convs: Vec<ConvLayer>,
    pub spatial: Option<SpatialRelationParams>,
    pub channel: Option<ChannelRelationParams>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub upsample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    stages: Vec<Stage>,
}

/// Network parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct NetworkVars {
    stages: Vec<StageVars>,
}

#[derive(Clone, Debug)]
struct StageVars {
    convs: Vec<(Var, Var, usize)>,
    spatial: Option<SpatialVars>,
    channel: Option<ChannelVars>,
    classifier_w: Var,
    classifier_b: Var,
}

/// Strides of the two convolutions realising a per-stage downsampling factor.
fn conv_strides(factor: usize) -> [usize; 2] {
    match factor {
        4 => [2, 2],
        2 => [2, 1],
        _ => [1, 1],
    }
}

impl Network {
    /// Glorot-uniform weights and zero biases, deterministic in `config.seed`.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let resolutions = config.stage_resolutions();
        let widths = config.classifier_widths();
        let k = config.num_classes;
        let mut stages = Vec::with_capacity(3);
        let mut in_ch = config.in_channels;
        let mut prev_stride = 1;
        for s in 0..3 {
            let ch = config.stage_channels[s];
            let factor = config.stage_strides[s] / prev_stride;
            let mut convs = Vec::with_capacity(2);
            for stride in conv_strides(factor) {
                convs.push(ConvLayer {
                    weight: glorot_uniform(&[ch, in_ch, 3, 3], &mut rng),
                    bias: Tensor::zeros(&[ch]),
                    stride,
                });
                in_ch = ch;
            }
            let embed = config.c_e.unwrap_or(ch);
            let spatial = config.mode.uses_spatial().then(|| {
                SpatialRelationParams::init(ch, embed, resolutions[s], config.relation_bias, &mut rng)
            });
            let channel = config
                .mode
                .uses_channel()
                .then(|| ChannelRelationParams::init(ch, embed, config.relation_bias, &mut rng));
            stages.push(Stage {
                convs,
                spatial,
                channel,
                classifier_w: glorot_uniform(&[k, widths[s]], &mut rng),
                classifier_b: Tensor::zeros(&[k]),
                upsample: config.stage_strides[s],
            });
            prev_stride = config.stage_strides[s];
        }
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Named parameters in a fixed order shared by every traversal.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let p = format!("stage{}", s + 1);
            for (i, conv) in stage.convs.iter().enumerate() {
                out.push((format!("{p}.conv{}.w", i + 1), &conv.weight));
                out.push((format!("{p}.conv{}.b", i + 1), &conv.bias));
            }
            if let Some(sp) = &stage.spatial {
                out.push((format!("{p}.srm.w_u"), &sp.w_us));
                if let Some(b) = &sp.b_us {
                    out.push((format!("{p}.srm.b_u"), b));
                }
                out.push((format!("{p}.srm.w_v"), &sp.w_vs));
                if let Some(b) = &sp.b_vs {
                    out.push((format!("{p}.srm.b_v"), b));
                }
            }
            if let Some(cp) = &stage.channel {
                out.push((format!("{p}.crm.w_u"), &cp.w_uc));
                if let Some(b) = &cp.b_uc {
                    out.push((format!("{p}.crm.b_u"), b));
                }
                out.push((format!("{p}.crm.w_v"), &cp.w_vc));
                if let Some(b) = &cp.b_vc {
                    out.push((format!("{p}.crm.b_v"), b));
                }
            }
            out.push((format!("{p}.cls.w"), &stage.classifier_w));
            out.push((format!("{p}.cls.b"), &stage.classifier_b));
        }
        out
    }

    /// Mutable view in the same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for conv in &mut stage.convs {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
            }
            if let Some(sp) = &mut stage.spatial {
                out.push(&mut sp.w_us);
                if let Some(b) = &mut sp.b_us {
                    out.push(b);
                }
                out.push(&mut sp.w_vs);
                if let Some(b) = &mut sp.b_vs {
                    out.push(b);
                }
            }
            if let Some(cp) = &mut stage.channel {
                out.push(&mut cp.w_uc);
                if let Some(b) = &mut cp.b_uc {
                    out.push(b);
                }
                out.push(&mut cp.w_vc);
                if let Some(b) = &mut cp.b_vc {
                    out.push(b);
                }
            }
            out.push(&mut stage.classifier_w);
            out.push(&mut stage.classifier_b);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `g` as a trainable (or constant) leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NetworkVars {
        self.bind_with(g, &mut |g, _, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Records parameters through `put`, which sees each name in
    /// [`Network::params`] order and may substitute its own variable.
    pub fn bind_with(
        &self,
        g: &mut Graph,
        put: &mut dyn FnMut(&mut Graph, &str, &Tensor) -> Var,
    ) -> NetworkVars {
        let names: Vec<String> = self.params().into_iter().map(|(n, _)| n).collect();
        let mut names = names.iter();
        let mut next = |g: &mut Graph, t: &Tensor| put(g, names.next().expect("param order"), t);
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let convs = stage
                .convs
                .iter()
                .map(|c| {
                    let w = next(g, &c.weight);
                    let b = next(g, &c.bias);
                    (w, b, c.stride)
                })
                .collect();
            let spatial = stage.spatial.as_ref().map(|sp| {
                let w_u = next(g, &sp.w_us);
                let b_u = sp.b_us.as_ref().map(|b| next(g, b));
                let w_v = next(g, &sp.w_vs);
                let b_v = sp.b_vs.as_ref().map(|b| next(g, b));
                SpatialVars {
                    w_u,
                    b_u,
                    w_v,
                    b_v,
                    resolution: sp.resolution,
                }
            });
            let channel = stage.channel.as_ref().map(|cp| {
                let w_u = next(g, &cp.w_uc);
                let b_u = cp.b_uc.as_ref().map(|b| next(g, b));
                let w_v = next(g, &cp.w_vc);
                let b_v = cp.b_vc.as_ref().map(|b| next(g, b));
                ChannelVars { w_u, b_u, w_v, b_v }
            });
            let classifier_w = next(g, &stage.classifier_w);
            let classifier_b = next(g, &stage.classifier_b);
            stages.push(StageVars {
                convs,
                spatial,
                channel,
                classifier_w,
                classifier_b,
            });
        }
        NetworkVars { stages }
    }

    /// Logits `K×H₀×W₀` for one image, built on `g`.
    pub fn forward_bound(&self, g: &mut Graph, vars: &NetworkVars, image: Var) -> Result<Var> {
        let (c, h, w) = g.value(image).chw()?;
        let [th, tw] = self.config.tile;
        if (c, h, w) != (self.config.in_channels, th, tw) {
            return Err(Error::dim("network input", &[c, h, w], &[self.config.in_channels, th, tw]));
        }
        let mut feature = image;
        let mut fused: Option<Var> = None;
        for (stage, sv) in self.stages.iter().zip(&vars.stages) {
            for &(wv, bv, stride) in &sv.convs {
                let y = g.conv3x3(feature, wv, Some(bv), stride)?;
                feature = g.relu(y)?;
            }
            let augmented = apply_integration(
                g,
                feature,
                self.config.mode,
                sv.spatial.as_ref(),
                sv.channel.as_ref(),
            )?;
            let scores = g.conv1x1(augmented, sv.classifier_w, Some(sv.classifier_b))?;
            let scores = g.upsample_nearest(scores, stage.upsample)?;
            fused = Some(match fused {
                Some(acc) => g.add(acc, scores)?,
                None => scores,
            });
        }
        Ok(fused.expect("three stages"))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let logits = self.forward_bound(&mut g, &vars, x)?;
        Ok(g.value(logits).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        argmax_labels(&self.forward(image)?)
    }

    /// Replaces parameter values from `(name, tensor)` pairs; every
    /// parameter must be present with a matching shape.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` against `labels`, skipping `ignore`.
pub fn loss(g: &mut Graph, logits: Var, labels: &LabelMap, ignore: u8) -> Result<Var> {
    g.cross_entropy(logits, labels.data(), ignore)
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (k, h, w) = logits.chw()?;
    let plane = h * w;
    let data = logits.data();
    let labels = (0..plane)
        .map(|pix| {
            let mut best = 0;
            for c in 1..k {
                if data[c * plane + pix] > data[best * plane + pix] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}
