//! Plain convolutional feature extractor.
//!
//! Each stage is `conv3x3(stride) + bias + relu`; stage outputs are the
//! insertion points for feature-distribution perturbation. The last stage is
//! globally average pooled and linearly projected to the embedding dimension.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpm::Perturber;
use crate::rng::{self, Purpose};
use crate::tensor::{Graph, Tensor, Var};

pub const KERNEL_SIZE: usize = 3;

/// Which stage outputs are perturbed during training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbPlan {
    None,
    /// The first `ceil(stages / 2)` stages.
    Shallow,
    /// The remaining stages.
    Deep,
    All,
    /// Explicit per-stage selection.
    Mask(Vec<bool>),
}

impl PerturbPlan {
    pub fn stage_mask(&self, stages: usize) -> Result<Vec<bool>> {
        let split = stages.div_ceil(2);
        Ok(match self {
            PerturbPlan::None => vec![false; stages],
            PerturbPlan::All => vec![true; stages],
            PerturbPlan::Shallow => (0..stages).map(|i| i < split).collect(),
            PerturbPlan::Deep => (0..stages).map(|i| i >= split).collect(),
            PerturbPlan::Mask(m) => {
                if m.len() != stages {
                    return Err(Error::Contract(format!(
                        "perturbation mask has {} entries for {stages} stages",
                        m.len()
                    )));
                }
                m.clone()
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            PerturbPlan::None => "none".into(),
            PerturbPlan::Shallow => "shallow".into(),
            PerturbPlan::Deep => "deep".into(),
            PerturbPlan::All => "all".into(),
            PerturbPlan::Mask(m) => m.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PerturbPlan::None),
            "shallow" => Ok(PerturbPlan::Shallow),
            "deep" => Ok(PerturbPlan::Deep),
            "all" => Ok(PerturbPlan::All),
            m if !m.is_empty() && m.chars().all(|c| c == '0' || c == '1') => {
                Ok(PerturbPlan::Mask(m.chars().map(|c| c == '1').collect()))
            }
            other => Err(Error::Contract(format!("unknown perturbation plan '{other}'"))),
        }
    }
}

/// Where a selected stage is perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbSite {
    /// The map entering the stage; for stage 0 that is the image.
    Input,
    /// The post-activation map leaving the stage.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub feature_dim: usize,
    pub perturb_plan: PerturbPlan,
    pub perturb_site: PerturbSite,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![8, 16, 16, 32],
            stage_strides: vec![1, 2, 2, 2],
            feature_dim: 64,
            perturb_plan: PerturbPlan::All,
            perturb_site: PerturbSite::Input,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Contract(format!(
                "{} stage channel counts but {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::Contract("backbone needs at least two stages".into()));
        }
        if self.feature_dim == 0 || self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Contract("channel counts and feature_dim must be positive".into()));
        }
        if self.stage_strides.contains(&0) {
            return Err(Error::Contract("strides must be positive".into()));
        }
        self.perturb_plan.stage_mask(self.stages())?;
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial size after each stage for an `h x w` input.
    pub fn spatial_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let pad = KERNEL_SIZE / 2;
        let mut cur = (h, w);
        self.stage_strides
            .iter()
            .map(|&s| {
                cur = (
                    (cur.0 + 2 * pad - KERNEL_SIZE) / s + 1,
                    (cur.1 + 2 * pad - KERNEL_SIZE) / s + 1,
                );
                cur
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut n = 0;
        for &c in &self.stage_channels {
            n += c * cin * KERNEL_SIZE * KERNEL_SIZE + c;
            cin = c;
        }
        n + cin * self.feature_dim
    }
}

/// Trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// `[Cout, Cin, 3, 3]` per stage.
    pub kernels: Vec<Tensor>,
    /// `[Cout]` per stage.
    pub biases: Vec<Tensor>,
    /// `[C_last, feature_dim]`.
    pub projection: Tensor,
}

impl BackboneParams {
    /// He-normal kernels, zero biases, `N(0, 1/(C_last d))` projection.
    ///
    /// The projection scale starts embeddings near unit norm, the scale of
    /// the prototypes they are calibrated against.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = rng::stream(seed, Purpose::ParamInit, 0, 0, 0);
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| s.sample::<f64, _>(StandardNormal) * std).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = config.in_channels;
        for &c in &config.stage_channels {
            let fan_in = (cin * KERNEL_SIZE * KERNEL_SIZE) as f64;
            kernels.push(normal(&[c, cin, KERNEL_SIZE, KERNEL_SIZE], (2.0 / fan_in).sqrt())?);
            biases.push(Tensor::zeros(&[c]));
            cin = c;
        }
        let projection = normal(&[cin, config.feature_dim], (1.0 / (cin * config.feature_dim) as f64).sqrt())?;
        Ok(BackboneParams {
            kernels,
            biases,
            projection,
        })
    }

    /// Checks shapes against `config`.
    pub fn check(&self, config: &BackboneConfig) -> Result<()> {
        config.validate()?;
        let stages = config.stages();
        if self.kernels.len() != stages || self.biases.len() != stages {
            return Err(Error::Shape(format!("params hold {} stages, config {stages}", self.kernels.len())));
        }
        let mut cin = config.in_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            if self.kernels[i].shape() != [c, cin, KERNEL_SIZE, KERNEL_SIZE] || self.biases[i].shape() != [c] {
                return Err(Error::Shape(format!("stage {i} parameter shapes disagree with config")));
            }
            cin = c;
        }
        if self.projection.shape() != [cin, config.feature_dim] {
            return Err(Error::Shape("projection shape disagrees with config".into()));
        }
        Ok(())
    }

    /// Flat, ordered view: kernel/bias per stage, then the projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.kernels.len() + 1);
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.push(k);
            out.push(b);
        }
        out.push(&self.projection);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.kernels.len() + 1);
        for (k, b) in self.kernels.iter_mut().zip(self.biases.iter_mut()) {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.projection);
        out
    }

    /// Names matching [`BackboneParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.kernels.len() {
            out.push(format!("backbone.stage{i}.kernel"));
            out.push(format!("backbone.stage{i}.bias"));
        }
        out.push("backbone.projection".into());
        out
    }

    /// Puts every tensor on `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            kernels: self.kernels.iter().map(|t| g.param(t.clone())).collect(),
            biases: self.biases.iter().map(|t| g.param(t.clone())).collect(),
            projection: g.param(self.projection.clone()),
        }
    }
}

/// Graph handles for [`BackboneParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
    pub projection: Var,
}

impl ParamVars {
    /// Same order as [`BackboneParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.push(*k);
            out.push(*b);
        }
        out.push(self.projection);
        out
    }
}

pub enum Mode<'a> {
    /// Deterministic; no perturbation.
    Eval,
    Train {
        perturber: &'a mut Perturber,
        /// Domain tag of every instance in the batch.
        domains: &'a [usize],
        iteration: u64,
    },
}

pub struct ForwardOutput {
    /// Per-stage inputs, after perturbation where applied.
    pub stage_inputs: Vec<Var>,
    /// Per-stage outputs, after perturbation where applied.
    pub stage_maps: Vec<Var>,
    /// `[B, feature_dim]`.
    pub embedding: Var,
}

/// Runs the stages on `x: [B, Cin, H, W]` and returns the stage maps and the
/// holistic embedding.
pub fn backbone_forward(
    g: &mut Graph,
    x: Var,
    params: &ParamVars,
    config: &BackboneConfig,
    mut mode: Mode<'_>,
) -> Result<ForwardOutput> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::Shape(format!("backbone input must be rank 4, got {s:?}")));
    }
    if s[1] != config.in_channels {
        return Err(Error::Shape(format!(
            "backbone expects {} input channels, got {}",
            config.in_channels, s[1]
        )));
    }
    let mask = config.perturb_plan.stage_mask(config.stages())?;
    let mut h = x;
    let mut stage_maps = Vec::with_capacity(config.stages());
    let mut stage_inputs = Vec::with_capacity(config.stages());
    for (i, &stride) in config.stage_strides.iter().enumerate() {
        let c = config.stage_channels[i];
        if let (PerturbSite::Input, Mode::Train { perturber, domains, iteration }) = (config.perturb_site, &mut mode) {
            h = perturber.apply(g, h, domains, i, *iteration, mask[i])?;
        }
        stage_inputs.push(h);
        let conv = g.conv2d(h, params.kernels[i], stride, KERNEL_SIZE / 2)?;
        let bias = g.reshape(params.biases[i], &[1, c, 1, 1])?;
        let pre = g.add(conv, bias)?;
        h = g.relu(pre)?;
        if let (PerturbSite::Output, Mode::Train { perturber, domains, iteration }) = (config.perturb_site, &mut mode) {
            h = perturber.apply(g, h, domains, i, *iteration, mask[i])?;
        }
        stage_maps.push(h);
    }
    let embedding = gap(g, h, params.projection)?;
    Ok(ForwardOutput {
        stage_inputs,
        stage_maps,
        embedding,
    })
}

/// Spatial mean per channel followed by the linear projection.
pub fn gap(g: &mut Graph, e: Var, projection: Var) -> Result<Var> {
    let pooled = g.gap(e)?;
    g.matmul(pooled, projection)
}
