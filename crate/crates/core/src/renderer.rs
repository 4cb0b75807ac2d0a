//! Neural renderers and the multiscale patch discriminator.
//!
//! Three architectures share one interface:
//!
//! * `TwoStage`: `R1` maps the neural image to a latent image whose first
//!   three channels (through `tanh`) form the auxiliary RGB `Ĵ`; `R2` maps
//!   the latent image concatenated with the normal image to RGB `Î` and a
//!   mask logit.
//! * `SingleStage`: one encoder-decoder over the neural image concatenated
//!   with normals, producing RGB and a mask logit.
//! * `Dnr`: one encoder-decoder over the neural image alone, producing RGB
//!   (plus a mask logit in the `+mask` variant).

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::params::{he_normal, seeded_rng, ParamId};
use crate::nn::{ParamStore, StageConfig, Tape, UNet, Var};
use crate::rasterizer::RasterOutput;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TwoStage,
    SingleStage,
    Dnr,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::TwoStage => "two_stage",
            Architecture::SingleStage => "single_stage",
            Architecture::Dnr => "dnr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(Architecture::TwoStage),
            "single_stage" => Ok(Architecture::SingleStage),
            "dnr" => Ok(Architecture::Dnr),
            _ => Err(Error::invalid(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub architecture: Architecture,
    pub texture_channels: usize,
    /// Width of the `R1` output (two-stage only).
    pub latent_channels: usize,
    pub depth: usize,
    /// Per-stage width of the two-stage reference model. Single-stage
    /// variants are widened to match its total parameter count.
    pub base_channels: usize,
    pub max_channels: usize,
    /// When false the normal image is replaced by zeros.
    pub use_normals: bool,
    /// Mask head on the DNR baseline.
    pub dnr_mask: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            architecture: Architecture::TwoStage,
            texture_channels: 8,
            latent_channels: 16,
            depth: 4,
            base_channels: 32,
            max_channels: 256,
            use_normals: true,
            dnr_mask: false,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.texture_channels == 0 {
            return Err(Error::invalid("texture_channels must be positive"));
        }
        if self.latent_channels < 3 {
            return Err(Error::invalid("latent_channels must be >= 3"));
        }
        self.stage1().validate()?;
        self.stage2().validate()
    }

    pub fn stage1(&self) -> StageConfig {
        StageConfig {
            in_channels: self.texture_channels,
            out_channels: self.latent_channels,
            depth: self.depth,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
        }
    }

    pub fn stage2(&self) -> StageConfig {
        StageConfig {
            in_channels: self.latent_channels + 3,
            out_channels: 4,
            depth: self.depth,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
        }
    }

    /// Parameter count of the two-stage model with these settings.
    pub fn two_stage_params(&self) -> usize {
        self.stage1().param_count() + self.stage2().param_count()
    }

    /// Stage layout for the configured architecture.
    pub fn stages(&self) -> Vec<StageConfig> {
        match self.architecture {
            Architecture::TwoStage => vec![self.stage1(), self.stage2()],
            Architecture::SingleStage => vec![matched_stage(
                self.texture_channels + 3,
                4,
                self.depth,
                self.two_stage_params(),
            )],
            Architecture::Dnr => vec![matched_stage(
                self.texture_channels,
                if self.dnr_mask { 4 } else { 3 },
                self.depth,
                self.two_stage_params(),
            )],
        }
    }

    pub fn has_mask(&self) -> bool {
        self.architecture != Architecture::Dnr || self.dnr_mask
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Single encoder-decoder whose parameter count is closest to `target`.
/// Searches the base width and the width cap jointly.
pub fn matched_stage(in_channels: usize, out_channels: usize, depth: usize, target: usize) -> StageConfig {
    let mut best = StageConfig::new(in_channels, out_channels, depth, 1);
    let mut best_err = usize::MAX;
    for base in 1..=512 {
        let lo = StageConfig {
            max_channels: base,
            ..StageConfig::new(in_channels, out_channels, depth, base)
        };
        if lo.param_count() > target && base > 1 {
            break;
        }
        for max in base..=(base << depth.saturating_sub(1)) {
            let cfg = StageConfig {
                max_channels: max,
                ..lo.clone()
            };
            let err = cfg.param_count().abs_diff(target);
            if err < best_err {
                best_err = err;
                best = cfg;
            }
        }
    }
    best
}

/// Renderer outputs, all `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub j_hat: Option<Tensor>,
    pub latent: Option<Tensor>,
    pub i_hat: Tensor,
    pub m_hat: Option<Tensor>,
}

/// Tape handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    pub j_hat: Option<Var>,
    pub latent: Option<Var>,
    pub i_hat: Var,
    pub m_hat: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Renderer {
    pub config: RendererConfig,
    pub params: ParamStore,
    stages: Vec<UNet>,
}

impl Renderer {
    pub fn new(config: RendererConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 100);
        let mut params = ParamStore::new();
        let stages = config
            .stages()
            .into_iter()
            .enumerate()
            .map(|(i, s)| UNet::new(s, &format!("r{}", i + 1), &mut params, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Renderer {
            config,
            params,
            stages,
        })
    }

    pub fn stage_configs(&self) -> Vec<StageConfig> {
        self.stages.iter().map(|s| s.config.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check(&self, neural: &[usize], normals: &[usize]) -> Result<()> {
        match neural {
            [1, c, h, w] if *c == self.config.texture_channels => {
                let m = self.config.size_multiple();
                if h % m != 0 || w % m != 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "image size {w}x{h} is not a multiple of {m}"
                    )));
                }
                ensure_shape("renderer normals", &[1, 3, *h, *w], normals)
            }
            _ => Err(Error::ShapeMismatch {
                op: "renderer input",
                expected: vec![1, self.config.texture_channels, 0, 0],
                actual: neural.to_vec(),
            }),
        }
    }

    /// Record a forward pass. `vars` are `self.params` bound on `tape`;
    /// `neural` is `[1, C, H, W]` and `normals` is `[1, 3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], neural: Var, normals: Var) -> Result<RenderVars> {
        self.check(tape.value(neural).shape(), tape.value(normals).shape())?;
        let normals = if self.config.use_normals {
            normals
        } else {
            let z = Tensor::zeros(tape.value(normals).shape());
            tape.constant(z)
        };
        let out = match self.config.architecture {
            Architecture::TwoStage => {
                let latent = self.stages[0].forward(tape, vars, neural);
                let first = tape.channels(latent, 0, 3);
                let j_hat = tape.tanh(first);
                let input = tape.concat(&[latent, normals]);
                let raw = self.stages[1].forward(tape, vars, input);
                let (i_hat, m_hat) = split_rgb_mask(tape, raw);
                RenderVars {
                    j_hat: Some(j_hat),
                    latent: Some(latent),
                    i_hat,
                    m_hat: Some(m_hat),
                }
            }
            Architecture::SingleStage => {
                let input = tape.concat(&[neural, normals]);
                let raw = self.stages[0].forward(tape, vars, input);
                let (i_hat, m_hat) = split_rgb_mask(tape, raw);
                RenderVars {
                    j_hat: None,
                    latent: None,
                    i_hat,
                    m_hat: Some(m_hat),
                }
            }
            Architecture::Dnr => {
                let raw = self.stages[0].forward(tape, vars, neural);
                if self.config.dnr_mask {
                    let (i_hat, m_hat) = split_rgb_mask(tape, raw);
                    RenderVars {
                        j_hat: None,
                        latent: None,
                        i_hat,
                        m_hat: Some(m_hat),
                    }
                } else {
                    RenderVars {
                        j_hat: None,
                        latent: None,
                        i_hat: tape.tanh(raw),
                        m_hat: None,
                    }
                }
            }
        };
        Ok(out)
    }

    /// Inference on plain tensors.
    pub fn render(&self, neural: &Tensor, normals: &Tensor) -> Result<RenderOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let n = tape.constant(neural.clone());
        let nr = tape.constant(normals.clone());
        let v = self.forward(&mut tape, &vars, n, nr)?;
        let get = |x: Option<Var>| x.map(|x| tape.value(x).clone());
        Ok(RenderOutput {
            j_hat: get(v.j_hat),
            latent: get(v.latent),
            i_hat: tape.value(v.i_hat).clone(),
            m_hat: get(v.m_hat),
        })
    }
}

fn split_rgb_mask(tape: &mut Tape, raw: Var) -> (Var, Var) {
    let rgb = tape.channels(raw, 0, 3);
    let logit = tape.channels(raw, 3, 1);
    (tape.tanh(rgb), tape.sigmoid(logit))
}

/// View-space normal image `[1, 3, H, W]`, zero at background.
pub fn normal_image(raster: &RasterOutput) -> Tensor {
    let plane = raster.pixel_count();
    let mut out = Tensor::zeros(&[1, 3, raster.height, raster.width]);
    let d = out.data_mut();
    for (p, n) in raster.normal.iter().enumerate() {
        for ch in 0..3 {
            d[ch * plane + p] = n[ch];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct DiscLayer {
    weight: ParamId,
    bias: ParamId,
}

/// Patch classifier applied to an average-pooled image pyramid.
#[derive(Clone, Debug)]
pub struct MultiscaleDiscriminator {
    pub scales: usize,
    pub width: usize,
    pub params: ParamStore,
    layers: Vec<[DiscLayer; 3]>,
}

const DISC_LEAK: f64 = 0.2;

impl MultiscaleDiscriminator {
    pub fn new(scales: usize, width: usize, seed: u64) -> Result<Self> {
        if scales == 0 || width == 0 {
            return Err(Error::invalid("discriminator needs >= 1 scale and width"));
        }
        let mut rng = seeded_rng(seed, 200);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(scales);
        for s in 0..scales {
            let mut add = |name: &str, cout: usize, cin: usize, k: usize| DiscLayer {
                weight: params.add(
                    format!("d{s}.{name}.weight"),
                    he_normal(&[cout, cin, k, k], cin * k * k, 1.0, &mut rng),
                ),
                bias: params.add(format!("d{s}.{name}.bias"), Tensor::zeros(&[cout])),
            };
            layers.push([
                add("conv0", width, 3, 4),
                add("conv1", 2 * width, width, 4),
                add("score", 1, 2 * width, 3),
            ]);
        }
        Ok(MultiscaleDiscriminator {
            scales,
            width,
            params,
            layers,
        })
    }

    /// Score maps, one per scale; scale `s` sees the image downsampled `2^s`
    /// times and emits a map at `1/(4·2^s)` resolution.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Vec<Var>> {
        let shape = tape.value(image).shape().to_vec();
        let min = 4 << self.scales.saturating_sub(1);
        match shape.as_slice() {
            [1, 3, h, w] if h % min == 0 && w % min == 0 && *h > 0 && *w > 0 => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "discriminator input",
                    expected: vec![1, 3, min, min],
                    actual: shape,
                })
            }
        }
        let mut x = image;
        let mut out = Vec::with_capacity(self.scales);
        for (s, [c0, c1, score]) in self.layers.iter().enumerate() {
            if s > 0 {
                x = tape.avg_pool2(x);
            }
            let mut h = tape.conv2d(x, vars[c0.weight.0], vars[c0.bias.0], 2, 1);
            h = tape.leaky_relu(h, DISC_LEAK);
            h = tape.conv2d(h, vars[c1.weight.0], vars[c1.bias.0], 2, 1);
            h = tape.instance_norm(h);
            h = tape.leaky_relu(h, DISC_LEAK);
            out.push(tape.conv2d(h, vars[score.weight.0], vars[score.bias.0], 1, 1));
        }
        Ok(out)
    }

    pub fn discriminate(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let maps = self.forward(&mut tape, &vars, x)?;
        Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
    }
}
