//! Inference: render any pose and camera with a trained renderer and one of
//! its identity textures. Nothing here mutates model state.

use crate::error::{ensure_shape, Error, Result};
use crate::rasterizer::RasterOutput;
use crate::renderer::{normal_image, Renderer};
use crate::scene::{rasterize_pose, CoarseMesh, Pose, Skeleton, WeakPerspectiveCamera};
use crate::tensor::Tensor;
use crate::texture::{sample_texture, NeuralTexture};
use crate::training::Checkpoint;

/// One rendered frame.
#[derive(Clone, Debug)]
pub struct Rendered {
    /// Composited output `[1, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// Foreground mask `[1, 1, H, W]` in `[0, 1]`. For models without a mask
    /// head this is the proxy coverage.
    pub mask: Tensor,
    /// Raw renderer color before compositing.
    pub foreground: Tensor,
    /// First-stage reconstruction, two-stage models only.
    pub j_hat: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Avatar {
    pub model_type: String,
    pub config_hash: String,
    pub renderer: Renderer,
    pub textures: Vec<NeuralTexture>,
    pub skeleton: Skeleton,
    pub mesh: CoarseMesh,
}

impl Avatar {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut renderer = Renderer::new(ckpt.config.renderer.clone(), ckpt.config.seed)?;
        let names = renderer.params.names().to_vec();
        for (n, v) in names.iter().zip(renderer.params.values_mut()) {
            let a = ckpt
                .array(&format!("renderer/{n}"))
                .ok_or_else(|| Error::format("checkpoint", format!("renderer parameter `{n}` missing")))?;
            ensure_shape("checkpoint parameter", v.shape(), a.shape())?;
            *v = a.clone();
        }
        let textures = ckpt
            .identity_ids()
            .iter()
            .map(|id| ckpt.texture(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Avatar {
            model_type: ckpt.model_type.clone(),
            config_hash: ckpt.config_hash(),
            renderer,
            textures,
            skeleton: ckpt.skeleton.clone(),
            mesh: ckpt.mesh.clone(),
        })
    }

    pub fn identity_ids(&self) -> Vec<String> {
        self.textures.iter().map(|t| t.identity_id.clone()).collect()
    }

    pub fn texture(&self, id: &str) -> Result<&NeuralTexture> {
        self.textures
            .iter()
            .find(|t| t.identity_id == id)
            .ok_or_else(|| Error::UnknownIdentity {
                requested: id.to_string(),
                available: self.identity_ids(),
            })
    }

    pub fn rasterize(&self, pose: &Pose, camera: &WeakPerspectiveCamera) -> Result<RasterOutput> {
        rasterize_pose(&self.mesh, &self.skeleton, pose, camera)
    }

    /// Render a precomputed raster and composite over `background`
    /// (`[3, H, W]` or `[1, 3, H, W]`).
    pub fn render_raster(&self, identity: &str, raster: &RasterOutput, background: &Tensor) -> Result<Rendered> {
        let texture = self.texture(identity)?;
        let (h, w) = (raster.height, raster.width);
        let background = background.clone().reshape(&[1, 3, h, w])?;
        let neural = sample_texture(texture, raster).data.reshape(&[1, texture.channels(), h, w])?;
        let out = self.renderer.render(&neural, &normal_image(raster))?;
        let (image, mask) = match out.m_hat {
            Some(m) => (crate::losses::blend(&out.i_hat, &m, &background)?, m),
            None => {
                let cov = raster.coverage().iter().map(|&c| c as f64).collect();
                (out.i_hat.clone(), Tensor::from_vec(&[1, 1, h, w], cov)?)
            }
        };
        Ok(Rendered {
            image,
            mask,
            foreground: out.i_hat,
            j_hat: out.j_hat,
        })
    }

    pub fn render(
        &self,
        identity: &str,
        pose: &Pose,
        camera: &WeakPerspectiveCamera,
        background: &Tensor,
    ) -> Result<Rendered> {
        let raster = self.rasterize(pose, camera)?;
        self.render_raster(identity, &raster, background)
    }
}
