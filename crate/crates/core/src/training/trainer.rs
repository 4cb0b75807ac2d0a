//! The optimization loop.
//!
//! With split optimization on, steps alternate between renderer-only
//! updates on non-keyframes (the texture is not differentiated at all) and
//! joint texture + renderer updates on keyframes. With it off every step is
//! a joint update on any training frame. Each step picks an identity at
//! random and is followed by one discriminator update on the detached
//! blended outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_crop, draw_crop, morph_mask, CropSpec, Sample};
use super::checkpoint::{Checkpoint, IdentityEntry, RngState};
use super::config::TrainConfig;
use super::keyframes::{coverage_sets, greedy_max_coverage, KeyframeSet};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_grad, disc_loss_grad, feature_loss_grad, l1_loss_grad, mask_loss_grad, pixel_loss_grad,
    total_loss, total_variation_grad, FeatureExtractor, LossTerms,
};
use crate::nn::params::seeded_rng;
use crate::nn::{Adam, AdamConfig, ParamStore, Tape, Var};
use crate::parallel;
use crate::rasterizer::RasterOutput;
use crate::renderer::{normal_image, MultiscaleDiscriminator, Renderer};
use crate::scene::SyntheticSequence;
use crate::tensor::Tensor;
use crate::texture::{init_texture, perturb_uv, BilinearLookup, NeuralTexture};

/// One identity's training data with its proxy rasters precomputed.
#[derive(Clone, Debug)]
pub struct IdentityData {
    pub id: String,
    pub sequence: SyntheticSequence,
    pub rasters: Vec<RasterOutput>,
}

impl IdentityData {
    pub fn new(id: impl Into<String>, sequence: SyntheticSequence) -> Result<Self> {
        let rasters = sequence.proxy_rasters()?;
        Ok(IdentityData {
            id: id.into(),
            sequence,
            rasters,
        })
    }

    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.sequence.frames.len())
            .filter(|&i| self.sequence.frames[i].is_keyframe_candidate)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Renderer only, non-keyframes.
    Renderer,
    /// Texture and renderer, keyframes.
    Keyframe,
    /// Texture and renderer, any training frame.
    Joint,
}

impl StepKind {
    pub fn updates_texture(self) -> bool {
        self != StepKind::Renderer
    }
}

/// All random choices of one step, drawn before any work is done.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub identity: usize,
    pub kind: StepKind,
    pub frames: Vec<usize>,
    pub crops: Vec<CropSpec>,
    pub uv_seeds: Vec<u64>,
    /// `Some(true)` dilates, `Some(false)` erodes the supervision mask.
    pub mask_ops: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub identity: String,
    pub kind: StepKind,
    pub terms: LossTerms,
    /// λ-weighted terms.
    pub weighted: LossTerms,
    pub total: f64,
    pub disc: Option<f64>,
}

struct SampleResult {
    renderer_grads: Vec<Tensor>,
    texture_grad: Option<Tensor>,
    terms: LossTerms,
    fake: Tensor,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub renderer: Renderer,
    pub disc: MultiscaleDiscriminator,
    pub extractor: FeatureExtractor,
    pub textures: Vec<NeuralTexture>,
    pub keyframes: Vec<KeyframeSet>,
    pub step: u64,
    data: Vec<IdentityData>,
    pools: Vec<Pools>,
    opt_renderer: Adam,
    opt_disc: Adam,
    opt_textures: Vec<Adam>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
struct Pools {
    train: Vec<usize>,
    keyframes: Vec<usize>,
    others: Vec<usize>,
}

fn check_data(config: &TrainConfig, data: &[IdentityData]) -> Result<()> {
    let Some(first) = data.first() else {
        return Err(Error::invalid("training needs at least one identity"));
    };
    for (i, d) in data.iter().enumerate() {
        if data[..i].iter().any(|o| o.id == d.id) {
            return Err(Error::invalid(format!("duplicate identity `{}`", d.id)));
        }
        if d.sequence.mesh != first.sequence.mesh || d.sequence.skeleton != first.sequence.skeleton {
            return Err(Error::invalid(format!(
                "identity `{}` uses a different proxy mesh; all identities must share one",
                d.id
            )));
        }
        if d.train_frames().is_empty() {
            return Err(Error::invalid(format!("identity `{}` has no training frames", d.id)));
        }
        let m = config.renderer.size_multiple().max(4 << (config.disc_scales - 1));
        for r in &d.rasters {
            let (w, h) = (r.width, r.height);
            if config.crop_size == 0 && (w % m != 0 || h % m != 0) {
                return Err(Error::DimensionMismatch(format!(
                    "frame size {w}x{h} is not a multiple of {m}"
                )));
            }
        }
    }
    Ok(())
}

fn build_pools(config: &TrainConfig, d: &IdentityData, keyframes: &[usize]) -> Pools {
    let train = d.train_frames();
    let others: Vec<usize> = train.iter().copied().filter(|f| !keyframes.contains(f)).collect();
    let _ = config;
    Pools {
        others: if others.is_empty() { train.clone() } else { others },
        keyframes: if keyframes.is_empty() { train.clone() } else { keyframes.to_vec() },
        train,
    }
}

fn adam_for(lr: f64, store: &ParamStore) -> Adam {
    Adam::new(AdamConfig::with_lr(lr), store.values())
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<IdentityData>) -> Result<Self> {
        config.validate()?;
        check_data(&config, &data)?;
        let renderer = Renderer::new(config.renderer.clone(), config.seed)?;
        let disc = MultiscaleDiscriminator::new(config.disc_scales, config.disc_width, config.seed)?;
        let extractor = FeatureExtractor::new(config.feature_seed);
        let tsize = (config.texture_width, config.texture_height);
        let textures = data
            .iter()
            .map(|d| {
                init_texture(
                    config.texture_width,
                    config.texture_height,
                    config.renderer.texture_channels,
                    config.texture_seed,
                    &d.id,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let keyframes = data
            .iter()
            .map(|d| {
                let train = d.train_frames();
                let rasters: Vec<&RasterOutput> = train.iter().map(|&i| &d.rasters[i]).collect();
                let sets = coverage_sets(&rasters, config.keyframe_space, tsize);
                let mut k = greedy_max_coverage(&sets, config.budget_for(train.len()), config.keyframe_saturation)?;
                k.frame_indices = k.frame_indices.iter().map(|&i| train[i]).collect();
                Ok(k)
            })
            .collect::<Result<Vec<_>>>()?;
        let pools = data
            .iter()
            .zip(&keyframes)
            .map(|(d, k)| build_pools(&config, d, &k.frame_indices))
            .collect();
        let opt_textures = textures
            .iter()
            .map(|t| Adam::new(AdamConfig::with_lr(config.lr_texture), std::slice::from_ref(&t.data)))
            .collect();
        Ok(Trainer {
            opt_renderer: adam_for(config.lr_renderer, &renderer.params),
            opt_disc: adam_for(config.lr_disc, &disc.params),
            opt_textures,
            rng: seeded_rng(config.seed, 1),
            config,
            renderer,
            disc,
            extractor,
            textures,
            keyframes,
            step: 0,
            data,
            pools,
        })
    }

    pub fn identity_ids(&self) -> Vec<String> {
        self.data.iter().map(|d| d.id.clone()).collect()
    }

    pub fn data(&self) -> &[IdentityData] {
        &self.data
    }

    fn kind_at(&self, step: u64) -> StepKind {
        if !self.config.split_optimization {
            StepKind::Joint
        } else if step % (self.config.alternation_ratio as u64 + 1) < self.config.alternation_ratio as u64 {
            StepKind::Renderer
        } else {
            StepKind::Keyframe
        }
    }

    /// Draw the next step's random choices. Advances the trainer's RNG.
    pub fn plan_step(&mut self) -> StepPlan {
        let kind = self.kind_at(self.step);
        let identity = self.rng.random_range(0..self.data.len());
        let pools = &self.pools[identity];
        let pool = match kind {
            StepKind::Renderer => &pools.others,
            StepKind::Keyframe => &pools.keyframes,
            StepKind::Joint => &pools.train,
        };
        let size = {
            let r = &self.data[identity].rasters[0];
            (r.width, r.height)
        };
        let mut plan = StepPlan {
            identity,
            kind,
            frames: Vec::new(),
            crops: Vec::new(),
            uv_seeds: Vec::new(),
            mask_ops: Vec::new(),
        };
        for _ in 0..self.config.batch_size {
            plan.frames.push(pool[self.rng.random_range(0..pool.len())]);
            plan.crops.push(draw_crop(
                &mut self.rng,
                size,
                self.config.crop_size,
                (self.config.rescale_min, self.config.rescale_max),
            ));
            plan.uv_seeds.push(self.rng.random());
            let op = if self.config.mask_noise > 0.0 && self.rng.random::<f64>() < self.config.mask_noise {
                Some(self.rng.random::<bool>())
            } else {
                None
            };
            plan.mask_ops.push(op);
        }
        plan
    }

    fn build_sample(&self, plan: &StepPlan, k: usize) -> Result<Sample> {
        let d = &self.data[plan.identity];
        let f = plan.frames[k];
        let mut s = apply_crop(&d.sequence.frames[f], &d.rasters[f], &plan.crops[k]);
        if self.config.uv_perturb > 0.0 {
            s.raster = perturb_uv(&s.raster, self.config.uv_perturb, plan.uv_seeds[k])?;
        }
        if let Some(dilate) = plan.mask_ops[k] {
            s.mask = morph_mask(&s.mask, dilate);
        }
        Ok(s)
    }

    fn generator_sample(&self, texture: &NeuralTexture, sample: &Sample, update_texture: bool) -> Result<SampleResult> {
        let w = &self.config.weights;
        let mut tape = Tape::new();
        let rvars = self.renderer.params.bind(&mut tape, true);
        let tex = tape.leaf(texture.data.clone(), update_texture);
        let lookup = BilinearLookup::new(&sample.raster, texture.width(), texture.height());
        let neural = tape.sample(tex, lookup);
        let normals = tape.constant(normal_image(&sample.raster));
        let out = self.renderer.forward(&mut tape, &rvars, neural, normals)?;

        let mut seeds: Vec<(Var, Tensor)> = Vec::new();
        let push = |seeds: &mut Vec<(Var, Tensor)>, v: Var, mut g: Tensor, k: f64| {
            if k != 0.0 {
                g.scale(k);
                seeds.push((v, g));
            }
        };
        let mut terms = LossTerms::default();
        let target = &sample.image;
        let blended = match out.m_hat {
            Some(m) => {
                let pg = pixel_loss_grad(
                    out.j_hat.map(|j| tape.value(j)),
                    tape.value(out.i_hat),
                    tape.value(m),
                    target,
                )?;
                terms.pixel = pg.value;
                if let (Some(j), Some(dj)) = (out.j_hat, pg.d_j) {
                    push(&mut seeds, j, dj, w.lambda_p);
                }
                push(&mut seeds, out.i_hat, pg.d_i, w.lambda_p);
                push(&mut seeds, m, pg.d_m, w.lambda_p);
                let (mv, md) = mask_loss_grad(tape.value(m), &sample.mask)?;
                terms.mask = mv;
                push(&mut seeds, m, md, w.lambda_mask);
                tape.blend(out.i_hat, m, sample.background.clone())
            }
            None => {
                let (v, d) = l1_loss_grad(tape.value(out.i_hat), target)?;
                terms.pixel = v;
                push(&mut seeds, out.i_hat, d, w.lambda_p);
                out.i_hat
            }
        };
        if w.lambda_feat > 0.0 {
            let fvars = self.extractor.forward(&mut tape, blended);
            let fa: Vec<Tensor> = fvars.iter().map(|v| tape.value(*v).clone()).collect();
            let fb = self.extractor.features(target);
            let (v, grads) = feature_loss_grad(&fa, &fb, &w.feature_weights)?;
            terms.feature = v;
            for (fv, g) in fvars.into_iter().zip(grads) {
                push(&mut seeds, fv, g, w.lambda_feat);
            }
        }
        if w.lambda_adv > 0.0 {
            let dvars = self.disc.params.bind(&mut tape, false);
            let maps = self.disc.forward(&mut tape, &dvars, blended)?;
            let scores: Vec<Tensor> = maps.iter().map(|v| tape.value(*v).clone()).collect();
            let (v, grads) = adv_loss_grad(&scores);
            terms.adversarial = v;
            for (mv, g) in maps.into_iter().zip(grads) {
                push(&mut seeds, mv, g, w.lambda_adv);
            }
        }
        if w.lambda_tv > 0.0 {
            let (ti, gi) = total_variation_grad(tape.value(blended));
            terms.tv = w.beta_i * ti;
            push(&mut seeds, blended, gi, w.lambda_tv * w.beta_i);
            if let Some(m) = out.m_hat {
                let (tm, gm) = total_variation_grad(tape.value(m));
                terms.tv += w.beta_m * tm;
                push(&mut seeds, m, gm, w.lambda_tv * w.beta_m);
            }
        }
        let fake = tape.value(blended).clone();
        tape.backward(seeds);
        let renderer_grads = rvars.iter().map(|v| tape.take_grad(*v)).collect();
        let texture_grad = update_texture.then(|| tape.take_grad(tex));
        Ok(SampleResult {
            renderer_grads,
            texture_grad,
            terms,
            fake,
        })
    }

    fn disc_sample(&self, real: &Tensor, fake: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let dvars = self.disc.params.bind(&mut tape, true);
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let rm = self.disc.forward(&mut tape, &dvars, r)?;
        let fm = self.disc.forward(&mut tape, &dvars, f)?;
        let rv: Vec<Tensor> = rm.iter().map(|v| tape.value(*v).clone()).collect();
        let fv: Vec<Tensor> = fm.iter().map(|v| tape.value(*v).clone()).collect();
        let (value, gr, gf) = disc_loss_grad(&rv, &fv);
        let seeds = rm.into_iter().zip(gr).chain(fm.into_iter().zip(gf)).collect();
        tape.backward(seeds);
        Ok((value, dvars.iter().map(|v| tape.take_grad(*v)).collect()))
    }

    /// Run one optimization step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let plan = self.plan_step();
        self.execute(&plan)
    }

    /// Execute a planned step. Nothing is modified if a loss is non-finite.
    pub fn execute(&mut self, plan: &StepPlan) -> Result<LossRecord> {
        let n = plan.frames.len();
        let update_texture = plan.kind.updates_texture();
        let samples = (0..n)
            .map(|k| self.build_sample(plan, k))
            .collect::<Result<Vec<_>>>()?;
        let texture = &self.textures[plan.identity];
        let results = parallel::map_range(n, |k| self.generator_sample(texture, &samples[k], update_texture))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / n as f64;
        let mut terms = LossTerms::default();
        for r in &results {
            total_loss(&r.terms, &self.config.weights, self.step)?;
            terms.pixel += r.terms.pixel * inv;
            terms.feature += r.terms.feature * inv;
            terms.mask += r.terms.mask * inv;
            terms.adversarial += r.terms.adversarial * inv;
            terms.tv += r.terms.tv * inv;
        }
        let total = total_loss(&terms, &self.config.weights, self.step)?;

        let mut rgrads = sum_grads(results.iter().map(|r| r.renderer_grads.as_slice()), inv);
        if !rgrads.iter().all(Tensor::all_finite) {
            return Err(Error::NumericalAbort {
                term: "renderer gradient".into(),
                step: self.step,
            });
        }
        let scale = self.config.lr_scale(self.step);
        self.opt_renderer.config.lr = self.config.lr_renderer * scale;
        self.opt_renderer.update(self.renderer.params.values_mut(), &rgrads);
        rgrads.clear();
        if update_texture {
            let g = sum_grads(results.iter().map(|r| std::slice::from_ref(r.texture_grad.as_ref().expect("texture grad"))), inv);
            let tex = &mut self.textures[plan.identity];
            self.opt_textures[plan.identity].config.lr = self.config.lr_texture * scale;
            self.opt_textures[plan.identity].update(std::slice::from_mut(&mut tex.data), &g);
        }

        let disc = if self.config.weights.lambda_adv > 0.0 {
            let outs = parallel::map_range(n, |k| self.disc_sample(&samples[k].image, &results[k].fake))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let value = outs.iter().map(|(v, _)| v * inv).sum::<f64>();
            if !value.is_finite() {
                return Err(Error::NumericalAbort {
                    term: "discriminator".into(),
                    step: self.step,
                });
            }
            let g = sum_grads(outs.iter().map(|(_, g)| g.as_slice()), inv);
            self.opt_disc.config.lr = self.config.lr_disc * scale;
            self.opt_disc.update(self.disc.params.values_mut(), &g);
            Some(value)
        } else {
            None
        };

        let w = &self.config.weights;
        let record = LossRecord {
            step: self.step,
            identity: self.data[plan.identity].id.clone(),
            kind: plan.kind,
            terms,
            weighted: LossTerms {
                pixel: w.lambda_p * terms.pixel,
                feature: w.lambda_feat * terms.feature,
                mask: w.lambda_mask * terms.mask,
                adversarial: w.lambda_adv * terms.adversarial,
                tv: w.lambda_tv * terms.tv,
            },
            total,
            disc,
        };
        self.step += 1;
        Ok(record)
    }

    /// Step until `config.steps` (or `until`, if smaller) is reached.
    pub fn run(&mut self, until: Option<u64>, mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>) -> Result<()> {
        let end = until.map_or(self.config.steps, |u| u.min(self.config.steps));
        while self.step < end {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        let mut counters = vec![
            ("opt/renderer".to_string(), self.opt_renderer.step),
            ("opt/disc".to_string(), self.opt_disc.step),
        ];
        for (n, t) in self.renderer.params.iter() {
            arrays.push((format!("renderer/{n}"), t.clone()));
        }
        for (n, t) in self.disc.params.iter() {
            arrays.push((format!("disc/{n}"), t.clone()));
        }
        for t in &self.textures {
            arrays.push((format!("texture/{}", t.identity_id), t.data.clone()));
        }
        let names = |store: &ParamStore| store.names().to_vec();
        for (prefix, opt, names) in [
            ("renderer", &self.opt_renderer, names(&self.renderer.params)),
            ("disc", &self.opt_disc, names(&self.disc.params)),
        ] {
            for (i, n) in names.iter().enumerate() {
                arrays.push((format!("opt/{prefix}/m/{n}"), opt.m[i].clone()));
                arrays.push((format!("opt/{prefix}/v/{n}"), opt.v[i].clone()));
            }
        }
        for (t, opt) in self.textures.iter().zip(&self.opt_textures) {
            arrays.push((format!("opt/texture/m/{}", t.identity_id), opt.m[0].clone()));
            arrays.push((format!("opt/texture/v/{}", t.identity_id), opt.v[0].clone()));
            counters.push((format!("opt/texture/{}", t.identity_id), opt.step));
        }
        let seq = &self.data[0].sequence;
        Checkpoint {
            model_type: self.config.model_type().to_string(),
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            identities: self
                .textures
                .iter()
                .map(|t| IdentityEntry {
                    id: t.identity_id.clone(),
                    init_seed: t.init_seed,
                })
                .collect(),
            keyframes: self.keyframes.iter().map(|k| k.frame_indices.clone()).collect(),
            counters,
            skeleton: seq.skeleton.clone(),
            mesh: seq.mesh.clone(),
            arrays,
        }
    }

    /// Rebuild the training state from a checkpoint and the same datasets.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: Vec<IdentityData>) -> Result<Self> {
        let ids: Vec<String> = data.iter().map(|d| d.id.clone()).collect();
        let stored = ckpt.identity_ids();
        if ids != stored {
            return Err(Error::invalid(format!(
                "checkpoint identities {stored:?} do not match datasets {ids:?}"
            )));
        }
        let mut t = Trainer::new(ckpt.config.clone(), data)?;
        let get = |name: String| {
            ckpt.array(&name)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("array `{name}` missing")))
        };
        let load_store = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            let names = store.names().to_vec();
            for (n, v) in names.iter().zip(store.values_mut()) {
                let a = get(format!("{prefix}/{n}"))?;
                crate::error::ensure_shape("checkpoint parameter", v.shape(), a.shape())?;
                *v = a;
            }
            Ok(())
        };
        load_store(&mut t.renderer.params, "renderer")?;
        load_store(&mut t.disc.params, "disc")?;
        for (prefix, opt, store) in [
            ("renderer", &mut t.opt_renderer, &t.renderer.params),
            ("disc", &mut t.opt_disc, &t.disc.params),
        ] {
            for (i, n) in store.names().iter().enumerate() {
                opt.m[i] = get(format!("opt/{prefix}/m/{n}"))?;
                opt.v[i] = get(format!("opt/{prefix}/v/{n}"))?;
            }
            opt.step = ckpt.counter(&format!("opt/{prefix}")).unwrap_or(0);
        }
        for (tex, opt) in t.textures.iter_mut().zip(t.opt_textures.iter_mut()) {
            let id = tex.identity_id.clone();
            tex.data = ckpt.texture(&id)?.data;
            if let (Ok(m), Ok(v)) = (get(format!("opt/texture/m/{id}")), get(format!("opt/texture/v/{id}"))) {
                opt.m[0] = m;
                opt.v[0] = v;
            }
            opt.step = ckpt.counter(&format!("opt/texture/{id}")).unwrap_or(0);
        }
        for (i, k) in t.keyframes.iter_mut().enumerate() {
            if let Some(stored) = ckpt.keyframes.get(i) {
                k.frame_indices = stored.clone();
            }
        }
        t.pools = t
            .data
            .iter()
            .zip(&t.keyframes)
            .map(|(d, k)| build_pools(&t.config, d, &k.frame_indices))
            .collect();
        t.step = ckpt.step;
        t.rng = ckpt.rng.restore()?;
        Ok(t)
    }
}

fn sum_grads<'a>(grads: impl Iterator<Item = &'a [Tensor]>, scale: f64) -> Vec<Tensor> {
    let mut acc: Vec<Tensor> = Vec::new();
    for g in grads {
        if acc.is_empty() {
            acc = g.to_vec();
        } else {
            for (a, b) in acc.iter_mut().zip(g) {
                a.add_assign(b);
            }
        }
    }
    for a in &mut acc {
        a.scale(scale);
    }
    acc
}

/// Train from scratch to `config.steps` and return the final checkpoint.
pub fn train(data: Vec<IdentityData>, config: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, data)?;
    t.run(None, |_, _| Ok(()))?;
    Ok(t.to_checkpoint())
}
