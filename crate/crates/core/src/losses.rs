//! Training objectives and their analytic gradients.
//!
//! Every loss is a mean over its elements. Gradient functions return
//! `dL/d(input)` tensors that the trainer feeds to [`Tape::backward`] as
//! seeds.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::params::{he_normal, seeded_rng};
use crate::nn::tape::blend_values;
use crate::nn::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_feat: f64,
    pub lambda_mask: f64,
    pub lambda_adv: f64,
    pub lambda_tv: f64,
    pub beta_i: f64,
    pub beta_m: f64,
    /// One weight per feature-extractor layer.
    pub feature_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 1.0,
            lambda_feat: 1.0,
            lambda_mask: 0.5,
            lambda_adv: 0.1,
            lambda_tv: 1.0,
            beta_i: 1e-4,
            beta_m: 1e-3,
            feature_weights: vec![1.0; FEATURE_WIDTHS.len()],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.lambda_p,
            self.lambda_feat,
            self.lambda_mask,
            self.lambda_adv,
            self.lambda_tv,
            self.beta_i,
            self.beta_m,
        ];
        if scalars
            .iter()
            .chain(&self.feature_weights)
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    ensure_shape(op, a.shape(), b.shape())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `M̂·Î + (1 − M̂)·B`; `image` `[N, C, H, W]`, `mask` `[N, 1, H, W]`,
/// `background` `[N, C, H, W]` or `[C, H, W]`.
pub fn blend(image: &Tensor, mask: &Tensor, background: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = image.dims4();
    ensure_shape("blend mask", &[n, 1, h, w], mask.shape())?;
    if background.len() != image.len() {
        return Err(Error::ShapeMismatch {
            op: "blend background",
            expected: image.shape().to_vec(),
            actual: background.shape().to_vec(),
        });
    }
    let bg = background.clone().reshape(image.shape())?;
    Ok(blend_values(image, mask, &bg))
}

/// Mask-weighted L1 on both RGB predictions, each term averaged over
/// `N·3·H·W`. `j_hat` is absent for single-stage models.
pub fn pixel_loss(j_hat: Option<&Tensor>, i_hat: &Tensor, m_hat: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pixel_loss_grad(j_hat, i_hat, m_hat, target)?.value)
}

pub struct PixelGrads {
    pub value: f64,
    pub d_j: Option<Tensor>,
    pub d_i: Tensor,
    pub d_m: Tensor,
}

pub fn pixel_loss_grad(
    j_hat: Option<&Tensor>,
    i_hat: &Tensor,
    m_hat: &Tensor,
    target: &Tensor,
) -> Result<PixelGrads> {
    check_same("pixel loss", i_hat, target)?;
    if let Some(j) = j_hat {
        check_same("pixel loss", j, target)?;
    }
    let (n, c, h, w) = target.dims4();
    ensure_shape("pixel loss mask", &[n, 1, h, w], m_hat.shape())?;
    let plane = h * w;
    let scale = 1.0 / target.len() as f64;
    let mut value = 0.0;
    let mut d_m = Tensor::zeros(m_hat.shape());
    let mut term = |pred: &Tensor, d_m: &mut Tensor| -> Tensor {
        let mut d = Tensor::zeros(pred.shape());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    let i = (b * c + ch) * plane + p;
                    let mi = b * plane + p;
                    let m = m_hat.data()[mi];
                    let diff = pred.data()[i] - target.data()[i];
                    value += m * diff.abs() * scale;
                    d.data_mut()[i] = m * sign(diff) * scale;
                    d_m.data_mut()[mi] += diff.abs() * scale;
                }
            }
        }
        d
    };
    let d_j = j_hat.map(|j| term(j, &mut d_m));
    let d_i = term(i_hat, &mut d_m);
    Ok(PixelGrads { value, d_j, d_i, d_m })
}

/// Plain mean absolute error, with its gradient w.r.t. `pred`.
pub fn l1_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("l1 loss", pred, target)?;
    let scale = 1.0 / pred.len() as f64;
    let mut d = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        value += (p - t).abs() * scale;
        d.data_mut()[i] = sign(p - t) * scale;
    }
    Ok((value, d))
}

/// Mean binary cross entropy with the prediction clamped to `[ε, 1 − ε]`.
pub fn mask_loss(m_hat: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mask_loss_grad(m_hat, target)?.0)
}

pub fn mask_loss_grad(m_hat: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("mask loss", m_hat, target)?;
    let scale = 1.0 / m_hat.len() as f64;
    let mut d = Tensor::zeros(m_hat.shape());
    let mut value = 0.0;
    for (i, (&p, &t)) in m_hat.data().iter().zip(target.data()).enumerate() {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        value -= (t * q.ln() + (1.0 - t) * (1.0 - q).ln()) * scale;
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            d.data_mut()[i] = (q - t) / (q * (1.0 - q)) * scale;
        }
    }
    Ok((value, d))
}

/// Mean absolute forward difference: horizontal and vertical sums over all
/// channels, divided by `N·C·H·W`.
pub fn total_variation(x: &Tensor) -> f64 {
    total_variation_grad(x).0
}

pub fn total_variation_grad(x: &Tensor) -> (f64, Tensor) {
    let (n, c, h, w) = x.dims4();
    let scale = 1.0 / x.len() as f64;
    let mut d = Tensor::zeros(x.shape());
    let mut value = 0.0;
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if xx + 1 < w {
                    let diff = src[i + 1] - src[i];
                    value += diff.abs() * scale;
                    let s = sign(diff) * scale;
                    d.data_mut()[i + 1] += s;
                    d.data_mut()[i] -= s;
                }
                if y + 1 < h {
                    let diff = src[i + w] - src[i];
                    value += diff.abs() * scale;
                    let s = sign(diff) * scale;
                    d.data_mut()[i + w] += s;
                    d.data_mut()[i] -= s;
                }
            }
        }
    }
    (value, d)
}

/// `β_I·TV(Î′) + β_m·TV(M̂)`.
pub fn tv_loss(blended: &Tensor, m_hat: &Tensor, beta_i: f64, beta_m: f64) -> f64 {
    beta_i * total_variation(blended) + beta_m * total_variation(m_hat)
}

/// Least-squares generator term: mean over scales of `mean (D − 1)²`.
pub fn adv_loss(scores: &[Tensor]) -> f64 {
    adv_loss_grad(scores).0
}

pub fn adv_loss_grad(scores: &[Tensor]) -> (f64, Vec<Tensor>) {
    ls_term(scores, 1.0)
}

fn ls_term(scores: &[Tensor], target: f64) -> (f64, Vec<Tensor>) {
    let k = scores.len().max(1) as f64;
    let mut value = 0.0;
    let grads = scores
        .iter()
        .map(|s| {
            let scale = 1.0 / (s.len() as f64 * k);
            value += s.data().iter().map(|d| (d - target).powi(2)).sum::<f64>() * scale;
            s.map(|d| 2.0 * (d - target) * scale)
        })
        .collect();
    (value, grads)
}

/// Least-squares discriminator objective:
/// mean over scales of `mean (D(real) − 1)² + mean D(fake)²`.
pub fn disc_loss(real: &[Tensor], fake: &[Tensor]) -> f64 {
    disc_loss_grad(real, fake).0
}

pub fn disc_loss_grad(real: &[Tensor], fake: &[Tensor]) -> (f64, Vec<Tensor>, Vec<Tensor>) {
    let (vr, gr) = ls_term(real, 1.0);
    let (vf, gf) = ls_term(fake, 0.0);
    (vr + vf, gr, gf)
}

/// Output widths of the default extractor's layers.
pub const FEATURE_WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Fixed convolutional pyramid: 3×3 stride-2 convolutions with rectifiers.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    params: ParamStore,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 300);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (j, &cout) in FEATURE_WIDTHS.iter().enumerate() {
            params.add(format!("phi{j}.weight"), he_normal(&[cout, cin, 3, 3], cin * 9, 1.0, &mut rng));
            params.add(format!("phi{j}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        FeatureExtractor { seed, params }
    }

    /// Use externally supplied `(weight [Cout, Cin, 3, 3], bias [Cout])` layers.
    pub fn from_weights(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (j, (w, b)) in layers.into_iter().enumerate() {
            let cout = w.shape().first().copied().unwrap_or(0);
            ensure_shape("feature layer weight", &[cout, cin, 3, 3], w.shape())?;
            ensure_shape("feature layer bias", &[cout], b.shape())?;
            params.add(format!("phi{j}.weight"), w);
            params.add(format!("phi{j}.bias"), b);
            cin = cout;
        }
        if params.is_empty() {
            return Err(Error::invalid("feature extractor needs at least one layer"));
        }
        Ok(FeatureExtractor { seed: 0, params })
    }

    pub fn layer_count(&self) -> usize {
        self.params.len() / 2
    }

    /// Record the pyramid on `tape`; returns one activation per layer.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let vars = self.params.bind(tape, false);
        let mut x = image;
        (0..self.layer_count())
            .map(|j| {
                let h = tape.conv2d(x, vars[2 * j], vars[2 * j + 1], 2, 1);
                x = tape.relu(h);
                x
            })
            .collect()
    }

    pub fn features(&self, image: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = self.forward(&mut tape, x);
        vars.into_iter().map(|v| tape.value(v).clone()).collect()
    }
}

/// `Σ_j w_j · mean |φ_j(a) − φ_j(b)|` over precomputed features.
pub fn feature_loss_from(fa: &[Tensor], fb: &[Tensor], weights: &[f64]) -> Result<f64> {
    Ok(feature_loss_grad(fa, fb, weights)?.0)
}

/// Value and gradient w.r.t. each of `fa`.
pub fn feature_loss_grad(fa: &[Tensor], fb: &[Tensor], weights: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    if fa.len() != fb.len() || weights.len() != fa.len() {
        return Err(Error::DimensionMismatch(format!(
            "feature loss: {} / {} layers, {} weights",
            fa.len(),
            fb.len(),
            weights.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for ((a, b), &wj) in fa.iter().zip(fb).zip(weights) {
        let (v, mut g) = l1_loss_grad(a, b)?;
        value += wj * v;
        g.scale(wj);
        grads.push(g);
    }
    Ok((value, grads))
}

pub fn feature_loss(extractor: &FeatureExtractor, blended: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    check_same("feature loss", blended, target)?;
    feature_loss_from(&extractor.features(blended), &extractor.features(target), weights)
}

/// Unweighted loss values of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pixel: f64,
    pub feature: f64,
    pub mask: f64,
    pub adversarial: f64,
    pub tv: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("pixel", self.pixel),
            ("feature", self.feature),
            ("mask", self.mask),
            ("adversarial", self.adversarial),
            ("tv", self.tv),
        ]
    }

    /// λ-weighted terms in the same order as [`named`](Self::named).
    pub fn weighted(&self, w: &LossWeights) -> [(&'static str, f64); 5] {
        [
            ("pixel", w.lambda_p * self.pixel),
            ("feature", w.lambda_feat * self.feature),
            ("mask", w.lambda_mask * self.mask),
            ("adversarial", w.lambda_adv * self.adversarial),
            ("tv", w.lambda_tv * self.tv),
        ]
    }
}

/// `Σ λ_i L_i`; a non-finite term aborts with its name.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, step: u64) -> Result<f64> {
    let mut total = 0.0;
    for (name, v) in terms.weighted(weights) {
        if !v.is_finite() {
            return Err(Error::NumericalAbort {
                term: name.to_string(),
                step,
            });
        }
        total += v;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn blend_cases() {
        let i = Tensor::full(&[1, 3, 2, 2], 1.0);
        let b = Tensor::full(&[1, 3, 2, 2], 0.0);
        assert_eq!(blend(&i, &Tensor::full(&[1, 1, 2, 2], 1.0), &b).unwrap(), i);
        assert_eq!(blend(&i, &Tensor::full(&[1, 1, 2, 2], 0.0), &b).unwrap(), b);
        assert_eq!(
            blend(&i, &Tensor::full(&[1, 1, 2, 2], 0.5), &b).unwrap(),
            Tensor::full(&[1, 3, 2, 2], 0.5)
        );
        assert!(blend(&i, &Tensor::full(&[1, 1, 2, 3], 0.5), &b).is_err());
    }

    #[test]
    fn pixel_values() {
        let target = t4((0..12).map(|x| x as f64 * 0.1 - 0.5).collect(), &[1, 3, 2, 2]);
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(pixel_loss(Some(&target), &target, &ones, &target).unwrap(), 0.0);
        let off = target.map(|x| x + 0.1);
        let v = pixel_loss(Some(&off), &target, &ones, &target).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let zeros = Tensor::zeros(&[1, 1, 2, 2]);
        assert_eq!(pixel_loss(Some(&off), &off, &zeros, &target).unwrap(), 0.0);
    }

    #[test]
    fn bce_values() {
        let m = t4(vec![0.0, 1.0, 1.0, 0.0], &[1, 1, 2, 2]);
        assert!(mask_loss(&m, &m).unwrap() <= 2e-6);
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!((mask_loss(&half, &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let v = mask_loss(&Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!((v - 13.8155).abs() < 1e-3);
    }

    #[test]
    fn tv_values() {
        let x = t4(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]);
        assert!((tv_loss(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(total_variation(&Tensor::full(&[1, 3, 4, 4], 0.7)), 0.0);
        assert!((tv_loss(&x, &x, 3.0, 0.0) - 3.0 * tv_loss(&x, &x, 1.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_values() {
        let ones = vec![Tensor::full(&[1, 1, 4, 4], 1.0), Tensor::full(&[1, 1, 2, 2], 1.0)];
        let zeros = vec![Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&[1, 1, 2, 2])];
        assert_eq!(adv_loss(&ones), 0.0);
        assert!((adv_loss(&zeros) - 1.0).abs() < 1e-12);
        assert_eq!(disc_loss(&ones, &zeros), 0.0);
    }

    #[test]
    fn total_hand_sum() {
        let w = LossWeights {
            lambda_p: 1.0,
            lambda_feat: 0.5,
            lambda_mask: 1.0,
            lambda_adv: 0.1,
            lambda_tv: 0.01,
            ..LossWeights::default()
        };
        let terms = LossTerms {
            pixel: 0.2,
            feature: 0.4,
            mask: 0.1,
            adversarial: 1.0,
            tv: 2.0,
        };
        assert!((total_loss(&terms, &w, 0).unwrap() - 0.62).abs() < 1e-9);
        let zero = LossWeights {
            lambda_p: 0.0,
            lambda_feat: 0.0,
            lambda_mask: 0.0,
            lambda_adv: 0.0,
            lambda_tv: 0.0,
            ..w.clone()
        };
        assert_eq!(total_loss(&terms, &zero, 0).unwrap(), 0.0);
        let bad = LossTerms { feature: f64::NAN, ..terms };
        match total_loss(&bad, &w, 17) {
            Err(Error::NumericalAbort { term, step }) => {
                assert_eq!(term, "feature");
                assert_eq!(step, 17);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn feature_loss_properties() {
        let fx = FeatureExtractor::new(5);
        let a = t4((0..3 * 16 * 16).map(|i| (i as f64 * 0.3).sin()).collect(), &[1, 3, 16, 16]);
        let b = a.map(|v| 0.8 * v + 0.1);
        let w = vec![1.0; fx.layer_count()];
        assert_eq!(feature_loss(&fx, &a, &a, &w).unwrap(), 0.0);
        let v = feature_loss(&fx, &a, &b, &w).unwrap();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        assert!((feature_loss(&fx, &a, &b, &w2).unwrap() - 2.0 * v).abs() < 1e-12);
        assert_eq!(FeatureExtractor::new(5).features(&a), fx.features(&a));
    }
}
