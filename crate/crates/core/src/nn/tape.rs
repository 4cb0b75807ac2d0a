//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Gradients are seeded at arbitrary nodes (`backward` takes a list of
//! `(node, dL/dnode)` pairs), which lets the loss terms supply their analytic
//! gradients directly instead of being recorded as tape ops.

use super::kernels;
use crate::tensor::Tensor;
use crate::texture::BilinearLookup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Channels {
        x: Var,
        start: usize,
    },
    AvgPool2 {
        x: Var,
    },
    Blend {
        image: Var,
        mask: Var,
        background: Tensor,
    },
    Sample {
        texture: Var,
        lookup: Box<BilinearLookup>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d(self.value(x), self.value(w), Some(self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            Some(self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y, Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut y = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.data().chunks(plane).zip(y.data_mut().chunks_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(y, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let plane = h * w;
        let total: usize = parts.iter().map(|p| self.value(*p).dims4().1).sum();
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let v = self.value(*p);
                let (pn, pc, ph, pw) = v.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial mismatch");
                data.extend_from_slice(&v.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, total, h, w], data).expect("concat size");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn channels(&mut self, x: Var, start: usize, count: usize) -> Var {
        let y = self.value(x).channels(start, count);
        let rg = self.rg(x);
        self.push(y, Op::Channels { x, start }, rg)
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let src = xv.data();
        for (p, dst) in y.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::AvgPool2 { x }, rg)
    }

    /// `mask · image + (1 − mask) · background`, mask broadcast over channels.
    pub fn blend(&mut self, image: Var, mask: Var, background: Tensor) -> Var {
        let y = blend_values(self.value(image), self.value(mask), &background);
        let rg = self.rg(image) || self.rg(mask);
        self.push(
            y,
            Op::Blend {
                image,
                mask,
                background,
            },
            rg,
        )
    }

    /// Bilinear texture lookup; `texture` is `[C, Ht, Wt]`, result `[1, C, H, W]`.
    pub fn sample(&mut self, texture: Var, lookup: BilinearLookup) -> Var {
        let y = lookup.gather(self.value(texture));
        let rg = self.rg(texture);
        self.push(
            y,
            Op::Sample {
                texture,
                lookup: Box::new(lookup),
            },
            rg,
        )
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Take the accumulated gradient of a leaf, or zeros if none reached it.
    pub fn take_grad(&mut self, v: Var) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Propagate the seeded gradients back to every leaf that requires them.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor)>) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut self.grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (input, grad) in self.input_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut self.grads[input.0], grad);
                }
            }
        }
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                collect_conv(grads, *x, *w, *b)
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                collect_conv(grads, *x, *w, *b)
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let plane = h * w;
                let mut dx = Tensor::zeros(y.shape());
                for (p, ((dxp, gp), yp)) in dx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(g.data().chunks(plane))
                    .zip(y.data().chunks(plane))
                    .enumerate()
                {
                    let mg = gp.iter().sum::<f64>() / plane as f64;
                    let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    let is = inv_std[p];
                    for ((d, gv), yv) in dxp.iter_mut().zip(gp).zip(yp) {
                        *d = is * (gv - mg - yv * mgy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *d *= slope;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Tanh { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= 1.0 - y * y;
                }
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                vec![(*x, dx)]
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let pc = self.value(*p).dims4().1;
                    let mut data = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        let base = (b * total + offset) * plane;
                        data.extend_from_slice(&g.data()[base..base + pc * plane]);
                    }
                    out.push((*p, Tensor::from_vec(&[n, pc, h, w], data).unwrap()));
                    offset += pc;
                }
                out
            }
            Op::Channels { x, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let count = g.dims4().1;
                let plane = h * w;
                let mut dx = Tensor::zeros(&xs);
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * count * plane;
                    dx.data_mut()[dst..dst + count * plane]
                        .copy_from_slice(&g.data()[src..src + count * plane]);
                }
                vec![(*x, dx)]
            }
            Op::AvgPool2 { x } => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (_, _, oh, ow) = g.dims4();
                let mut dx = Tensor::zeros(&xs);
                for (dst, src) in dx
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(g.data().chunks(oh * ow))
                {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * src[oy * ow + ox];
                            let i = 2 * oy * w + 2 * ox;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Blend {
                image,
                mask,
                background,
            } => {
                let (dimg, dmask) =
                    blend_backward(self.value(*image), self.value(*mask), background, g);
                vec![(*image, dimg), (*mask, dmask)]
            }
            Op::Sample { texture, lookup } => {
                let shape = self.value(*texture).shape().to_vec();
                vec![(*texture, lookup.scatter(g, &shape))]
            }
        }
    }
}

fn collect_conv(grads: kernels::ConvGrads, x: Var, w: Var, b: Var) -> Vec<(Var, Tensor)> {
    let mut out = Vec::with_capacity(3);
    if let Some(dx) = grads.dx {
        out.push((x, dx));
    }
    if let Some(dw) = grads.dw {
        out.push((w, dw));
    }
    if let Some(db) = grads.db {
        out.push((b, db));
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `mask · image + (1 − mask) · background` for `[N, C, H, W]` images and a
/// `[N, 1, H, W]` mask.
pub fn blend_values(image: &Tensor, mask: &Tensor, background: &Tensor) -> Tensor {
    let (n, c, h, w) = image.dims4();
    assert_eq!(mask.shape(), &[n, 1, h, w], "blend mask shape");
    assert_eq!(background.shape(), image.shape(), "blend background shape");
    let plane = h * w;
    let mut y = Tensor::zeros(image.shape());
    for b in 0..n {
        let m = &mask.data()[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let mv = m[p];
                y.data_mut()[base + p] =
                    mv * image.data()[base + p] + (1.0 - mv) * background.data()[base + p];
            }
        }
    }
    y
}

/// Gradients of [`blend_values`] with respect to image and mask.
pub fn blend_backward(
    image: &Tensor,
    mask: &Tensor,
    background: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = image.dims4();
    let plane = h * w;
    let mut dimg = Tensor::zeros(image.shape());
    let mut dmask = Tensor::zeros(mask.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let gv = g.data()[base + p];
                dimg.data_mut()[base + p] = mask.data()[b * plane + p] * gv;
                dmask.data_mut()[b * plane + p] +=
                    (image.data()[base + p] - background.data()[base + p]) * gv;
            }
        }
    }
    (dimg, dmask)
}
