//! Encoder-decoder with skip connections at every resolution level.
//!
//! Each encoder level is a 4×4 stride-2 convolution (instance norm except on
//! the outermost and innermost levels, leaky rectifier with slope 0.2). Each
//! decoder level is a 4×4 stride-2 transposed convolution over the previous
//! decoder output concatenated with the matching encoder activation, followed
//! by instance norm and a rectifier. A final 3×3 convolution sees the
//! full-resolution decoder features together with the stage input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{he_normal, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl StageConfig {
    pub fn new(in_channels: usize, out_channels: usize, depth: usize, base_channels: usize) -> Self {
        StageConfig {
            in_channels,
            out_channels,
            depth,
            base_channels,
            max_channels: base_channels * 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("stage depth must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("stage channel counts must be positive"));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::invalid("max_channels must be >= base_channels"));
        }
        Ok(())
    }

    /// Encoder width per level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| (self.base_channels << l).min(self.max_channels))
            .collect()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Parameter count, computed from the architecture description alone.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let d = self.depth;
        let mut total = 0;
        for l in 0..d {
            let cin = if l == 0 { self.in_channels } else { w[l - 1] };
            total += cin * w[l] * 16 + w[l];
        }
        for l in (0..d).rev() {
            let cin = if l == d - 1 { w[l] } else { 2 * w[l] };
            let cout = if l == 0 { w[0] } else { w[l - 1] };
            total += cin * cout * 16 + cout;
        }
        total + (w[0] + self.in_channels) * self.out_channels * 9 + self.out_channels
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: StageConfig,
    down: Vec<Layer>,
    up: Vec<Layer>,
    head: Layer,
}

impl UNet {
    /// Register the stage's parameters in `store` under `prefix`.
    pub fn new(
        config: StageConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let d = config.depth;
        let mut down = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { config.in_channels } else { w[l - 1] };
            down.push(Layer {
                weight: store.add(
                    format!("{prefix}.down{l}.weight"),
                    he_normal(&[w[l], cin, 4, 4], cin * 16, 1.0, rng),
                ),
                bias: store.add(format!("{prefix}.down{l}.bias"), Tensor::zeros(&[w[l]])),
            });
        }
        let mut up = Vec::with_capacity(d);
        for l in (0..d).rev() {
            let cin = if l == d - 1 { w[l] } else { 2 * w[l] };
            let cout = if l == 0 { w[0] } else { w[l - 1] };
            // A stride-2 transposed 4×4 kernel feeds each output from 4 taps.
            up.push(Layer {
                weight: store.add(
                    format!("{prefix}.up{l}.weight"),
                    he_normal(&[cin, cout, 4, 4], cin * 4, 1.0, rng),
                ),
                bias: store.add(format!("{prefix}.up{l}.bias"), Tensor::zeros(&[cout])),
            });
        }
        let head_in = w[0] + config.in_channels;
        let head = Layer {
            weight: store.add(
                format!("{prefix}.head.weight"),
                he_normal(&[config.out_channels, head_in, 3, 3], head_in * 9, 0.5, rng),
            ),
            bias: store.add(
                format!("{prefix}.head.bias"),
                Tensor::zeros(&[config.out_channels]),
            ),
        };
        Ok(UNet {
            config,
            down,
            up,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && h % m == 0 && w % m == 0 && *h > 0 && *w > 0 => {
                Ok(())
            }
            _ => Err(Error::ShapeMismatch {
                op: "unet input",
                expected: vec![1, self.config.in_channels, m, m],
                actual: shape.to_vec(),
            }),
        }
    }

    /// Forward pass; `vars` are the store's parameters bound on `tape`.
    /// Returns the raw (pre-activation) output.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let d = self.config.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for (l, layer) in self.down.iter().enumerate() {
            h = tape.conv2d(h, vars[layer.weight.0], vars[layer.bias.0], 2, 1);
            if l > 0 && l < d - 1 {
                h = tape.instance_norm(h);
            }
            h = tape.leaky_relu(h, LEAK);
            skips.push(h);
        }
        for (i, layer) in self.up.iter().enumerate() {
            let l = d - 1 - i;
            let input = if l == d - 1 {
                h
            } else {
                tape.concat(&[h, skips[l]])
            };
            h = tape.conv_transpose2d(input, vars[layer.weight.0], vars[layer.bias.0], 2, 1);
            h = tape.instance_norm(h);
            h = tape.relu(h);
        }
        let joined = tape.concat(&[h, x]);
        tape.conv2d(joined, vars[self.head.weight.0], vars[self.head.bias.0], 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::seeded_rng;

    #[test]
    fn param_count_formula_matches_store() {
        for (depth, base) in [(1, 4), (3, 8), (4, 6)] {
            let cfg = StageConfig::new(8, 16, depth, base);
            let mut store = ParamStore::new();
            UNet::new(cfg.clone(), "s", &mut store, &mut seeded_rng(1, 0)).unwrap();
            assert_eq!(store.count(), cfg.param_count());
        }
    }

    #[test]
    fn preserves_resolution() {
        let cfg = StageConfig::new(3, 5, 3, 4);
        let mut store = ParamStore::new();
        let net = UNet::new(cfg, "s", &mut store, &mut seeded_rng(2, 0)).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 3, 16, 24], 0.3));
        let y = net.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y).shape(), &[1, 5, 16, 24]);
        assert!(net.check_input(&[1, 3, 12, 16]).is_err());
    }
}
