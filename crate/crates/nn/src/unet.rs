//! Encoder-decoder network with skip connections, optional scalar
//! conditioning and self-attention at the coarsest resolution.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::layers::{sinusoidal_embedding, Conv2d, Init, Linear, ParamStore, ResBlock, SelfAttention};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; the number of levels is the
    /// length of this list and inputs must be divisible by `2^(levels-1)`.
    pub channel_mults: Vec<usize>,
    /// Self-attention between the two bottleneck blocks.
    pub attention: bool,
    /// Width of the sinusoidal scalar embedding; `None` builds an
    /// unconditioned network.
    pub embed_dim: Option<usize>,
    /// Multiplier on the embedded scalar before the sinusoid.
    pub embed_scale: f64,
    /// Zero the output convolution so the untrained net predicts 0.
    pub zero_init_output: bool,
    pub seed: u64,
}

impl UNetConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.channel_mults.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err("channel counts and base width must be positive".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err("channel_mults must be non-empty and positive".into());
        }
        if let Some(d) = self.embed_dim {
            if d < 2 || d % 2 != 0 {
                return Err(format!("embed_dim must be even and >= 2, got {d}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    in_conv: Conv2d,
    cond_mlp: Option<(Linear, Linear)>,
    down: Vec<ResBlock>,
    mid1: ResBlock,
    attn: Option<SelfAttention>,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new<T: Real>(config: UNetConfig, store: &mut ParamStore<T>) -> Self {
        config.validate().expect("invalid UNet config");
        let mut init = Init::new(config.seed);
        let base = config.base_width;
        let cond_width = config.embed_dim.map(|_| base * 4);
        let cond_mlp = config.embed_dim.map(|d| {
            (
                Linear::new(store, &mut init, "cond.fc1", d, base * 4, 1.0),
                Linear::new(store, &mut init, "cond.fc2", base * 4, base * 4, 1.0),
            )
        });
        let in_conv = Conv2d::new(store, &mut init, "in_conv", config.in_channels, base, 3, 1.0);
        let widths: Vec<usize> = config.channel_mults.iter().map(|m| m * base).collect();
        let mut down = Vec::new();
        let mut ch = base;
        for (l, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(store, &mut init, &format!("down{l}"), ch, w, cond_width));
            ch = w;
        }
        let mid1 = ResBlock::new(store, &mut init, "mid1", ch, ch, cond_width);
        let attn = config.attention.then(|| SelfAttention::new(store, &mut init, "mid_attn", ch));
        let mid2 = ResBlock::new(store, &mut init, "mid2", ch, ch, cond_width);
        let mut up = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(store, &mut init, &format!("up{l}"), ch + w, w, cond_width));
            ch = w;
        }
        let gain = if config.zero_init_output { 0.0 } else { 1.0 };
        let out_conv = Conv2d::new(store, &mut init, "out_conv", ch, config.out_channels, 3, gain);
        Self { config, in_conv, cond_mlp, down, mid1, attn, mid2, up, out_conv }
    }

    /// Forward pass. `x` is `[n, in_channels, h, w]`; `cond` holds one
    /// scalar per batch item and is required iff the net was built with an
    /// embedding.
    pub fn forward<T: Real>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var, cond: Option<&[f64]>) -> Var {
        let (n, c, h, w) = g.value(x).dims4();
        assert_eq!(c, self.config.in_channels, "UNet input channel mismatch");
        let f = self.config.downsample_factor();
        assert!(h % f == 0 && w % f == 0, "spatial size {h}x{w} not divisible by {f}");
        let emb = match (&self.cond_mlp, cond, self.config.embed_dim) {
            (Some((fc1, fc2)), Some(vals), Some(dim)) => {
                assert_eq!(vals.len(), n, "one conditioning scalar per batch item");
                let scaled: Vec<f64> = vals.iter().map(|v| v * self.config.embed_scale).collect();
                let e = g.input(sinusoidal_embedding::<T>(&scaled, dim));
                let e = g.silu(fc1.forward(g, ps, e));
                Some(g.silu(fc2.forward(g, ps, e)))
            }
            (None, None, _) => None,
            _ => panic!("conditioning scalars must be given exactly when the net embeds them"),
        };

        let mut hcur = self.in_conv.forward(g, ps, x);
        let mut skips = Vec::with_capacity(self.down.len());
        let levels = self.down.len();
        for (l, block) in self.down.iter().enumerate() {
            hcur = block.forward(g, ps, hcur, emb);
            skips.push(hcur);
            if l + 1 < levels {
                hcur = g.avg_pool2(hcur);
            }
        }
        hcur = self.mid1.forward(g, ps, hcur, emb);
        if let Some(a) = &self.attn {
            hcur = a.forward(g, ps, hcur);
        }
        hcur = self.mid2.forward(g, ps, hcur, emb);
        for (i, block) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            hcur = g.concat(&[hcur, skips[l]]);
            hcur = block.forward(g, ps, hcur, emb);
            if l > 0 {
                hcur = g.upsample2(hcur);
            }
        }
        self.out_conv.forward(g, ps, g.silu(hcur))
    }

    /// Inference helper that returns the output tensor directly.
    pub fn predict<T: Real>(&self, ps: &ParamStore<T>, x: Tensor<T>, cond: Option<&[f64]>) -> Tensor<T> {
        let g = Graph::inference();
        let xv = g.input(x);
        let y = self.forward(&g, ps, xv, cond);
        let out = g.value(y).clone();
        out
    }
}
