//! Toy prompted encoder–decoder: stem conv, stride-2 downsampling stages, a
//! global-average-pooled bottleneck vector feeding the gate, and a decoder
//! whose features are modulated per channel by projections of the composed
//! prompt. The output head is zero-initialized and added residually, so an
//! untrained network reproduces its input bit-exactly for every prompt.

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub prompt_dim: usize,
    pub image_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { base_channels: 16, depth: 2, prompt_dim: 32, image_channels: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be ≥ 4, got {}", self.base_channels)));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be ≥ 1".into()));
        }
        if self.image_channels == 0 || self.prompt_dim == 0 {
            return Err(Error::Config("image_channels and prompt_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the bottleneck feature vector x.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor, // [c_out, c_in, k, k]
    b: Tensor, // [c_out]
}

impl Conv {
    /// He-style seeded init: std = √(2 / fan_in), bias zero.
    fn he(c_out: usize, c_in: usize, k: usize, seed: u64) -> Conv {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv {
            w: Tensor::randn(vec![c_out, c_in, k, k], std, seed).with_requires_grad(),
            b: Tensor::zeros(vec![c_out]).with_requires_grad(),
        }
    }

    fn zeros(c_out: usize, c_in: usize, k: usize) -> Conv {
        Conv {
            w: Tensor::zeros(vec![c_out, c_in, k, k]).with_requires_grad(),
            b: Tensor::zeros(vec![c_out]).with_requires_grad(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    gamma_proj: Vec<Tensor>, // per decoder stage, [C_stage × d_p]
    beta_proj: Vec<Tensor>,
    head: Conv,
}

/// Tape handles for one registration of the parameters.
pub struct BackboneVars {
    stem: (Var, Var),
    down: Vec<(Var, Var)>,
    up: Vec<(Var, Var)>,
    gamma_proj: Vec<Var>,
    beta_proj: Vec<Var>,
    head: (Var, Var),
}

/// Encoder activations kept for the decoder: per-stage skip features plus the
/// bottleneck map and its pooled vector x.
pub struct Encoded {
    skips: Vec<Var>,
    bottleneck: Var,
    pub x: Var,
}

impl Backbone {
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Backbone> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let stem = Conv::he(b, cfg.image_channels, 3, seeds::derive1(seed, "stem", 0));
        let down = (0..cfg.depth)
            .map(|s| Conv::he(b << (s + 1), b << s, 3, seeds::derive1(seed, "down", s as u64)))
            .collect();
        let up: Vec<Conv> = (0..cfg.depth)
            .map(|s| {
                let c_in = b << (cfg.depth - s);
                Conv::he(c_in / 2, c_in, 3, seeds::derive1(seed, "up", s as u64))
            })
            .collect();
        // Modulation projections start small but nonzero: the zero-init head
        // alone guarantees the identity at step 0, and nonzero projections
        // let prompt sensitivity appear as soon as the head moves.
        let gamma_proj = (0..cfg.depth)
            .map(|s| {
                let c = b << (cfg.depth - s - 1);
                Tensor::randn(vec![c, cfg.prompt_dim], 0.02, seeds::derive1(seed, "gamma", s as u64))
                    .with_requires_grad()
            })
            .collect();
        let beta_proj = (0..cfg.depth)
            .map(|s| {
                let c = b << (cfg.depth - s - 1);
                Tensor::randn(vec![c, cfg.prompt_dim], 0.02, seeds::derive1(seed, "beta", s as u64))
                    .with_requires_grad()
            })
            .collect();
        let head = Conv::zeros(cfg.image_channels, b, 3);
        Ok(Backbone { cfg, stem, down, up, gamma_proj, beta_proj, head })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.stem.w".to_string(), &self.stem.w),
            ("backbone.stem.b".to_string(), &self.stem.b),
        ];
        for (i, c) in self.down.iter().enumerate() {
            out.push((format!("backbone.down{i}.w"), &c.w));
            out.push((format!("backbone.down{i}.b"), &c.b));
        }
        for (i, c) in self.up.iter().enumerate() {
            out.push((format!("backbone.up{i}.w"), &c.w));
            out.push((format!("backbone.up{i}.b"), &c.b));
        }
        for (i, t) in self.gamma_proj.iter().enumerate() {
            out.push((format!("backbone.mod{i}.gamma"), t));
        }
        for (i, t) in self.beta_proj.iter().enumerate() {
            out.push((format!("backbone.mod{i}.beta"), t));
        }
        out.push(("backbone.head.w".to_string(), &self.head.w));
        out.push(("backbone.head.b".to_string(), &self.head.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("backbone.stem.w".to_string(), &mut self.stem.w),
            ("backbone.stem.b".to_string(), &mut self.stem.b),
        ];
        for (i, c) in self.down.iter_mut().enumerate() {
            out.push((format!("backbone.down{i}.w"), &mut c.w));
            out.push((format!("backbone.down{i}.b"), &mut c.b));
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            out.push((format!("backbone.up{i}.w"), &mut c.w));
            out.push((format!("backbone.up{i}.b"), &mut c.b));
        }
        for (i, t) in self.gamma_proj.iter_mut().enumerate() {
            out.push((format!("backbone.mod{i}.gamma"), t));
        }
        for (i, t) in self.beta_proj.iter_mut().enumerate() {
            out.push((format!("backbone.mod{i}.beta"), t));
        }
        out.push(("backbone.head.w".to_string(), &mut self.head.w));
        out.push(("backbone.head.b".to_string(), &mut self.head.b));
        out
    }

    /// Put every parameter on the tape once; reuse the handles for all
    /// forward passes sharing that tape.
    pub fn register(&self, tape: &mut Tape) -> Result<BackboneVars> {
        let conv = |tape: &mut Tape, c: &Conv| -> Result<(Var, Var)> {
            Ok((tape.leaf(&c.w)?, tape.leaf(&c.b)?))
        };
        Ok(BackboneVars {
            stem: conv(tape, &self.stem)?,
            down: self.down.iter().map(|c| conv(tape, c)).collect::<Result<_>>()?,
            up: self.up.iter().map(|c| conv(tape, c)).collect::<Result<_>>()?,
            gamma_proj: self.gamma_proj.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?,
            beta_proj: self.beta_proj.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?,
            head: conv(tape, &self.head)?,
        })
    }

    /// Gradients for every parameter after a backward pass, keyed like
    /// `named_params`, in the same order.
    pub fn grads<'t>(&self, tape: &'t Tape, vars: &BackboneVars) -> Vec<(String, Option<&'t [f64]>)> {
        let mut out = vec![
            ("backbone.stem.w".to_string(), tape.grad(vars.stem.0)),
            ("backbone.stem.b".to_string(), tape.grad(vars.stem.1)),
        ];
        for (i, v) in vars.down.iter().enumerate() {
            out.push((format!("backbone.down{i}.w"), tape.grad(v.0)));
            out.push((format!("backbone.down{i}.b"), tape.grad(v.1)));
        }
        for (i, v) in vars.up.iter().enumerate() {
            out.push((format!("backbone.up{i}.w"), tape.grad(v.0)));
            out.push((format!("backbone.up{i}.b"), tape.grad(v.1)));
        }
        for (i, v) in vars.gamma_proj.iter().enumerate() {
            out.push((format!("backbone.mod{i}.gamma"), tape.grad(*v)));
        }
        for (i, v) in vars.beta_proj.iter().enumerate() {
            out.push((format!("backbone.mod{i}.beta"), tape.grad(*v)));
        }
        out.push(("backbone.head.w".to_string(), tape.grad(vars.head.0)));
        out.push(("backbone.head.b".to_string(), tape.grad(vars.head.1)));
        out
    }

    fn conv_block(tape: &mut Tape, x: Var, (w, b): (Var, Var), stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, w, stride, Padding::Same)?;
        let y = tape.add_channel(y, b)?;
        tape.relu(y)
    }

    /// Encoder: stem + stride-2 stages; x is the pooled bottleneck vector.
    pub fn encode(&self, tape: &mut Tape, vars: &BackboneVars, img: Var) -> Result<Encoded> {
        let [c, h, w] = *tape.shape(img) else {
            return Err(Error::shape("encode", format!("expects C×H×W, got {:?}", tape.shape(img))));
        };
        if c != self.cfg.image_channels {
            return Err(Error::shape(
                "encode",
                format!("expects {} channels, got {c}", self.cfg.image_channels),
            ));
        }
        let div = 1 << self.cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "encode",
                format!("spatial size {h}×{w} not divisible by 2^depth = {div}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut cur = Self::conv_block(tape, img, vars.stem, 1)?;
        for stage in vars.down.iter() {
            skips.push(cur);
            cur = Self::conv_block(tape, cur, *stage, 2)?;
        }
        let x = tape.spatial_mean(cur)?;
        Ok(Encoded { skips, bottleneck: cur, x })
    }

    /// Decoder: upsample, halve channels, add the matching skip, modulate by
    /// (1+γ(p), β(p)), then the residual zero-init head.
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        img: Var,
        enc: &Encoded,
        p: Var,
    ) -> Result<Var> {
        if tape.shape(p) != [self.cfg.prompt_dim] {
            return Err(Error::shape(
                "decode",
                format!("prompt {:?} vs prompt_dim {}", tape.shape(p), self.cfg.prompt_dim),
            ));
        }
        let p_col = tape.reshape(p, vec![self.cfg.prompt_dim, 1])?;
        let mut cur = enc.bottleneck;
        for (s, stage) in vars.up.iter().enumerate() {
            let upped = tape.upsample2x(cur)?;
            let y = tape.conv2d(upped, stage.0, 1, Padding::Same)?;
            let y = tape.add_channel(y, stage.1)?;
            let skip = enc.skips[self.cfg.depth - 1 - s];
            let y = tape.add(y, skip)?;
            let c = tape.shape(y)[0];
            let gamma = tape.matmul(vars.gamma_proj[s], p_col)?;
            let gamma = tape.reshape(gamma, vec![c])?;
            let beta = tape.matmul(vars.beta_proj[s], p_col)?;
            let beta = tape.reshape(beta, vec![c])?;
            let scale = tape.add_scalar(gamma, 1.0)?;
            let y = tape.mul_channel(y, scale)?;
            let y = tape.add_channel(y, beta)?;
            cur = tape.relu(y)?;
        }
        let delta = tape.conv2d(cur, vars.head.0, 1, Padding::Same)?;
        let delta = tape.add_channel(delta, vars.head.1)?;
        tape.add(img, delta)
    }

    /// Full restoration pass. Callers sharing one encode across several
    /// prompts should use `encode` + `decode` directly.
    pub fn restore(&self, tape: &mut Tape, vars: &BackboneVars, img: Var, p: Var) -> Result<Var> {
        let enc = self.encode(tape, vars, img)?;
        self.decode(tape, vars, img, &enc, p)
    }
}
