//! The two attention encoder blocks.
//!
//! Both take `X: [B, C, H, W]`, max-pool it once, and run a main branch
//! `F = conv_block(conv_block(pool(X)))` producing `[B, 2C, H/2, W/2]`.
//! The attention branch yields `A ∈ (0, 1)` of the same shape, and the block
//! output is `Y = F ⊙ A + F`.
//!
//! * FPA: `A = σ(W3(Ŵ2(Ŵ2(W1(pool X)))))` where `Ŵ2` is one dilated conv
//!   applied twice with the same weights.
//! * RFNA: `A = σ(W4(up_r(W3(W2(W1(F))))) + F)` where `W1..W3` are stride-2
//!   convs (one per factor of 2 in `r`) and `up_r` is bilinear.

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BlockKind, BlockSpec, BoundParams, ConvLayer, ParamDef};
use crate::model::spec::{FpaConfig, RfnaConfig};
use crate::tensor::Scalar;

/// Intermediates of one attention block, kept for inspection and export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOutput {
    pub y: Var,
    pub f: Var,
    pub a: Var,
}

fn main_branch(in_channels: usize) -> BlockSpec {
    BlockSpec::new(BlockKind::Encoder, in_channels, 2 * in_channels)
}

/// `Y = F ⊙ A + F`
fn combine<T: Scalar>(tape: &mut Tape<T>, f: Var, a: Var) -> Result<Var> {
    let fa = tape.mul(f, a)?;
    tape.add(fa, f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpaBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub cfg: FpaConfig,
    main: BlockSpec,
    wa1: ConvLayer,
    wa2: ConvLayer,
    wa3: ConvLayer,
}

impl FpaBlock {
    pub fn new(prefix: impl Into<String>, in_channels: usize, cfg: FpaConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let out = 2 * in_channels;
        let hidden = cfg.expansion * out;
        let mut shared = ConvSpec::same(hidden, hidden, 3).dilated(cfg.dilation);
        if cfg.depthwise {
            shared = shared.depthwise();
        }
        Ok(FpaBlock {
            main: main_branch(in_channels),
            wa1: ConvLayer::new(
                format!("{prefix}.attn.wa1"),
                ConvSpec::same(in_channels, hidden, 3),
                true,
            ),
            wa2: ConvLayer::new(format!("{prefix}.attn.wa2"), shared, true),
            wa3: ConvLayer::new(format!("{prefix}.attn.wa3"), ConvSpec::same(hidden, out, 3), false),
            prefix,
            in_channels,
            cfg,
        })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.in_channels
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = self.main.param_defs(&format!("{}.main", self.prefix));
        for l in [&self.wa1, &self.wa2, &self.wa3] {
            defs.extend(l.param_defs());
        }
        defs
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
    ) -> Result<AttentionOutput> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {c}",
                self.prefix, self.in_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "{}: spatial extent {h}×{w} is not divisible by 2",
                self.prefix
            )));
        }
        // One pooled tensor feeds both branches so F and A stay aligned.
        let pooled = tape.maxpool2d(x)?;
        let f = crate::layers::conv_block_forward(
            tape,
            pooled,
            &self.main,
            &format!("{}.main", self.prefix),
            params,
        )?;
        let a1 = self.wa1.forward(tape, params, pooled, true)?;
        let a2 = self.wa2.forward(tape, params, a1, true)?;
        let a2 = self.wa2.forward(tape, params, a2, true)?;
        let logits = self.wa3.forward(tape, params, a2, false)?;
        let a = tape.sigmoid(logits);
        let y = combine(tape, f, a)?;
        Ok(AttentionOutput { y, f, a })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfnaBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub cfg: RfnaConfig,
    main: BlockSpec,
    down: Vec<ConvLayer>,
    wa4: ConvLayer,
}

impl RfnaBlock {
    pub fn new(prefix: impl Into<String>, in_channels: usize, cfg: RfnaConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let out = 2 * in_channels;
        let hidden = cfg.expansion * out;
        let down = (0..cfg.strided_convs())
            .map(|i| {
                let spec = if i == 0 {
                    ConvSpec::same(out, hidden, 3).strided(2)
                } else if cfg.depthwise {
                    ConvSpec::same(hidden, hidden, 3).strided(2).depthwise()
                } else {
                    ConvSpec::same(hidden, hidden, 3).strided(2)
                };
                // Planes here can shrink to a single pixel, where instance
                // statistics are undefined, so this branch carries no norm.
                ConvLayer::new(format!("{prefix}.attn.wa{}", i + 1), spec, false)
            })
            .collect();
        Ok(RfnaBlock {
            main: main_branch(in_channels),
            down,
            wa4: ConvLayer::new(format!("{prefix}.attn.wa4"), ConvSpec::same(hidden, out, 1), false),
            prefix,
            in_channels,
            cfg,
        })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.in_channels
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = self.main.param_defs(&format!("{}.main", self.prefix));
        for l in self.down.iter().chain([&self.wa4]) {
            defs.extend(l.param_defs());
        }
        defs
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
    ) -> Result<AttentionOutput> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {c}",
                self.prefix, self.in_channels
            )));
        }
        let multiple = 2 * self.cfg.ratio;
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Shape(format!(
                "{}: spatial extent {h}×{w} must be a multiple of {multiple} \
                 (pooling × attention ratio {})",
                self.prefix, self.cfg.ratio
            )));
        }
        let pooled = tape.maxpool2d(x)?;
        let f = crate::layers::conv_block_forward(
            tape,
            pooled,
            &self.main,
            &format!("{}.main", self.prefix),
            params,
        )?;
        let mut a = f;
        for layer in &self.down {
            a = layer.forward(tape, params, a, true)?;
        }
        let up = tape.bilinear_upsample(a, self.cfg.ratio)?;
        let proj = self.wa4.forward(tape, params, up, false)?;
        let pre = tape.add(proj, f)?;
        let a = tape.sigmoid(pre);
        let y = combine(tape, f, a)?;
        Ok(AttentionOutput { y, f, a })
    }

    /// Output of the last strided conv, before upsampling (for shape inspection).
    pub fn attention_map_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let hidden = self.cfg.expansion * self.out_channels();
        [hidden, h / 2 / self.cfg.ratio, w / 2 / self.cfg.ratio]
    }
}
