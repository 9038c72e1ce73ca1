//! The U-Net backbone and its variants.
//!
//! Layout for `stages = 3` and width `c`:
//! stem `in → c` at full resolution, three encoder stages `c → 2c → 4c → 8c`
//! each halving resolution, then three decoder stages of
//! `bilinear ×2 → concat skip → conv block`, and a 1×1 head.
//!
//! Parameter names follow `stage{i}.{branch}.{layer}.{kind}`: the stem is
//! stage 0, encoders 1..=S, decoders S+1..=2S, the head 2S+1.

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{conv_block_forward, BlockKind, BlockSpec, BoundParams, ConvLayer, ParamDef, ParamStore};
use crate::model::attention::{AttentionOutput, FpaBlock, RfnaBlock};
use crate::model::spec::{NetworkSpec, Variant};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
enum EncoderStage {
    Plain { block: BlockSpec, prefix: String },
    Fpa(FpaBlock),
    Rfna(RfnaBlock),
}

/// Immutable network structure; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    stem: BlockSpec,
    encoders: Vec<EncoderStage>,
    decoders: Vec<(BlockSpec, String)>,
    head: ConvLayer,
}

/// Attention intermediates of one encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTrace {
    /// 1-based encoder stage index.
    pub stage: usize,
    pub out: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// One entry per attention stage (empty for plain variants).
    pub attention: Vec<StageTrace>,
}

impl Network {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let width = spec.width();
        let stem = BlockSpec::new(BlockKind::Stem, spec.in_channels, width);
        let mut encoders = Vec::with_capacity(spec.stages);
        for s in 1..=spec.stages {
            let cin = width << (s - 1);
            let prefix = format!("stage{s}");
            let stage = match spec.variant {
                Variant::Fpa => EncoderStage::Fpa(FpaBlock::new(prefix, cin, spec.fpa.unwrap_or_default())?),
                Variant::Rfna => {
                    EncoderStage::Rfna(RfnaBlock::new(prefix, cin, spec.rfna.unwrap_or_default())?)
                }
                v => EncoderStage::Plain {
                    block: BlockSpec::new(BlockKind::Encoder, cin, 2 * cin)
                        .with_dilation(v.encoder_dilation()),
                    prefix: format!("{prefix}.main"),
                },
            };
            encoders.push(stage);
        }
        let decoders = (1..=spec.stages)
            .rev()
            .enumerate()
            .map(|(k, level)| {
                let deep = width << level;
                let skip = width << (level - 1);
                (
                    BlockSpec::new(BlockKind::Decoder, deep + skip, skip),
                    format!("stage{}.dec", spec.stages + 1 + k),
                )
            })
            .collect();
        let head = ConvLayer::new(
            format!("stage{}.head.conv", 2 * spec.stages + 1),
            ConvSpec::same(width, spec.out_channels, 1),
            false,
        );
        Ok(Network {
            spec: spec.clone(),
            stem,
            encoders,
            decoders,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = self.stem.param_defs("stage0.main");
        for e in &self.encoders {
            match e {
                EncoderStage::Plain { block, prefix } => defs.extend(block.param_defs(prefix)),
                EncoderStage::Fpa(b) => defs.extend(b.param_defs()),
                EncoderStage::Rfna(b) => defs.extend(b.param_defs()),
            }
        }
        for (block, prefix) in &self.decoders {
            defs.extend(block.param_defs(prefix));
        }
        defs.extend(self.head.param_defs());
        defs
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        ParamStore::init(&self.param_defs(), seed)
    }

    /// Name of the head's weight tensor.
    pub fn head_prefix(&self) -> &str {
        &self.head.prefix
    }

    /// Checks that an input of shape `[B, C, H, W]` is admissible.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Shape(format!("network input must be 4-D, got {shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input extent {h}×{w} must be a positive multiple of {m} for variant {}",
                self.spec.variant
            )));
        }
        Ok(())
    }

    /// Full forward pass; returns logits `[B, out, H, W]` plus attention intermediates.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        input: Var,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        let mut feats = vec![conv_block_forward(tape, input, &self.stem, "stage0.main", params)?];
        let mut attention = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            let x = *feats.last().unwrap();
            let y = match e {
                EncoderStage::Plain { block, prefix } => {
                    let p = tape.maxpool2d(x)?;
                    conv_block_forward(tape, p, block, prefix, params)?
                }
                EncoderStage::Fpa(b) => {
                    let out = b.forward(tape, params, x)?;
                    attention.push(StageTrace { stage: i + 1, out });
                    out.y
                }
                EncoderStage::Rfna(b) => {
                    let out = b.forward(tape, params, x)?;
                    attention.push(StageTrace { stage: i + 1, out });
                    out.y
                }
            };
            feats.push(y);
        }
        let mut x = feats.pop().unwrap();
        for (block, prefix) in &self.decoders {
            let skip = feats.pop().unwrap();
            let up = tape.bilinear_upsample(x, 2)?;
            let cat = tape.concat_channels(&[up, skip])?;
            x = conv_block_forward(tape, cat, block, prefix, params)?;
        }
        let logits = self.head.forward(tape, params, x, false)?;
        Ok(ForwardOutput { logits, attention })
    }

    /// Inference-only forward returning the logits tensor.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Builds the network for `spec` and initialises its parameters from `seed`.
pub fn build_unet<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamStore<T>)> {
    let net = Network::build(spec)?;
    let params = net.init_params(seed)?;
    Ok((net, params))
}

pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ParamStore<T>> {
    Network::build(spec)?.init_params(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::{FpaConfig, RfnaConfig};

    fn count(spec: &NetworkSpec) -> usize {
        Network::build(spec)
            .unwrap()
            .param_defs()
            .iter()
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    #[test]
    fn parameter_names_are_unique_and_follow_scheme() {
        for v in Variant::ALL {
            let net = Network::build(&NetworkSpec::new(v)).unwrap();
            let defs = net.param_defs();
            let mut names: Vec<_> = defs.iter().map(|d| d.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), defs.len(), "{v}");
            assert!(names.iter().all(|n| n.starts_with("stage") && n.split('.').count() == 4), "{v}: {names:?}");
        }
    }

    #[test]
    fn dilation_does_not_change_parameter_count() {
        let unet = count(&NetworkSpec::new(Variant::Unet));
        assert_eq!(count(&NetworkSpec::new(Variant::D6unet)), unet);
        assert_eq!(count(&NetworkSpec::new(Variant::D9unet)), unet);
        for d in [6, 9, 12] {
            let a = count(&NetworkSpec::new(Variant::Fpa).with_fpa(FpaConfig { dilation: d, ..Default::default() }));
            assert_eq!(a, count(&NetworkSpec::new(Variant::Fpa)));
        }
    }

    #[test]
    fn rfna_prunes_one_conv_per_halving() {
        let names = |r: usize| -> Vec<String> {
            let spec = NetworkSpec::new(Variant::Rfna).with_rfna(RfnaConfig { ratio: r, ..Default::default() });
            Network::build(&spec)
                .unwrap()
                .param_defs()
                .into_iter()
                .filter(|d| d.name.starts_with("stage1.attn") && d.name.ends_with("weight"))
                .map(|d| d.name)
                .collect()
        };
        assert_eq!(names(8), ["stage1.attn.wa1.weight", "stage1.attn.wa2.weight", "stage1.attn.wa3.weight", "stage1.attn.wa4.weight"]);
        assert_eq!(names(4), ["stage1.attn.wa1.weight", "stage1.attn.wa2.weight", "stage1.attn.wa4.weight"]);
        assert_eq!(names(2), ["stage1.attn.wa1.weight", "stage1.attn.wa4.weight"]);
    }

    #[test]
    fn rejects_indivisible_inputs_naming_the_multiple() {
        let net = Network::build(&NetworkSpec::new(Variant::Rfna).with_base_channels(2)).unwrap();
        let err = net.check_input(&[1, 4, 96, 96]).unwrap_err().to_string();
        assert!(err.contains("64"), "{err}");
        assert!(net.check_input(&[1, 4, 128, 64]).is_ok());
        let unet = Network::build(&NetworkSpec::new(Variant::Unet)).unwrap();
        assert!(unet.check_input(&[1, 4, 36, 36]).unwrap_err().to_string().contains('8'));
        assert!(unet.check_input(&[1, 3, 32, 32]).is_err());
    }
}
