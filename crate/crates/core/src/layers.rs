//! Parameter storage and the conv → instance-norm → ReLU building blocks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Gradients, Tape, Var, INSTANCE_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)).
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named learnable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a: stable across platforms and releases, unlike DefaultHasher.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Each tensor draws from its own stream keyed by `(seed, name)`, so a
    /// layer shared by two architectures starts from the same weights.
    pub fn init(defs: &[ParamDef], seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for def in defs {
            let t = match def.init {
                Init::HeNormal { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &def.name));
                    Tensor::randn(&def.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
                Init::Zeros => Tensor::zeros(&def.shape),
                Init::Ones => Tensor::ones(&def.shape),
            };
            if params.insert(def.name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {}", def.name)));
            }
        }
        Ok(ParamStore { params })
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { params }
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as differentiable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Checks names and shapes against a definition list.
    pub fn check_against(&self, defs: &[ParamDef]) -> Result<()> {
        if defs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, architecture defines {}",
                self.params.len(),
                defs.len()
            )));
        }
        for d in defs {
            match self.params.get(&d.name) {
                Some(t) if t.shape() == d.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {}", d.name))),
            }
        }
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to existing tape variables.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Per-parameter gradients, keyed like the store.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.take(*v))).collect()
    }

    /// Parameters the last backward pass never reached.
    pub fn unreached<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, v)| !grads.reached(**v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// One convolution, optionally followed by instance norm, with its parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub prefix: String,
    pub spec: ConvSpec,
    pub norm: bool,
}

impl ConvLayer {
    pub fn new(prefix: impl Into<String>, spec: ConvSpec, norm: bool) -> Self {
        ConvLayer {
            prefix: prefix.into(),
            spec,
            norm,
        }
    }

    fn name(&self, kind: &str) -> String {
        format!("{}.{kind}", self.prefix)
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let [cout, cin_g, kh, kw] = self.spec.weight_shape();
        let mut defs = vec![
            ParamDef {
                name: self.name("weight"),
                shape: vec![cout, cin_g, kh, kw],
                init: Init::HeNormal {
                    fan_in: cin_g * kh * kw,
                },
            },
            ParamDef {
                name: self.name("bias"),
                shape: vec![cout],
                init: Init::Zeros,
            },
        ];
        if self.norm {
            defs.push(ParamDef {
                name: self.name("gamma"),
                shape: vec![cout],
                init: Init::Ones,
            });
            defs.push(ParamDef {
                name: self.name("beta"),
                shape: vec![cout],
                init: Init::Zeros,
            });
        }
        defs
    }

    /// conv → (instance norm) → (relu)
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
        relu: bool,
    ) -> Result<Var> {
        let w = params.get(&self.name("weight"))?;
        let b = params.get(&self.name("bias"))?;
        let mut y = tape.conv2d(x, w, Some(b), &self.spec)?;
        if self.norm {
            let g = params.get(&self.name("gamma"))?;
            let be = params.get(&self.name("beta"))?;
            y = tape.instance_norm(y, g, be, T::from_f64_lossy(INSTANCE_NORM_EPS))?;
        }
        if relu {
            y = tape.relu(y);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Stem,
    Encoder,
    Decoder,
    Head,
}

/// A run of `conv_count` (conv → instance norm → ReLU) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv_count: usize,
    pub dilation: usize,
    pub depthwise: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            conv_count: 2,
            dilation: 1,
            depthwise: false,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if self.dilation == 0 || self.conv_count == 0 {
            return Err(Error::Config("block dilation and conv count must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The concrete layers of this block under `prefix` (`{prefix}.conv{j}`).
    pub fn layers(&self, prefix: &str) -> Vec<ConvLayer> {
        (0..self.conv_count)
            .map(|j| {
                let cin = if j == 0 { self.in_channels } else { self.out_channels };
                let mut spec = ConvSpec::same(cin, self.out_channels, 3).dilated(self.dilation);
                if self.depthwise && self.out_channels % cin == 0 {
                    spec.groups = cin;
                }
                ConvLayer::new(format!("{prefix}.conv{j}"), spec, true)
            })
            .collect()
    }

    pub fn param_defs(&self, prefix: &str) -> Vec<ParamDef> {
        self.layers(prefix).iter().flat_map(|l| l.param_defs()).collect()
    }
}

pub fn conv_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    prefix: &str,
    params: &BoundParams,
) -> Result<Var> {
    spec.validate()?;
    let c = tape.value(x).dims4()?[1];
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "block {prefix} expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    spec.layers(prefix)
        .iter()
        .try_fold(x, |h, layer| layer.forward(tape, params, h, true))
}

pub fn count_params<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.count_params()
}
