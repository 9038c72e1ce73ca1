//! Subcommand implementations.

pub mod erf;
pub mod eval;
pub mod synth;
pub mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use erfseg::io::{decode_checkpoint, encode_checkpoint, write_atomic};
use erfseg::layers::ParamStore;
use erfseg::model::{Network, NetworkSpec};
use erfseg::{Scalar, Tensor};

use crate::ConfigError;

/// Checkpoint entry holding the network spec as UTF-8 JSON bytes.
pub const META_NETWORK: &str = "meta.network";

pub fn create_out_dir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn encode_meta<T: Scalar>(spec: &NetworkSpec) -> Tensor<T> {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let data = json.iter().map(|&b| T::from_f64_lossy(b as f64)).collect::<Vec<_>>();
    Tensor::from_vec(vec![json.len()], data).expect("1-d meta tensor")
}

fn decode_meta<T: Scalar>(t: &Tensor<T>) -> anyhow::Result<NetworkSpec> {
    let bytes = t
        .data()
        .iter()
        .map(|v| {
            let x = v.to_f64_lossy();
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                anyhow::bail!("{META_NETWORK} holds a non-byte value")
            }
        })
        .collect::<anyhow::Result<Vec<u8>>>()?;
    Ok(serde_json::from_slice(&bytes).context("decoding the network spec")?)
}

/// Writes `entries` plus the network spec.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    spec: &NetworkSpec,
    mut entries: BTreeMap<String, Tensor<T>>,
) -> anyhow::Result<()> {
    entries.insert(META_NETWORK.into(), encode_meta(spec));
    write_atomic(path, &encode_checkpoint(&entries)?)?;
    Ok(())
}

/// Reads a checkpoint into its network spec and the remaining entries.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> anyhow::Result<(NetworkSpec, BTreeMap<String, Tensor<T>>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries = decode_checkpoint::<T>(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let meta = entries
        .remove(META_NETWORK)
        .ok_or_else(|| ConfigError(format!("{} carries no network spec", path.display())))?;
    Ok((decode_meta(&meta)?, entries))
}

/// Network and parameters from a checkpoint, ignoring optimizer and counter entries.
pub fn load_model<T: Scalar>(path: &Path) -> anyhow::Result<(Network, ParamStore<T>)> {
    let (spec, entries) = read_checkpoint::<T>(path)?;
    let net = Network::build(&spec)?;
    let params: BTreeMap<_, _> = entries
        .into_iter()
        .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("train."))
        .collect();
    let params = ParamStore::from_map(params);
    params.check_against(&net.param_defs())?;
    Ok((net, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use erfseg::model::{build_unet, Variant};

    #[test]
    fn checkpoint_round_trips_spec_and_params() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::new(Variant::Rfna).with_base_channels(2);
        let (_, p) = build_unet::<f32>(&spec, 4).unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &spec, p.as_map().clone()).unwrap();
        let (net, back) = load_model::<f32>(&path).unwrap();
        assert_eq!(net.spec(), &spec);
        assert_eq!(back, p);
        let (_, wide) = load_model::<f64>(&path).unwrap();
        assert_eq!(wide, p.cast::<f64>());
    }
}
