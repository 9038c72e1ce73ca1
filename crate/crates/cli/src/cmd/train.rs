use std::fs;
use std::path::Path;

use anyhow::Context;
use erfseg::io::write_atomic;
use erfseg::model::{build_unet, Network, NetworkSpec};
use erfseg::train::trainer::{curves_from_csv, curves_to_csv};
use erfseg::train::{evaluate, gen_synthetic, read_dataset, train, Dataset, TrainConfig, TrainState};
use erfseg::Scalar;

use crate::cmd::{create_out_dir, load_model, read_checkpoint, write_checkpoint};
use crate::config::{DataKind, RunConfig};
use crate::manifest::ManifestWriter;
use crate::{ConfigError, Globals, Precision, TrainArgs};

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const CURVES: &str = "curves.csv";
pub const METRICS: &str = "metrics.csv";
pub const CONFIG: &str = "config.toml";

pub fn run(args: &TrainArgs, g: Globals) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = Some(e);
    }
    if let Some(s) = g.seed {
        cfg.train.seed = Some(s);
        cfg.data.synthetic.seed = s;
    }
    if let Some(d) = &args.data {
        cfg.data.kind = DataKind::TsrDir;
        cfg.data.path = Some(d.clone());
    }
    let tc = cfg.train.train_config(None)?;
    cfg.train.epochs = Some(tc.epochs);
    cfg.train.seed = Some(tc.seed);
    match g.precision {
        Precision::F32 => run_typed::<f32>(args, &cfg, &tc),
        Precision::F64 => run_typed::<f64>(args, &cfg, &tc),
    }
}

fn load_data<T: Scalar>(cfg: &RunConfig) -> anyhow::Result<Dataset<T>> {
    match cfg.data.kind {
        DataKind::Synthetic => Ok(gen_synthetic(&cfg.data.synthetic)?),
        DataKind::TsrDir => {
            let dir = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| ConfigError("data.kind = \"tsr_dir\" needs data.path".into()))?;
            read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
        }
    }
}

fn resume_state<T: Scalar>(out: &Path, spec: &NetworkSpec) -> anyhow::Result<TrainState<T>> {
    let (stored, entries) = read_checkpoint::<T>(&out.join(LAST))?;
    if &stored != spec {
        anyhow::bail!(ConfigError(format!(
            "{LAST} was trained as {} but the config describes {}",
            serde_json::to_string(&stored)?,
            serde_json::to_string(spec)?
        )));
    }
    let (_, best) = load_model::<T>(&out.join(BEST))?;
    let curves = curves_from_csv(&fs::read_to_string(out.join(CURVES)).context("reading curves.csv")?)?;
    Ok(TrainState::from_entries(entries, best, curves)?)
}

fn save_state<T: Scalar>(out: &Path, spec: &NetworkSpec, s: &TrainState<T>) -> erfseg::Result<()> {
    let io = |e: anyhow::Error| erfseg::Error::Format(format!("{e:#}"));
    write_checkpoint(&out.join(LAST), spec, s.to_entries()).map_err(io)?;
    write_checkpoint(&out.join(BEST), spec, s.best_params.as_map().clone()).map_err(io)?;
    write_atomic(&out.join(CURVES), curves_to_csv(&s.curves).as_bytes())
}

fn run_typed<T: Scalar>(args: &TrainArgs, cfg: &RunConfig, tc: &TrainConfig) -> anyhow::Result<()> {
    let data = load_data::<T>(cfg)?;
    let channels = data.channels()?;
    let spec = cfg.model.network_spec(channels)?;
    let net = Network::build(&spec)?;
    for (split, s) in data.iter() {
        net.check_input(&[1, s.channels(), s.height(), s.width()])
            .with_context(|| format!("case {} ({split})", s.id))?;
    }
    create_out_dir(&args.out)?;
    let state = if args.resume {
        resume_state::<T>(&args.out, &spec)?
    } else {
        let (_, params) = build_unet::<T>(&spec, tc.seed)?;
        TrainState::fresh(params)
    };
    let count = state.params.count_params();
    let mut manifest = ManifestWriter::start(&args.out, "train", tc.seed, serde_json::to_value(cfg)?)?;
    manifest.set_param_count(count);
    write_atomic(&args.out.join(CONFIG), cfg.to_toml().as_bytes())?;
    println!("{} with {count} parameters, epochs {}..={}", spec.variant, state.epoch + 1, tc.epochs);

    let state = train(&net, &data, tc, state, |s| {
        let r = s.curves.last().expect("one record per epoch");
        println!(
            "epoch {:3}  loss {:.4}  val_iou {:.4}  val_fn {:.4}",
            r.epoch, r.train_loss, r.val_iou, r.val_fn
        );
        save_state(&args.out, &spec, s)
    })?;
    if state.epoch == 0 {
        anyhow::bail!(ConfigError("training ran zero epochs".into()));
    }
    save_state(&args.out, &spec, &state)?;

    let (split, cases) = if data.test.is_empty() {
        ("train", &data.train)
    } else {
        ("test", &data.test)
    };
    let report = evaluate(&net, &state.best_params, cases, count)?;
    write_atomic(&args.out.join(METRICS), report.to_csv().as_bytes())?;
    println!("best epoch {} on {split}\n{report}", state.best_epoch);
    manifest.finish(&args.out, [CONFIG, BEST, LAST, CURVES, METRICS].map(String::from))?;
    Ok(())
}

