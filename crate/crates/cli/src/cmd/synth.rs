use erfseg::train::{gen_synthetic, write_dataset, SyntheticTaskConfig};
use erfseg::Scalar;

use crate::cmd::create_out_dir;
use crate::config::RunConfig;
use crate::manifest::ManifestWriter;
use crate::{Globals, Precision, SynthArgs};

pub fn run(args: &SynthArgs, g: Globals) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let mut task = cfg.data.synthetic.clone();
    if let Some(s) = g.seed {
        task.seed = s;
    }
    task.validate()?;
    create_out_dir(&args.out)?;
    let manifest = ManifestWriter::start(&args.out, "synth", task.seed, serde_json::to_value(&task)?)?;
    let files = match g.precision {
        Precision::F32 => generate::<f32>(&task, args)?,
        Precision::F64 => generate::<f64>(&task, args)?,
    };
    manifest.finish(&args.out, files)?;
    println!(
        "wrote {} train / {} val / {} test cases to {}",
        task.n_train,
        task.n_val,
        task.n_test,
        args.out.display()
    );
    Ok(())
}

fn generate<T: Scalar>(task: &SyntheticTaskConfig, args: &SynthArgs) -> anyhow::Result<Vec<String>> {
    let data = gen_synthetic::<T>(task)?;
    Ok(write_dataset(&args.out, &data)?)
}
