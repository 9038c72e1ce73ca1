use anyhow::Context;
use erfseg::io::{encode_pgm16, encode_ppm, encode_tensor, write_atomic};
use erfseg::layers::ParamStore;
use erfseg::metrics::{case_metrics, BinaryMask, MetricsReport};
use erfseg::model::Network;
use erfseg::train::{predict_masks, read_dataset, Dataset, Sample};
use erfseg::{Scalar, Tape, Tensor};

use crate::cmd::{create_out_dir, load_model};
use crate::manifest::ManifestWriter;
use crate::{EvalArgs, Globals, Precision};

pub const TP: [u8; 3] = [255, 255, 0];
pub const FN: [u8; 3] = [0, 0, 255];
pub const FP: [u8; 3] = [255, 0, 0];
pub const TN: [u8; 3] = [0, 0, 0];

pub fn run(args: &EvalArgs, g: Globals) -> anyhow::Result<()> {
    match g.precision {
        Precision::F32 => run_typed::<f32>(args),
        Precision::F64 => run_typed::<f64>(args),
    }
}

/// Colors every pixel by its confusion class.
pub fn difference_map(pred: &BinaryMask, gt: &BinaryMask) -> Vec<[u8; 3]> {
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &t)| match (p, t) {
            (true, true) => TP,
            (false, true) => FN,
            (true, false) => FP,
            (false, false) => TN,
        })
        .collect()
}

fn run_typed<T: Scalar>(args: &EvalArgs) -> anyhow::Result<()> {
    let (net, params) = load_model::<T>(&args.checkpoint)?;
    let data: Dataset<T> =
        read_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let cases = data.split(args.split);
    create_out_dir(&args.out)?;
    create_out_dir(&args.out.join("diff"))?;
    let config = serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "split": args.split.name(),
        "network": net.spec(),
    });
    let mut manifest = ManifestWriter::start(&args.out, "eval", 0, config)?;
    let count = params.count_params();
    manifest.set_param_count(count);

    let masks = predict_masks(&net, &params, cases)?;
    let mut files = Vec::new();
    let mut metrics = Vec::with_capacity(cases.len());
    for (s, (pred, gt)) in cases.iter().zip(&masks) {
        metrics.push(case_metrics(s.id.clone(), pred, gt)?);
        let name = format!("diff/{}.ppm", s.id);
        write_atomic(&args.out.join(&name), &encode_ppm(&difference_map(pred, gt), s.height(), s.width()))?;
        files.push(name);
    }
    if args.attention {
        create_out_dir(&args.out.join("attention"))?;
        for s in cases {
            files.extend(export_attention(&net, &params, s, args)?);
        }
    }
    let report = MetricsReport::from_cases(metrics, count);
    write_atomic(&args.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    files.push("metrics.csv".into());
    println!("{} split of {}\n{report}", args.split.name(), args.data.display());
    manifest.finish(&args.out, files)?;
    Ok(())
}

/// Writes each stage's attention map as TSR1 plus a channel-mean PGM.
fn export_attention<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    s: &Sample<T>,
    args: &EvalArgs,
) -> anyhow::Result<Vec<String>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::stack(&[&s.image])?);
    let out = net.forward(&mut tape, &bound, x)?;
    let mut files = Vec::new();
    for trace in &out.attention {
        let a = tape.value(trace.out.a);
        let [_, c, h, w] = a.dims4()?;
        let mut mean = vec![0.0f64; h * w];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&a.data()[ch * h * w..(ch + 1) * h * w]) {
                *m += v.to_f64_lossy() / c as f64;
            }
        }
        let stem = format!("attention/{}_stage{}", s.id, trace.stage);
        write_atomic(&args.out.join(format!("{stem}.tsr")), &encode_tensor(a))?;
        write_atomic(&args.out.join(format!("{stem}.pgm")), &encode_pgm16(&mean, h, w))?;
        files.push(format!("{stem}.tsr"));
        files.push(format!("{stem}.pgm"));
    }
    Ok(files)
}
