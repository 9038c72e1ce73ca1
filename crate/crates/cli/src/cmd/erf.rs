use std::fmt::Write as _;

use erfseg::erf::{measure_lab, LabMeasurement, LabSpec};
use erfseg::io::{encode_pgm16, encode_tensor, write_atomic};

use crate::cmd::create_out_dir;
use crate::manifest::ManifestWriter;
use crate::{AssertionFailed, ConfigError, ErfArgs, Expectation, Globals, LabKind, Precision};

pub const ROWS_HEADER: &str = "role,arch,depth,dilation,residual,seed,rf_extent,erf_radius,ratio";
pub const SUMMARY_HEADER: &str = "role,arch,depth,dilation,residual,mean_radius,mean_ratio";

fn lab_spec(kind: LabKind, depth: usize, dilation: Option<usize>, residual: bool, width: usize) -> anyhow::Result<LabSpec> {
    let base = match kind {
        LabKind::Plain | LabKind::Residual => {
            if dilation.is_some_and(|d| d != 1) {
                anyhow::bail!(ConfigError("--dilation applies to the dilated arch only".into()));
            }
            LabSpec::plain(depth)
        }
        LabKind::Dilated => match dilation {
            Some(d) if d >= 2 => LabSpec::dilated(depth, d),
            _ => anyhow::bail!(ConfigError("the dilated arch needs --dilation ≥ 2".into())),
        },
    };
    let spec = LabSpec {
        residual: residual || kind == LabKind::Residual,
        width,
        ..base
    };
    spec.validate()?;
    Ok(spec)
}

/// Per-depth measurements of one architecture.
struct Series {
    role: &'static str,
    specs: Vec<LabSpec>,
    runs: Vec<Vec<LabMeasurement>>,
}

impl Series {
    fn mean(&self, i: usize, f: impl Fn(&LabMeasurement) -> f64) -> f64 {
        self.runs[i].iter().map(f).sum::<f64>() / self.runs[i].len() as f64
    }

    fn mean_radius(&self, i: usize) -> f64 {
        self.mean(i, |m| m.report.erf_radius as f64)
    }

    fn mean_ratio(&self, i: usize) -> f64 {
        self.mean(i, |m| m.report.ratio)
    }
}

pub fn run(args: &ErfArgs, g: Globals) -> anyhow::Result<()> {
    if args.samples == 0 || args.seeds == 0 {
        anyhow::bail!(ConfigError("--samples and --seeds must be ≥ 1".into()));
    }
    let first = g.seed.unwrap_or(0);
    let seeds: Vec<u64> = (first..first + args.seeds as u64).collect();
    let target: Vec<LabSpec> = args
        .depth
        .iter()
        .map(|&d| lab_spec(args.arch, d, args.dilation, args.residual, args.width))
        .collect::<anyhow::Result<_>>()?;
    let baseline: Option<Vec<LabSpec>> = args
        .baseline
        .map(|k| {
            args.depth
                .iter()
                .map(|&d| lab_spec(k, d, args.baseline_dilation, false, args.width))
                .collect::<anyhow::Result<_>>()
        })
        .transpose()?;
    if matches!(args.expect, Some(Expectation::Gt | Expectation::Le)) && baseline.is_none() {
        anyhow::bail!(ConfigError("--expect gt/le compares against --baseline".into()));
    }

    create_out_dir(&args.out.join("heatmaps"))?;
    let config = serde_json::json!({
        "target": target,
        "baseline": baseline,
        "samples": args.samples,
        "seeds": seeds,
        "expect": args.expect.map(|e| format!("{e:?}")),
    });
    let manifest = ManifestWriter::start(&args.out, "erf", first, config)?;

    let mut series = vec![Series {
        role: "target",
        specs: target,
        runs: Vec::new(),
    }];
    if let Some(b) = baseline {
        series.push(Series {
            role: "baseline",
            specs: b,
            runs: Vec::new(),
        });
    }
    for i in 0..args.depth.len() {
        let extent = series.iter().map(|s| s.specs[i].default_input_extent()).max().unwrap();
        for s in series.iter_mut() {
            let runs = seeds
                .iter()
                .map(|&seed| match g.precision {
                    Precision::F32 => measure_lab::<f32>(&s.specs[i], extent, args.samples, seed),
                    Precision::F64 => measure_lab::<f64>(&s.specs[i], extent, args.samples, seed),
                })
                .collect::<erfseg::Result<Vec<_>>>()?;
            s.runs.push(runs);
        }
    }

    let mut rows = format!("{ROWS_HEADER}\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut files = vec!["erf.csv".to_string(), "summary.csv".to_string()];
    for s in &series {
        for (i, spec) in s.specs.iter().enumerate() {
            let key = format!("{},{},{},{},{}", s.role, spec.label(), spec.depth, spec.dilation, spec.residual);
            for m in &s.runs[i] {
                let r = m.report;
                let _ = writeln!(rows, "{key},{},{},{},{}", m.seed, r.rf_extent, r.erf_radius, r.ratio);
                let stem = format!(
                    "heatmaps/{}_{}_depth{}_dil{}_seed{}",
                    s.role,
                    spec.label(),
                    spec.depth,
                    spec.dilation,
                    m.seed
                );
                write_atomic(&args.out.join(format!("{stem}.tsr")), &encode_tensor(&m.map.to_tensor()))?;
                write_atomic(&args.out.join(format!("{stem}.pgm")), &encode_pgm16(&m.map.grid, m.map.h, m.map.w))?;
                files.push(format!("{stem}.tsr"));
                files.push(format!("{stem}.pgm"));
            }
            let _ = writeln!(summary, "{key},{},{}", s.mean_radius(i), s.mean_ratio(i));
            println!(
                "{:8} {:16} depth {:2} dilation {:2}  rf {:3}  mean radius {:6.3}  mean ratio {:.4}",
                s.role,
                spec.label(),
                spec.depth,
                spec.dilation,
                spec.rf_extent(),
                s.mean_radius(i),
                s.mean_ratio(i)
            );
        }
    }
    write_atomic(&args.out.join("erf.csv"), rows.as_bytes())?;
    write_atomic(&args.out.join("summary.csv"), summary.as_bytes())?;
    manifest.finish(&args.out, files)?;

    if let Some(e) = args.expect {
        check(e, &series)?;
        println!("expectation {e:?} holds");
    }
    Ok(())
}

fn check(e: Expectation, series: &[Series]) -> anyhow::Result<()> {
    let t = &series[0];
    let failures: Vec<String> = match e {
        Expectation::Gt | Expectation::Le => {
            let b = &series[1];
            (0..t.specs.len())
                .filter(|&i| {
                    let (x, y) = (t.mean_radius(i), b.mean_radius(i));
                    if e == Expectation::Gt {
                        x <= y
                    } else {
                        x > y
                    }
                })
                .map(|i| {
                    format!(
                        "depth {}: target {} vs baseline {}",
                        t.specs[i].depth,
                        t.mean_radius(i),
                        b.mean_radius(i)
                    )
                })
                .collect()
        }
        Expectation::RatioDecreasing => (1..t.specs.len())
            .filter(|&i| t.mean_ratio(i) >= t.mean_ratio(i - 1))
            .map(|i| {
                format!(
                    "ratio at depth {} ({}) is not below depth {} ({})",
                    t.specs[i].depth,
                    t.mean_ratio(i),
                    t.specs[i - 1].depth,
                    t.mean_ratio(i - 1)
                )
            })
            .collect(),
    };
    if failures.is_empty() {
        Ok(())
    } else {
        anyhow::bail!(AssertionFailed(format!("{e:?}: {}", failures.join("; "))))
    }
}
