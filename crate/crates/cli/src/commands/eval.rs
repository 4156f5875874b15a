use std::path::PathBuf;

use clap::Args;
use trinet::data::bpd;
use trinet::train::evaluate_split;
use trinet::SplitKind;

use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;
use crate::pipeline::{prepare, DataArgs};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: SplitKind,
    /// Dequantization seed [default: the one stored with the model].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// [default: the value stored with the model, else 0.1]
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// [default: the value stored with the model, else 0.1]
    #[arg(long)]
    pub test_frac: Option<f64>,
}

/// One evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub split: SplitKind,
    pub nll: f64,
    pub std_err: f64,
    pub count: usize,
    pub bpd: Option<f64>,
}

pub fn evaluate(args: &EvalArgs) -> CliResult<Vec<SplitReport>> {
    let file = ModelFile::load(&args.model)?;
    let meta = &file.meta;
    let raw = args.data.load()?;
    if raw.n_dim() != file.model.n_dim() {
        return Err(CliError::config(format!(
            "data has {} dimensions, model {}",
            raw.n_dim(),
            file.model.n_dim()
        )));
    }
    let data_seed = args.data_seed.or(meta.data_seed).unwrap_or(meta.seed);
    let ds = prepare(
        raw,
        meta.logit_lambda,
        data_seed,
        args.val_frac.or(meta.val_frac).unwrap_or(0.1),
        args.test_frac.or(meta.test_frac).unwrap_or(0.1),
    )?;
    let mut splits = vec![SplitKind::Train];
    if args.split != SplitKind::Train {
        splits.push(args.split);
    }
    let mut out = Vec::new();
    for kind in splits {
        if ds.split_range(kind).is_empty() {
            if kind == args.split {
                return Err(CliError::config(format!("the {} split is empty", kind.name())));
            }
            continue;
        }
        let stats = evaluate_split(&file.model, &ds, kind)?;
        let bits = ds
            .mean_correction(kind)
            .map(|c| bpd(stats.mean, c, ds.n_dim()));
        out.push(SplitReport {
            split: kind,
            nll: stats.mean,
            std_err: stats.std_err,
            count: stats.count,
            bpd: bits,
        });
    }
    Ok(out)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    for r in evaluate(args)? {
        println!(
            "nll split={} mean={} stderr={} n={}",
            r.split.name(),
            r.nll,
            r.std_err,
            r.count
        );
        if let Some(b) = r.bpd {
            println!("bpd split={} value={b}", r.split.name());
        }
    }
    Ok(())
}
