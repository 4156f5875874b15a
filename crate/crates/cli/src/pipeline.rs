//! Data loading and preprocessing shared by the subcommands.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use trinet::data::{dequantize_dataset, load_cifar_bin, load_csv, load_idx, LAMBDA_CIFAR, LAMBDA_MNIST};
use trinet::{Dataset, Mat};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Csv,
    Idx,
    Cifar,
}

impl DataFormat {
    /// Logit preprocessing constant applied when `--lambda` is not given.
    pub fn default_lambda(self) -> Option<f64> {
        match self {
            DataFormat::Csv => None,
            DataFormat::Idx => Some(LAMBDA_MNIST),
            DataFormat::Cifar => Some(LAMBDA_CIFAR),
        }
    }
}

/// `--lambda mnist|cifar|none|<value>`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaArg(pub Option<f64>);

impl FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(Self(Some(LAMBDA_MNIST))),
            "cifar" => Ok(Self(Some(LAMBDA_CIFAR))),
            "none" => Ok(Self(None)),
            v => match v.parse::<f64>() {
                Ok(l) if (0.0..0.5).contains(&l) => Ok(Self(Some(l))),
                _ => Err(format!("'{v}' is not mnist, cifar, none or a value in [0, 0.5)")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn enabled(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input file(s); CIFAR accepts several batch files.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
    pub format: DataFormat,
    /// Skip the first CSV line.
    #[arg(long)]
    pub header: bool,
    /// Use only the first this many records.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl DataArgs {
    pub fn load(&self) -> CliResult<Dataset> {
        let single = || -> CliResult<&PathBuf> {
            match &self.data[..] {
                [p] => Ok(p),
                _ => Err(CliError::config(format!(
                    "--format {:?} takes exactly one --data path",
                    self.format
                ))),
            }
        };
        let ds = match self.format {
            DataFormat::Csv => truncate(load_csv(single()?, self.header)?, self.limit)?,
            DataFormat::Idx => load_idx(single()?, self.limit)?,
            DataFormat::Cifar => truncate(load_cifar_bin(&self.data)?, self.limit)?,
        };
        if ds.is_empty() {
            return Err(CliError::format("data file holds no records"));
        }
        Ok(ds)
    }
}

fn truncate(ds: Dataset, limit: Option<usize>) -> CliResult<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            let out = Dataset::new(ds.samples().select_rows(&idx));
            Ok(match ds.image_geom() {
                Some(g) => out.with_image_geom(g)?,
                None => out,
            })
        }
        _ => Ok(ds),
    }
}

/// Optional logit dequantization followed by the contiguous tail split.
pub fn prepare(
    ds: Dataset,
    lambda: Option<f64>,
    data_seed: u64,
    val_frac: f64,
    test_frac: f64,
) -> CliResult<Dataset> {
    let ds = match lambda {
        Some(l) => dequantize_dataset(&ds, l, data_seed)?,
        None => ds,
    };
    Ok(ds.with_tail_split(val_frac, test_frac)?)
}

/// Writes rows as CSV with an `x0,x1,...` header; `{}` keeps full precision.
pub fn write_csv(path: &std::path::Path, names: &[String], rows: &Mat) -> CliResult<()> {
    use std::fmt::Write as _;
    let mut s = names.join(",");
    s.push('\n');
    for r in 0..rows.rows() {
        for (i, v) in rows.row(r).iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn column_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}
