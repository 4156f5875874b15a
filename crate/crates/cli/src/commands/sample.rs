use std::path::PathBuf;

use clap::Args;
use trinet::data::logit_to_pixels;
use trinet::{sample, Mat};

use crate::error::CliResult;
use crate::model_file::ModelFile;
use crate::pipeline::{column_names, write_csv};

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel-space CSV for logit-space image models [default: <out stem>.pixels.csv].
    #[arg(long)]
    pub pixels_out: Option<PathBuf>,
}

pub fn run(args: &SampleArgs) -> CliResult<()> {
    let file = ModelFile::load(&args.model)?;
    let n = file.model.n_dim();
    let drawn = sample(&file.model, args.count, args.seed)?;
    let names = column_names(n);
    write_csv(&args.out, &names, &drawn.values)?;
    if drawn.rejected > 0 {
        eprintln!("rejected {} base draws outside the model range", drawn.rejected);
    }
    if let Some(lambda) = file.meta.logit_lambda {
        let path = args
            .pixels_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("pixels.csv"));
        let mut pixels = Mat::zeros(args.count, n);
        for r in 0..args.count {
            pixels
                .row_mut(r)
                .copy_from_slice(&logit_to_pixels(drawn.values.row(r), lambda));
        }
        write_csv(&path, &names, &pixels)?;
        println!("pixels={}", path.display());
    }
    println!("samples={} out={}", args.count, args.out.display());
    Ok(())
}
