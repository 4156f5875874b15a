use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use trinet::{FlowModel, Mat};

use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

/// `lo:hi`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl FromStr for Span {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = s
            .split_once(':')
            .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)));
        match parsed {
            Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo < hi => Ok(Span { lo, hi }),
            _ => Err(format!("'{s}' is not a range lo:hi with lo < hi")),
        }
    }
}

impl Span {
    /// Centre of cell `i` out of `res`; one cell gives the midpoint.
    fn cell(&self, i: usize, res: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width() / res as f64
    }

    fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Range of the first coordinate, `lo:hi`.
    #[arg(long, allow_hyphen_values = true)]
    pub x_range: Span,
    /// Range of the second coordinate (2D models only).
    #[arg(long, allow_hyphen_values = true)]
    pub y_range: Option<Span>,
    /// Cells per axis.
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Grid {
    /// One lattice point per row: coordinates then log-density.
    pub rows: Mat,
    pub cell_volume: f64,
}

impl Grid {
    /// Midpoint-rule integral of the density over the covered box.
    pub fn integral(&self) -> f64 {
        let last = self.rows.cols() - 1;
        let total: f64 = (0..self.rows.rows()).map(|r| self.rows[(r, last)].exp()).sum();
        total * self.cell_volume
    }
}

const CHUNK: usize = 4096;

fn log_density_rows(model: &FlowModel, points: &Mat) -> CliResult<Vec<f64>> {
    let mut out = Vec::with_capacity(points.rows());
    for start in (0..points.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(points.rows())).collect();
        out.extend(model.nll_rows(&points.select_rows(&idx))?.into_iter().map(|v| -v));
    }
    Ok(out)
}

pub fn grid(args: &GridArgs) -> CliResult<Grid> {
    let file = ModelFile::load(&args.model)?;
    let model = &file.model;
    let res = args.resolution;
    if res == 0 {
        return Err(CliError::config("--resolution must be positive"));
    }
    let spans: Vec<Span> = match (model.n_dim(), args.y_range) {
        (1, None) => vec![args.x_range],
        (1, Some(_)) => return Err(CliError::config("--y-range given for a 1-dimensional model")),
        (2, Some(y)) => vec![args.x_range, y],
        (2, None) => return Err(CliError::config("a 2-dimensional model needs --y-range")),
        (n, _) => {
            return Err(CliError::config(format!(
                "grid supports 1- and 2-dimensional models, this one has {n}; evaluate marginal slices instead"
            )))
        }
    };
    let d = spans.len();
    let count = res.checked_pow(d as u32).ok_or_else(|| CliError::config("grid too large"))?;
    let mut points = Mat::zeros(count, d);
    for p in 0..count {
        // first coordinate varies slowest
        let (i, j) = if d == 1 { (p, 0) } else { (p / res, p % res) };
        points[(p, 0)] = spans[0].cell(i, res);
        if d == 2 {
            points[(p, 1)] = spans[1].cell(j, res);
        }
    }
    let ld = log_density_rows(model, &points)?;
    let mut rows = Mat::zeros(count, d + 1);
    for p in 0..count {
        rows.row_mut(p)[..d].copy_from_slice(points.row(p));
        rows[(p, d)] = ld[p];
    }
    let cell_volume = spans.iter().map(|s| s.width() / res as f64).product();
    Ok(Grid { rows, cell_volume })
}

pub fn run(args: &GridArgs) -> CliResult<()> {
    let g = grid(args)?;
    let d = g.rows.cols() - 1;
    let mut s = String::from(if d == 1 { "x,log_density\n" } else { "x,y,log_density\n" });
    for r in 0..g.rows.rows() {
        let row = g.rows.row(r);
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", fields.join(","));
    }
    std::fs::write(&args.out, s).map_err(|e| CliError::io(&args.out, e))?;
    println!("points={} integral={}", g.rows.rows(), g.integral());
    Ok(())
}
