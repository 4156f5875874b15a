use std::path::PathBuf;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trinet::grad::finite_diff_report;
use trinet::invert::DEFAULT_TOL;
use trinet::unit::stored_float_count;
use trinet::{invert_flow, sample, FlowModel, TriUnit};

use crate::error::{Category, CliError, CliResult};
use crate::model_file::{sha256_hex, ModelFile};

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of test inputs.
    #[arg(long, default_value_t = 2)]
    pub points: usize,
    /// Raw parameters probed by finite differences per input.
    #[arg(long, default_value_t = 200)]
    pub param_budget: usize,
    /// Largest dimension checked with a dense Jacobian; above it a strided
    /// coordinate subset of this size is checked layer by layer.
    #[arg(long, default_value_t = 32)]
    pub dim_budget: usize,
    /// Finite-difference step for the gradient check.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

const GRAD_TOL: f64 = 1e-4;
const LOGDET_TOL: f64 = 1e-4;
const ROUND_TRIP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
    pub checked: usize,
    pub total: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error < self.tol
    }

    pub fn partial(&self) -> bool {
        self.checked < self.total
    }

    fn line(&self) -> String {
        format!(
            "{} {} error={:e} tol={:e} checked={}/{}{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tol,
            self.checked,
            self.total,
            if self.partial() { " (partial)" } else { "" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
    pub floats_per_layer: usize,
    pub payload_sha256: String,
}

/// Inputs drawn from the model itself, so they sit where the density lives;
/// standard-normal points are used if sampling fails.
fn test_inputs(model: &FlowModel, count: usize, seed: u64) -> Vec<Vec<f64>> {
    if let Ok(s) = sample(model, count, seed) {
        return (0..count).map(|r| s.values.row(r).to_vec()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..model.n_dim()).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn ln_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        if piv == 0.0 {
            return f64::NEG_INFINITY;
        }
        total += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    total
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Dense central-difference Jacobian of the whole flow.
fn dense_logdet_error(model: &FlowModel, x: &[f64]) -> CliResult<f64> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (yu, yd) = (model.forward(&up)?.y, model.forward(&dn)?.y);
        for i in 0..n {
            jac[i][j] = (yu[i] - yd[i]) / (2.0 * h);
        }
    }
    let analytic = model.forward(x)?.logdet;
    Ok((ln_abs_det(jac) - analytic).abs() / analytic.abs().max(1.0))
}

/// Per-unit check on a strided coordinate subset: the numerical diagonal
/// derivative must match the analytic one, and outputs must not depend on
/// later inputs.
fn unit_subset_error(unit: &TriUnit, x: &[f64], coords: &[usize]) -> CliResult<f64> {
    let out = unit.forward(x)?;
    let mut worst: f64 = 0.0;
    for &c in coords {
        let h = fd_step(x[c]);
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[c] += h;
        dn[c] -= h;
        let (yu, yd) = (unit.forward(&up)?.y, unit.forward(&dn)?.y);
        let numeric = ((yu[c] - yd[c]) / (2.0 * h)).abs();
        let analytic = out.log_diag[c].exp();
        worst = worst.max((numeric - analytic).abs() / analytic.max(1e-300));
        if c > 0 && yu[..c] != out.y[..c] {
            // any dependence of earlier outputs on this input breaks triangularity
            return Ok(f64::INFINITY);
        }
    }
    Ok(worst)
}

pub fn check(args: &CheckArgs) -> CliResult<CheckReport> {
    let file = ModelFile::load(&args.model)?;
    let model = &file.model;
    let n = model.n_dim();
    if args.points == 0 {
        return Err(CliError::config("--points must be positive"));
    }
    let inputs = test_inputs(model, args.points, args.seed);

    let mut grad = CheckOutcome {
        name: "gradient",
        error: 0.0,
        tol: GRAD_TOL,
        checked: 0,
        total: model.param_count(),
    };
    for x in &inputs {
        let r = finite_diff_report(model, x, args.eps, args.param_budget)?;
        grad.error = grad.error.max(r.max_rel_error);
        grad.checked = r.checked;
    }

    let dense = n <= args.dim_budget;
    let coords: Vec<usize> = if dense {
        (0..n).collect()
    } else {
        let stride = n.div_ceil(args.dim_budget.max(1));
        (0..n).step_by(stride).collect()
    };
    let mut logdet = CheckOutcome {
        name: "logdet",
        error: 0.0,
        tol: LOGDET_TOL,
        checked: coords.len(),
        total: n,
    };
    for x in &inputs {
        let e = if dense {
            dense_logdet_error(model, x)?
        } else {
            let trace = model.forward(x)?.trace;
            let mut worst: f64 = 0.0;
            for (unit, t) in model.layers().iter().zip(&trace.layers) {
                let input: Vec<f64> = (0..n).map(|i| t.x[(i, 0)]).collect();
                worst = worst.max(unit_subset_error(unit, &input, &coords)?);
            }
            worst
        };
        logdet.error = logdet.error.max(e);
    }

    let mut round_trip = CheckOutcome {
        name: "roundtrip",
        error: 0.0,
        tol: ROUND_TRIP_TOL,
        checked: inputs.len(),
        total: inputs.len(),
    };
    for x in &inputs {
        let y = model.forward(x)?.y;
        let e = match invert_flow(model, &y, DEFAULT_TOL) {
            Ok(back) => {
                let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
            }
            Err(_) => f64::INFINITY,
        };
        round_trip.error = round_trip.error.max(e);
    }

    let layer0 = &model.layers()[0];
    Ok(CheckReport {
        outcomes: vec![grad, logdet, round_trip],
        floats_per_layer: stored_float_count(n, layer0.block_size()),
        payload_sha256: sha256_hex(&file.payload()),
    })
}

pub fn run(args: &CheckArgs) -> CliResult<()> {
    let report = check(args)?;
    for o in &report.outcomes {
        println!("{}", o.line());
    }
    println!(
        "storage floats_per_layer={} payload_sha256={}",
        report.floats_per_layer, report.payload_sha256
    );
    let failed: Vec<String> = report
        .outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} error={:e} (tol {:e})", o.name, o.error, o.tol))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(Category::Check, failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_abs_det_of_known_matrix() {
        let m = vec![vec![0.0, 2.0], vec![-3.0, 1.0]];
        assert!((ln_abs_det(m) - 6f64.ln()).abs() < 1e-14);
        assert_eq!(ln_abs_det(vec![vec![1.0, 2.0], vec![2.0, 4.0]]), f64::NEG_INFINITY);
    }
}
