//! Inversion by backward substitution with scalar bisection, and sampling.
//!
//! A unit is triangular and strictly increasing in its diagonal argument, so
//! `x_1` is found from `y_1` alone, then each `x_n` from `y_n` once
//! `x_1..x_{n-1}` are known. Flows are inverted layer by layer, top down.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{flip, FlowModel};
use crate::linalg::Mat;
use crate::unit::TriUnit;

/// Default per-scalar tolerance on the bisection bracket width.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Bracket half-widths beyond this mean the target is unattainable.
pub const BRACKET_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertOptions {
    /// Bisection stops once the bracket is narrower than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: 256,
        }
    }
}

impl InvertOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// A root of a scalar increasing map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub value: f64,
    /// Bisection steps taken after bracketing.
    pub iterations: usize,
    /// Bracket width when bisection started.
    pub initial_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootError {
    /// No sign change within `BRACKET_CAP` of the warm start.
    Unbracketed,
    NotConverged { iterations: usize, width: f64 },
}

/// Solves `f(t) = target` for strictly increasing `f`.
///
/// The bracket `[warm - w, warm + w]` starts at `w = 1` and doubles until the
/// residual changes sign; bisection then halves it until it is narrower than
/// `opts.tol` (or floating point cannot split it further).
pub fn solve_increasing<F>(
    f: F,
    target: f64,
    warm: f64,
    opts: &InvertOptions,
) -> std::result::Result<Root, RootError>
where
    F: Fn(f64) -> f64,
{
    let resid = |t: f64| f(t) - target;
    let mut half = 1.0;
    let (mut lo, mut hi);
    loop {
        lo = warm - half;
        hi = warm + half;
        let (rl, rh) = (resid(lo), resid(hi));
        if rl.is_nan() || rh.is_nan() {
            return Err(RootError::Unbracketed);
        }
        if rl <= 0.0 && rh >= 0.0 {
            if rl == 0.0 {
                return Ok(Root {
                    value: lo,
                    iterations: 0,
                    initial_width: hi - lo,
                });
            }
            if rh == 0.0 {
                return Ok(Root {
                    value: hi,
                    iterations: 0,
                    initial_width: hi - lo,
                });
            }
            break;
        }
        half *= 2.0;
        if half > BRACKET_CAP {
            return Err(RootError::Unbracketed);
        }
    }

    let initial_width = hi - lo;
    let mut iterations = 0;
    while hi - lo > opts.tol {
        if iterations >= opts.max_iter {
            return Err(RootError::NotConverged {
                iterations,
                width: hi - lo,
            });
        }
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let r = resid(mid);
        if r == 0.0 {
            return Ok(Root {
                value: mid,
                iterations,
                initial_width,
            });
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Root {
        value: lo + 0.5 * (hi - lo),
        iterations,
        initial_width,
    })
}

/// Inverts a single unit to bracket tolerance `tol`.
pub fn invert_unit(unit: &TriUnit, y: &[f64], tol: f64) -> Result<Vec<f64>> {
    invert_unit_with(unit, y, &InvertOptions::with_tol(tol), 0)
}

pub fn invert_unit_with(
    unit: &TriUnit,
    y: &[f64],
    opts: &InvertOptions,
    layer: usize,
) -> Result<Vec<f64>> {
    let (n, bs) = (unit.n_dim(), unit.block_size());
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "target has length {}, unit expects {n}",
            y.len()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!("tolerance {} must be positive", opts.tol)));
    }
    let nl = unit.nonlinearity();
    let packed = unit.packed();
    let u_diag = unit.u_diag();
    let v_diag = unit.v_diag();
    let a = unit.a();

    let mut x = vec![0.0; n];
    let mut h = vec![0.0; n * bs];
    let mut centre = vec![0.0; bs];
    for dim in 0..n {
        let rows = dim * bs..(dim + 1) * bs;
        for (c, r) in centre.iter_mut().zip(rows.clone()) {
            let prow = packed.row(r);
            *c = a[r] + (0..dim).map(|j| prow[j] * x[j]).sum::<f64>();
        }
        let offset = unit.b()[dim]
            + (0..dim * bs)
                .map(|r| packed[(r, dim)] * h[r])
                .sum::<f64>();
        let target = y[dim];

        if let Some(bound) = nl.bound() {
            let reach: f64 = rows.clone().map(|r| v_diag[r] * bound).sum();
            if !(target > offset - reach && target < offset + reach) {
                return Err(Error::NotInvertible {
                    layer,
                    dim,
                    reason: format!(
                        "target {target} outside the attainable range ({}, {})",
                        offset - reach,
                        offset + reach
                    ),
                });
            }
        }

        let f = |t: f64| {
            let mut acc = offset;
            for (i, r) in rows.clone().enumerate() {
                acc += v_diag[r] * nl.value(centre[i] + u_diag[r] * t);
            }
            acc
        };
        let root = solve_increasing(f, target, 0.0, opts).map_err(|e| match e {
            RootError::Unbracketed => Error::NotInvertible {
                layer,
                dim,
                reason: format!("no sign change within {BRACKET_CAP:e} of the warm start"),
            },
            RootError::NotConverged { iterations, width } => Error::ToleranceNotReached {
                layer,
                dim,
                iterations,
                width,
            },
        })?;
        x[dim] = root.value;
        for (i, r) in rows.enumerate() {
            h[r] = nl.value(centre[i] + u_diag[r] * x[dim]);
        }
    }
    Ok(x)
}

/// Inverts the whole stack, undoing flips and units from the top down.
pub fn invert_flow(model: &FlowModel, y: &[f64], tol: f64) -> Result<Vec<f64>> {
    invert_flow_with(model, y, &InvertOptions::with_tol(tol))
}

pub fn invert_flow_with(model: &FlowModel, y: &[f64], opts: &InvertOptions) -> Result<Vec<f64>> {
    let mut cur = y.to_vec();
    for (layer, (unit, &flipped)) in model
        .layers()
        .iter()
        .zip(model.flip_after())
        .enumerate()
        .rev()
    {
        if flipped {
            cur = flip(&cur);
        }
        cur = invert_unit_with(unit, &cur, opts, layer)?;
    }
    Ok(cur)
}

/// Samples drawn through the inverse flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// One sample per row.
    pub values: Mat,
    /// Base draws rejected because they were outside a bounded model's range.
    pub rejected: usize,
}

/// Draws a few more than this many attempts before judging the rejection rate.
const REJECTION_WINDOW: usize = 64;
const SAMPLE_CHUNK: usize = 256;

/// Draws `count` samples: `y ~ N(0, I)` mapped through the inverse flow.
///
/// Draw `i` uses its own ChaCha stream `(seed, i)`, so the output does not
/// depend on scheduling. Non-invertible draws (bounded nonlinearities only)
/// are redrawn from the same stream; if more than half of all attempts are
/// rejected the run is aborted. Models built only from unbounded units are
/// bijective, so any inversion failure there is returned as an error.
pub fn sample(model: &FlowModel, count: usize, seed: u64) -> Result<Samples> {
    sample_with(model, count, seed, &InvertOptions::default())
}

pub fn sample_with(
    model: &FlowModel,
    count: usize,
    seed: u64,
    opts: &InvertOptions,
) -> Result<Samples> {
    let n = model.n_dim();
    let mut values = Mat::zeros(count, n);
    let mut rejected = 0;
    let mut attempted = 0;
    let mut start = 0;
    while start < count {
        let end = (start + SAMPLE_CHUNK).min(count);
        let chunk: Vec<Result<(Vec<f64>, usize)>> = (start..end)
            .into_par_iter()
            .map(|i| draw_one(model, seed, i as u64, opts))
            .collect();
        for (i, res) in (start..end).zip(chunk) {
            let (x, rej) = match res {
                Ok(v) => v,
                Err(Error::SamplingAborted { rejected: r, attempted: a }) => {
                    return Err(Error::SamplingAborted {
                        rejected: rejected + r,
                        attempted: attempted + a,
                    })
                }
                Err(e) => return Err(e),
            };
            values.row_mut(i).copy_from_slice(&x);
            rejected += rej;
            attempted += rej + 1;
        }
        if attempted >= REJECTION_WINDOW && 2 * rejected > attempted {
            return Err(Error::SamplingAborted {
                rejected,
                attempted,
            });
        }
        start = end;
    }
    Ok(Samples { values, rejected })
}

fn draw_one(
    model: &FlowModel,
    seed: u64,
    index: u64,
    opts: &InvertOptions,
) -> Result<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = model.n_dim();
    let bounded = model
        .layers()
        .iter()
        .any(|l| l.nonlinearity().bound().is_some());
    let mut rejected = 0;
    loop {
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        match invert_flow_with(model, &y, opts) {
            Ok(x) => return Ok((x, rejected)),
            Err(Error::NotInvertible { .. }) if bounded => {
                rejected += 1;
                // A single draw that keeps failing means the model's range is
                // far too narrow; stop before the global check would.
                if rejected > REJECTION_WINDOW {
                    return Err(Error::SamplingAborted {
                        rejected,
                        attempted: rejected,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
}
