//! Reverse-mode gradients of the NLL with respect to raw parameters.
//!
//! The backward pass replays a [`FlowTrace`]; nothing is recomputed. The
//! log-determinant term contributes through `phi''`, since each diagonal
//! Jacobian term depends on the pre-activations and therefore on every
//! upstream parameter and input.

use crate::error::{Error, Result};
use crate::flow::{column_nll, flip_rows, FlowModel, FlowTrace};
use crate::linalg::{axpy, dot, for_each_chunk, gemm, sum, Mat, Strided, OUTPUT_TILE};
use crate::nonlinearity::{sigmoid, sign};
use crate::unit::{TriUnit, UnitTrace, DIAG_FLOOR};

/// Gradient with respect to one unit's raw (pre-softplus) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitGrad {
    pub packed: Mat,
    pub v_diag_raw: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl UnitGrad {
    pub fn zeros_like(unit: &TriUnit) -> Self {
        Self {
            packed: Mat::zeros(unit.hidden(), unit.n_dim()),
            v_diag_raw: vec![0.0; unit.hidden()],
            a: vec![0.0; unit.hidden()],
            b: vec![0.0; unit.n_dim()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.packed.as_slice(), &self.v_diag_raw, &self.a, &self.b]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.packed.as_mut_slice(),
            &mut self.v_diag_raw,
            &mut self.a,
            &mut self.b,
        ]
    }
}

/// Per-layer gradients, mirroring a [`FlowModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<UnitGrad>,
}

impl GradientSet {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self {
            layers: model.layers().iter().map(UnitGrad::zeros_like).collect(),
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.blocks()).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.blocks_mut()).collect()
    }

    /// Flattened copy in model storage order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn scale(&mut self, factor: f64) {
        for blk in self.blocks_mut() {
            blk.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(factor, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backpropagates through one unit.
///
/// `gy` is the adjoint of the unit output (`N x S`). The loss is assumed to
/// also contain `-logdet_weight * sum_s sum_n ln d_n`; pass 0 for losses that
/// ignore the Jacobian. Returns the parameter gradient and the input adjoint.
pub fn unit_backward(
    unit: &TriUnit,
    trace: &UnitTrace,
    gy: &Mat,
    logdet_weight: f64,
) -> Result<(UnitGrad, Mat)> {
    let (n, bs, nb) = (unit.n_dim(), unit.block_size(), unit.hidden());
    let s = trace.samples();
    if gy.rows() != n || gy.cols() != s {
        return Err(Error::ShapeMismatch(format!(
            "output adjoint is {}x{}, expected {n}x{s}",
            gy.rows(),
            gy.cols()
        )));
    }
    let packed = unit.packed();
    let u_diag = unit.u_diag();
    let v_diag = unit.v_diag();
    let work = nb * n * s / 2;

    // Adjoint of each diagonal term d_n.
    let mut w = Mat::zeros(n, s);
    for (wv, &d) in w.as_mut_slice().iter_mut().zip(trace.diag.as_slice()) {
        *wv = if d > DIAG_FLOOR { -logdet_weight / d } else { 0.0 };
    }

    let mut gh = Mat::zeros(nb, s);
    for_each_chunk(gh.as_mut_slice(), s, bs, work, |k, ghc| {
        gemm(bs, n - k - 1, s, Strided::rows(packed, k * bs, k + 1), Strided::rows(gy, k + 1, 0), 0.0, ghc, s);
        for (i, ghr) in ghc.chunks_mut(s).enumerate() {
            axpy(v_diag[k * bs + i], gy.row(k), ghr);
        }
    });

    let mut gz = Mat::zeros(nb, s);
    let mut q = vec![0.0; nb];
    for r in 0..nb {
        let k = r / bs;
        let uv = u_diag[r] * v_diag[r];
        let wk = w.row(k);
        let (ghr, d1, d2) = (gh.row(r), trace.dphi.row(r), trace.ddphi.row(r));
        for (c, out) in gz.row_mut(r).iter_mut().enumerate() {
            *out = ghr[c] * d1[c] + wk[c] * uv * d2[c];
        }
        q[r] = dot(wk, d1);
    }

    let mut grad = UnitGrad::zeros_like(unit);
    for_each_chunk(grad.packed.as_mut_slice(), n, bs, work, |k, gc| {
        let x_t = Strided::transposed(&trace.x, 0, 0);
        gemm(bs, s, k + 1, Strided::rows(&gz, k * bs, 0), x_t, 0.0, gc, n);
        let gy_t = Strided::transposed(gy, k + 1, 0);
        gemm(bs, s, n - k - 1, Strided::rows(&trace.phi, k * bs, 0), gy_t, 0.0, &mut gc[k + 1..], n);
        for (i, gpr) in gc.chunks_mut(n).enumerate() {
            let r = k * bs + i;
            gpr[k] = (gpr[k] + q[r] * v_diag[r]) * sigmoid(packed[(r, k)]);
        }
    });
    for r in 0..nb {
        let k = r / bs;
        grad.v_diag_raw[r] = (dot(gy.row(k), trace.phi.row(r)) + q[r] * u_diag[r])
            * sigmoid(unit.v_diag_raw()[r]);
        grad.a[r] = sum(gz.row(r));
    }
    for (k, g) in grad.b.iter_mut().enumerate() {
        *g = sum(gy.row(k));
    }

    let mut gx = Mat::zeros(n, s);
    for_each_chunk(gx.as_mut_slice(), s, OUTPUT_TILE, work, |t, gxc| {
        let j0 = t * OUTPUT_TILE;
        let cols = gxc.len() / s.max(1);
        let below = (j0 + cols) * bs;
        // hidden rows past the tile see every input in it off the diagonal
        gemm(cols, nb - below, s, Strided::transposed(packed, below, j0), Strided::rows(&gz, below, 0), 0.0, gxc, s);
        for (i, gxr) in gxc.chunks_mut(s).enumerate() {
            let j = j0 + i;
            for r in j * bs..below {
                let c = if r / bs == j { u_diag[r] } else { packed[(r, j)] };
                axpy(c, gz.row(r), gxr);
            }
        }
    });

    Ok((grad, gx))
}

/// Gradient of the batch-mean NLL for the batch recorded in `trace`.
pub fn nll_backward(model: &FlowModel, trace: &FlowTrace) -> Result<GradientSet> {
    let s = trace.samples();
    if s == 0 {
        return Ok(GradientSet::zeros_like(model));
    }
    if trace.layers.len() != model.layers().len() {
        return Err(Error::ShapeMismatch("trace does not belong to this model".into()));
    }
    let inv = 1.0 / s as f64;
    let mut g = trace.output.clone();
    g.as_mut_slice().iter_mut().for_each(|v| *v *= inv);

    let mut layers = Vec::with_capacity(model.layers().len());
    for ((unit, ut), &flip) in model
        .layers()
        .iter()
        .zip(&trace.layers)
        .zip(model.flip_after())
        .rev()
    {
        if flip {
            flip_rows(&mut g);
        }
        let (grad, gx) = unit_backward(unit, ut, &g, inv)?;
        layers.push(grad);
        g = gx;
    }
    layers.reverse();
    let grads = GradientSet { layers };
    if !grads.is_finite() {
        return Err(Error::NonFinite("NLL gradient".into()));
    }
    Ok(grads)
}

/// Per-sample NLLs and the gradient of their mean for samples stored one per
/// column.
pub fn nll_and_grad_columns(model: &FlowModel, xt: Mat) -> Result<(Vec<f64>, GradientSet)> {
    let (trace, logdet) = model.forward_columns(xt)?;
    let nll = column_nll(&trace.output, &logdet);
    let grads = nll_backward(model, &trace)?;
    Ok((nll, grads))
}

/// Per-sample NLLs and the batch-mean gradient for samples stored one per row.
pub fn nll_and_grad(model: &FlowModel, x: &Mat) -> Result<(Vec<f64>, GradientSet)> {
    nll_and_grad_columns(model, x.transpose())
}

/// Adds `eta * sign(theta)` to `grads` and returns `eta * sum |theta|`.
pub fn l1_accumulate(model: &FlowModel, eta: f64, grads: &mut GradientSet) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, g) in model.param_blocks().into_iter().zip(grads.blocks_mut()) {
        for (pv, gv) in p.iter().zip(g.iter_mut()) {
            total += pv.abs();
            *gv += eta * sign(*pv);
        }
    }
    eta * total
}

/// L1 penalty over all raw coefficients and its subgradient.
pub fn l1_subgradient(model: &FlowModel, eta: f64) -> (f64, GradientSet) {
    let mut grads = GradientSet::zeros_like(model);
    let penalty = l1_accumulate(model, eta, &mut grads);
    (penalty, grads)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat index (model storage order) of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
    pub total: usize,
}

impl FiniteDiffReport {
    pub fn partial(&self) -> bool {
        self.checked < self.total
    }
}

/// Relative error with an absolute fallback for entries below 1e-7.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

/// Compares [`nll_backward`] against central differences of the NLL over
/// every raw parameter; returns the worst relative error.
pub fn finite_diff_check(model: &FlowModel, x: &[f64], eps: f64) -> Result<f64> {
    Ok(finite_diff_report(model, x, eps, usize::MAX)?.max_rel_error)
}

/// Like [`finite_diff_check`], but visits at most `budget` parameters chosen
/// by a fixed stride through the flat parameter vector.
pub fn finite_diff_report(
    model: &FlowModel,
    x: &[f64],
    eps: f64,
    budget: usize,
) -> Result<FiniteDiffReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let out = model.forward(x)?;
    let analytic = nll_backward(model, &out.trace)?.to_flat();
    let total = analytic.len();
    let stride = total.div_ceil(budget.max(1)).max(1);

    let nll_at = |m: &FlowModel| -> Result<f64> {
        let o = m.forward(x)?;
        Ok(crate::flow::nll(&o.y, o.logdet))
    };

    let mut probe = model.clone();
    let mut worst = (0.0, 0);
    let mut checked = 0;
    let mut flat = 0;
    let n_blocks = probe.param_blocks().len();
    for bi in 0..n_blocks {
        let len = probe.param_blocks()[bi].len();
        for ei in 0..len {
            let idx = flat + ei;
            if idx % stride != 0 {
                continue;
            }
            let orig = probe.param_blocks()[bi][ei];
            probe.param_blocks_mut()[bi][ei] = orig + eps;
            let up = nll_at(&probe)?;
            probe.param_blocks_mut()[bi][ei] = orig - eps;
            let down = nll_at(&probe)?;
            probe.param_blocks_mut()[bi][ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = gradient_error(analytic[idx], numeric);
            if err > worst.0 || checked == 0 {
                worst = (err, idx);
            }
            checked += 1;
        }
        flat += len;
    }
    Ok(FiniteDiffReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked,
        total,
    })
}
