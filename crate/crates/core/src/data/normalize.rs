//! Cholesky whitening `x <- Gamma (x - m)` with `Gamma' Gamma = C^-1`, and
//! its absorption into the first unit of a flow.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::linalg::Mat;

const RIDGE_START: f64 = 1e-6;
const RIDGE_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    gamma: Mat,
}

impl Normalizer {
    /// Validates that `gamma` is lower triangular with a positive diagonal.
    pub fn new(mean: Vec<f64>, gamma: Mat) -> Result<Self> {
        let n = mean.len();
        if n == 0 || gamma.rows() != n || gamma.cols() != n {
            return Err(Error::ShapeMismatch(format!(
                "normalizer with {n}-vector mean and {}x{} gamma",
                gamma.rows(),
                gamma.cols()
            )));
        }
        for r in 0..n {
            if !(gamma[(r, r)] > 0.0) || !gamma[(r, r)].is_finite() {
                return Err(Error::Config(format!(
                    "gamma diagonal entry {r} = {} must be positive",
                    gamma[(r, r)]
                )));
            }
            if gamma.row(r)[r + 1..].iter().any(|&v| v != 0.0) {
                return Err(Error::Config(format!("gamma row {r} is not lower triangular")));
            }
        }
        Ok(Self { mean, gamma })
    }

    pub fn identity(n_dim: usize) -> Self {
        Self {
            mean: vec![0.0; n_dim],
            gamma: Mat::identity(n_dim),
        }
    }

    pub fn n_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn gamma(&self) -> &Mat {
        &self.gamma
    }

    /// `sum ln Gamma_nn`, the log-Jacobian of the whitening map.
    pub fn log_det(&self) -> f64 {
        (0..self.n_dim()).map(|i| self.gamma[(i, i)].ln()).sum()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        (0..self.n_dim())
            .map(|r| {
                let row = &self.gamma.row(r)[..=r];
                row.iter().zip(&centred).map(|(g, c)| g * c).sum()
            })
            .collect()
    }

    /// Whitens samples stored one per row.
    pub fn transform_rows(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.n_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} columns for a {}-dimensional normalizer",
                x.cols(),
                self.n_dim()
            )));
        }
        let mut centred = x.clone();
        for r in 0..centred.rows() {
            for (v, m) in centred.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centred.matmul(&self.gamma.transpose())
    }
}

/// Fits mean and Cholesky whitening on samples stored one per row, using the
/// `1/M` covariance. A trace-scaled ridge is added only if the plain
/// factorization fails.
pub fn fit_normalizer(samples: &Mat) -> Result<Normalizer> {
    let (m, n) = (samples.rows(), samples.cols());
    if m < 2 || n == 0 {
        return Err(Error::InvalidDimensions(format!(
            "need at least 2 samples of positive dimension, got {m}x{n}"
        )));
    }
    if samples.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalizer input".into()));
    }
    let mut mean = vec![0.0; n];
    for r in 0..m {
        for (acc, v) in mean.iter_mut().zip(samples.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);

    let centred = DMatrix::from_fn(m, n, |r, c| samples[(r, c)] - mean[c]);
    let cov = centred.tr_mul(&centred) / m as f64;
    let scale = cov.trace() / n as f64;

    let mut ridge = 0.0;
    let l = loop {
        let mut c = cov.clone();
        for i in 0..n {
            c[(i, i)] += ridge;
        }
        if let Some(chol) = c.cholesky() {
            break chol.unpack();
        }
        ridge = if ridge == 0.0 {
            RIDGE_START * scale
        } else {
            2.0 * ridge
        };
        if !(scale > 0.0) || !(ridge <= RIDGE_MAX * scale) {
            return Err(Error::Cholesky { ridge });
        }
    };
    let gamma = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::Cholesky { ridge })?;
    let mut g = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            g[(r, c)] = gamma[(r, c)];
        }
    }
    Normalizer::new(mean, g)
}

/// Folds the whitening into the first unit: `U <- U Gamma`,
/// `a <- a - U Gamma m`. The result evaluated at `x` equals the original
/// model evaluated at `Gamma (x - m)`, with `ln Gamma_nn` added to the logdet.
pub fn absorb_normalizer(model: &FlowModel, norm: &Normalizer) -> Result<FlowModel> {
    if model.norm_absorbed() {
        return Err(Error::Config("model already has a normalizer absorbed".into()));
    }
    if norm.n_dim() != model.n_dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}-dimensional normalizer for a {}-dimensional model",
            norm.n_dim(),
            model.n_dim()
        )));
    }
    let first = &model.layers()[0];
    let (u, _) = first.materialize();
    let ug = u.matmul(norm.gamma())?;
    let shift = ug.mul_vec(norm.mean());
    let a: Vec<f64> = first.a().iter().zip(&shift).map(|(a, s)| a - s).collect();
    let absorbed = first.with_materialized_u(&ug, a)?;

    let mut out = model.clone();
    out.layers_mut()[0] = absorbed;
    out.set_norm_absorbed(true);
    Ok(out)
}
