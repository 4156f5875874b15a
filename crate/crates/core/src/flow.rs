//! Stacks of triangular units separated by optional order-reversing flips.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::nonlinearity::Nonlinearity;
use crate::unit::{TriUnit, UnitTrace};

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Architecture of a freshly initialized model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub n_dim: usize,
    pub block_size: usize,
    pub n_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub flip: bool,
}

impl Architecture {
    /// Four units with flips, as in the long-run image recipes.
    pub fn new(n_dim: usize, block_size: usize) -> Self {
        Self {
            n_dim,
            block_size,
            n_layers: 4,
            nonlinearity: Nonlinearity::LogSym,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    layers: Vec<TriUnit>,
    flip_after: Vec<bool>,
    norm_absorbed: bool,
}

impl FlowModel {
    pub fn new(layers: Vec<TriUnit>, flip_after: Vec<bool>, norm_absorbed: bool) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidDimensions("a flow needs at least one layer".into()));
        };
        if flip_after.len() != layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} flip flags for {} layers",
                flip_after.len(),
                layers.len()
            )));
        }
        let n = first.n_dim();
        if let Some(bad) = layers.iter().position(|l| l.n_dim() != n) {
            return Err(Error::ShapeMismatch(format!(
                "layer {bad} has n_dim {}, layer 0 has {n}",
                layers[bad].n_dim()
            )));
        }
        Ok(Self {
            layers,
            flip_after,
            norm_absorbed,
        })
    }

    /// Seeded near-identity initialization; flips are uniform across layers.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.n_layers == 0 {
            return Err(Error::InvalidDimensions("n_layers must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..arch.n_layers)
            .map(|_| TriUnit::init(arch.n_dim, arch.block_size, arch.nonlinearity, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, vec![arch.flip; arch.n_layers], false)
    }

    pub fn n_dim(&self) -> usize {
        self.layers[0].n_dim()
    }

    pub fn layers(&self) -> &[TriUnit] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [TriUnit] {
        &mut self.layers
    }

    pub fn flip_after(&self) -> &[bool] {
        &self.flip_after
    }

    pub fn norm_absorbed(&self) -> bool {
        self.norm_absorbed
    }

    pub(crate) fn set_norm_absorbed(&mut self, v: bool) {
        self.norm_absorbed = v;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(TriUnit::param_count).sum()
    }

    /// All raw parameter blocks, layer by layer in storage order.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_blocks()).collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_blocks_mut())
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<FlowOutput> {
        if x.len() != self.n_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.n_dim()
            )));
        }
        let xt = Mat::from_vec(x.len(), 1, x.to_vec())?;
        let (trace, logdet) = self.forward_columns(xt)?;
        Ok(FlowOutput {
            y: trace.output.as_slice().to_vec(),
            logdet: logdet[0],
            trace,
        })
    }

    /// Batch evaluation of samples stored one per row.
    pub fn forward_batch(&self, x: &Mat) -> Result<BatchOutput> {
        if x.cols() != self.n_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} columns, model expects {}",
                x.cols(),
                self.n_dim()
            )));
        }
        let (trace, logdet) = self.forward_columns(x.transpose())?;
        Ok(BatchOutput {
            y: trace.output.transpose(),
            logdet,
            trace,
        })
    }

    /// Batch evaluation of samples stored one per column (`N x S`).
    pub fn forward_columns(&self, xt: Mat) -> Result<(FlowTrace, Vec<f64>)> {
        let mut logdet = vec![0.0; xt.cols()];
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut cur = xt;
        for (unit, &flip) in self.layers.iter().zip(&self.flip_after) {
            let (mut y, trace) = unit.forward_columns(cur)?;
            for (acc, ld) in logdet.iter_mut().zip(trace.logdet()) {
                *acc += ld;
            }
            layers.push(trace);
            if flip {
                flip_rows(&mut y);
            }
            cur = y;
        }
        Ok((
            FlowTrace {
                layers,
                output: cur,
            },
            logdet,
        ))
    }

    /// Per-sample NLL for samples stored one per row.
    pub fn nll_rows(&self, x: &Mat) -> Result<Vec<f64>> {
        let (trace, logdet) = self.forward_columns(x.transpose())?;
        Ok(column_nll(&trace.output, &logdet))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let out = self.forward(x)?;
        Ok(-nll(&out.y, out.logdet))
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub y: Vec<f64>,
    pub logdet: f64,
    pub trace: FlowTrace,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Outputs, one sample per row.
    pub y: Mat,
    pub logdet: Vec<f64>,
    pub trace: FlowTrace,
}

/// Per-layer traces plus the final output in column layout.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub layers: Vec<UnitTrace>,
    pub output: Mat,
}

impl FlowTrace {
    pub fn samples(&self) -> usize {
        self.output.cols()
    }
}

/// Reverses the order of a vector.
pub fn flip(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

/// Reverses the row order of a column-per-sample batch.
pub(crate) fn flip_rows(m: &mut Mat) {
    let n = m.rows();
    let s = m.cols();
    let data = m.as_mut_slice();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let (lo, hi) = data.split_at_mut(j * s);
        lo[i * s..(i + 1) * s].swap_with_slice(&mut hi[..s]);
    }
}

/// Standard-normal base NLL in nats: `-logdet + y'y/2 + N ln(2 pi)/2`.
pub fn nll(y: &[f64], logdet: f64) -> f64 {
    -logdet + 0.5 * dot(y, y) + y.len() as f64 * HALF_LN_2PI
}

pub(crate) fn column_nll(yt: &Mat, logdet: &[f64]) -> Vec<f64> {
    let n = yt.rows();
    let mut sq = vec![0.0; yt.cols()];
    for r in 0..n {
        for (acc, v) in sq.iter_mut().zip(yt.row(r)) {
            *acc += v * v;
        }
    }
    sq.iter()
        .zip(logdet)
        .map(|(q, ld)| -ld + 0.5 * q + n as f64 * HALF_LN_2PI)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    #[test]
    fn flip_examples() {
        assert_eq!(flip(&[1.0, 2.0, 3.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(flip(&[4.0]), vec![4.0]);
        let x = [0.5, -1.0, 2.0, 7.0];
        assert_eq!(flip(&flip(&x)), x.to_vec());
    }

    #[test]
    fn flip_rows_matches_vector_flip() {
        for n in 1..6 {
            let mut m = Mat::from_vec(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
            let col0: Vec<f64> = (0..n).map(|r| m[(r, 0)]).collect();
            flip_rows(&mut m);
            let flipped: Vec<f64> = (0..n).map(|r| m[(r, 0)]).collect();
            assert_eq!(flipped, flip(&col0));
        }
    }

    #[test]
    fn nll_examples() {
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((nll(&[0.0], 0.0) - 0.918_939).abs() < 1e-6);
        assert!((nll(&[1.0], LN_2) - 0.725_791).abs() < 1e-6);
    }

    #[test]
    fn single_layer_without_flip_is_the_unit() {
        let arch = Architecture {
            n_dim: 3,
            block_size: 2,
            n_layers: 1,
            nonlinearity: Nonlinearity::Tanh,
            flip: false,
        };
        let model = FlowModel::init(&arch, 4).unwrap();
        let x = [0.2, -0.4, 1.0];
        let a = model.forward(&x).unwrap();
        let b = model.layers()[0].forward(&x).unwrap();
        assert_eq!(a.y, b.y);
        assert!((a.logdet - b.log_diag.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn batch_and_single_agree() {
        let arch = Architecture {
            n_dim: 4,
            block_size: 3,
            n_layers: 3,
            nonlinearity: Nonlinearity::LogSym,
            flip: true,
        };
        let model = FlowModel::init(&arch, 8).unwrap();
        let rows = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 2.0, -0.3]];
        let x = Mat::from_rows(&rows).unwrap();
        let batch = model.forward_batch(&x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = model.forward(r).unwrap();
            assert_eq!(batch.y.row(i), single.y.as_slice());
            assert!((batch.logdet[i] - single.logdet).abs() < 1e-14);
        }
        let nlls = model.nll_rows(&x).unwrap();
        let single = model.forward(&rows[1]).unwrap();
        assert!((nlls[1] - nll(&single.y, single.logdet)).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_layers() {
        let a = TriUnit::zeros(2, 1, Nonlinearity::Tanh).unwrap();
        let b = TriUnit::zeros(3, 1, Nonlinearity::Tanh).unwrap();
        assert!(FlowModel::new(vec![a.clone(), b], vec![true, true], false).is_err());
        assert!(FlowModel::new(vec![a], vec![], false).is_err());
        assert!(FlowModel::new(vec![], vec![], false).is_err());
    }
}
