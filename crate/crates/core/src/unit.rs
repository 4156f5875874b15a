//! The monotonic triangular network unit `y = V phi(U x + a) + b`.
//!
//! `U` is `(N*B) x N` block-lower-triangular with `(B, 1)` blocks and `V` is
//! `N x (N*B)` block-lower-triangular with `(1, B)` blocks. Both live in a
//! single dense matrix of the shape of `U`:
//!
//! ```text
//!   packed[r][j], j <= r / B   ->  U[r][j]     (raw mu on the block diagonal)
//!   packed[r][j], j >  r / B   ->  V[j][r]     (off(V^T))
//! ```
//!
//! The block diagonal of `V` is kept as the separate raw vector `v_diag_raw`.
//! Block diagonals of both matrices pass through softplus before use, which
//! makes every `dy_n/dx_n` strictly positive.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, for_each_chunk, gemm, Mat, Strided, OUTPUT_TILE};
use crate::nonlinearity::{softplus, softplus_inv, Nonlinearity};

/// Floor applied to diagonal Jacobian terms before taking logarithms.
pub const DIAG_FLOOR: f64 = 1e-300;

/// True when packed position `(r, j)` belongs to `U` (block lower triangle,
/// block diagonal included) rather than to `off(V^T)`.
#[inline]
pub fn in_u_region(r: usize, j: usize, block_size: usize) -> bool {
    j <= r / block_size
}

/// Boolean masks over the packed `(N*B) x N` matrix, regenerated on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMasks {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<bool>,
    pub v_off: Vec<bool>,
}

impl BlockMasks {
    pub fn u_at(&self, r: usize, j: usize) -> bool {
        self.u[r * self.cols + j]
    }

    pub fn v_off_at(&self, r: usize, j: usize) -> bool {
        self.v_off[r * self.cols + j]
    }
}

pub fn build_masks(n_dim: usize, block_size: usize) -> Result<BlockMasks> {
    check_dims(n_dim, block_size)?;
    let rows = n_dim * block_size;
    let mut u = Vec::with_capacity(rows * n_dim);
    for r in 0..rows {
        for j in 0..n_dim {
            u.push(in_u_region(r, j, block_size));
        }
    }
    let v_off = u.iter().map(|&m| !m).collect();
    Ok(BlockMasks {
        rows,
        cols: n_dim,
        u,
        v_off,
    })
}

fn check_dims(n_dim: usize, block_size: usize) -> Result<()> {
    if n_dim == 0 || block_size == 0 {
        return Err(Error::InvalidDimensions(format!(
            "n_dim and block_size must be positive (got {n_dim}, {block_size})"
        )));
    }
    Ok(())
}

/// Raw parameters split back into the two triangular matrices, before any
/// softplus. `u` holds raw mu on its block diagonal; `v` holds raw nu on its
/// block diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedRaw {
    pub u: Mat,
    pub v: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriUnit {
    n_dim: usize,
    block_size: usize,
    packed: Mat,
    v_diag_raw: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    nonlinearity: Nonlinearity,
}

impl TriUnit {
    /// Builds a unit from raw stored parameters.
    pub fn from_raw(
        n_dim: usize,
        block_size: usize,
        packed: Mat,
        v_diag_raw: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        check_dims(n_dim, block_size)?;
        let nb = n_dim * block_size;
        if packed.rows() != nb || packed.cols() != n_dim {
            return Err(Error::ShapeMismatch(format!(
                "packed matrix is {}x{}, expected {nb}x{n_dim}",
                packed.rows(),
                packed.cols()
            )));
        }
        if v_diag_raw.len() != nb || a.len() != nb || b.len() != n_dim {
            return Err(Error::ShapeMismatch(format!(
                "vector lengths (v_diag {}, a {}, b {}) do not match N={n_dim}, B={block_size}",
                v_diag_raw.len(),
                a.len(),
                b.len()
            )));
        }
        Ok(Self {
            n_dim,
            block_size,
            packed,
            v_diag_raw,
            a,
            b,
            nonlinearity,
        })
    }

    /// All-zero raw parameters (every materialized diagonal equals ln 2).
    pub fn zeros(n_dim: usize, block_size: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        check_dims(n_dim, block_size)?;
        let nb = n_dim * block_size;
        Self::from_raw(
            n_dim,
            block_size,
            Mat::zeros(nb, n_dim),
            vec![0.0; nb],
            vec![0.0; nb],
            vec![0.0; n_dim],
            nonlinearity,
        )
    }

    /// Near-identity-scale random initialization.
    ///
    /// Off-block-diagonal entries are drawn from `Normal(0, 0.01/sqrt(N))`,
    /// block diagonals start at `softplus^-1(1/sqrt(B))`, and the `B` hidden
    /// units of each dimension are centred at evenly spaced points of
    /// `(-3, 3)` so they start out distinct. `b` is chosen so the unit maps
    /// the origin to the origin.
    pub fn init<R: Rng + ?Sized>(
        n_dim: usize,
        block_size: usize,
        nonlinearity: Nonlinearity,
        rng: &mut R,
    ) -> Result<Self> {
        let mut unit = Self::zeros(n_dim, block_size, nonlinearity)?;
        let off = Normal::new(0.0, 0.01 / (n_dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let diag_scale = 1.0 / (block_size as f64).sqrt();
        let diag_raw = softplus_inv(diag_scale);
        let nb = n_dim * block_size;
        for r in 0..nb {
            let k = r / block_size;
            for j in 0..n_dim {
                unit.packed[(r, j)] = if j == k { diag_raw } else { off.sample(rng) };
            }
        }
        unit.v_diag_raw.fill(diag_raw);
        for r in 0..nb {
            let i = r % block_size;
            let centre = 3.0 * (2.0 * (i as f64 + 0.5) / block_size as f64 - 1.0);
            unit.a[r] = -diag_scale * centre;
        }
        let origin = unit.forward(&vec![0.0; n_dim])?.y;
        for (b, y0) in unit.b.iter_mut().zip(origin) {
            *b = -y0;
        }
        Ok(unit)
    }

    #[inline]
    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.n_dim * self.block_size
    }

    #[inline]
    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn packed(&self) -> &Mat {
        &self.packed
    }

    pub fn packed_mut(&mut self) -> &mut Mat {
        &mut self.packed
    }

    pub fn v_diag_raw(&self) -> &[f64] {
        &self.v_diag_raw
    }

    pub fn v_diag_raw_mut(&mut self) -> &mut [f64] {
        &mut self.v_diag_raw
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    /// Number of stored floats: `N*B*N + 2*N*B + N`.
    pub fn param_count(&self) -> usize {
        stored_float_count(self.n_dim, self.block_size)
    }

    /// Raw parameter blocks in storage order: packed, v_diag_raw, a, b.
    pub fn param_blocks(&self) -> [&[f64]; 4] {
        [self.packed.as_slice(), &self.v_diag_raw, &self.a, &self.b]
    }

    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.packed.as_mut_slice(),
            &mut self.v_diag_raw,
            &mut self.a,
            &mut self.b,
        ]
    }

    /// Materialized positive diagonal of `U`: `u[r] = softplus(packed[r][r/B])`.
    pub fn u_diag(&self) -> Vec<f64> {
        (0..self.hidden())
            .map(|r| softplus(self.packed[(r, r / self.block_size)]))
            .collect()
    }

    /// Materialized positive diagonal of `V`.
    pub fn v_diag(&self) -> Vec<f64> {
        self.v_diag_raw.iter().map(|&r| softplus(r)).collect()
    }

    /// Splits the packed storage into raw `U` and `V` (no softplus applied).
    pub fn unpack(&self) -> UnpackedRaw {
        let (n, bs, nb) = (self.n_dim, self.block_size, self.hidden());
        let mut u = Mat::zeros(nb, n);
        let mut v = Mat::zeros(n, nb);
        for r in 0..nb {
            for j in 0..n {
                let p = self.packed[(r, j)];
                if in_u_region(r, j, bs) {
                    u[(r, j)] = p;
                } else {
                    v[(j, r)] = p;
                }
            }
            v[(r / bs, r)] = self.v_diag_raw[r];
        }
        UnpackedRaw { u, v }
    }

    /// Inverse of [`TriUnit::unpack`]. Entries outside the triangular
    /// structure of `raw.u` / `raw.v` are ignored.
    pub fn pack(
        n_dim: usize,
        block_size: usize,
        raw: &UnpackedRaw,
        a: Vec<f64>,
        b: Vec<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        check_dims(n_dim, block_size)?;
        let nb = n_dim * block_size;
        if raw.u.rows() != nb || raw.u.cols() != n_dim || raw.v.rows() != n_dim || raw.v.cols() != nb
        {
            return Err(Error::ShapeMismatch("unpacked matrices have the wrong shape".into()));
        }
        let mut packed = Mat::zeros(nb, n_dim);
        let mut v_diag_raw = vec![0.0; nb];
        for r in 0..nb {
            for j in 0..n_dim {
                packed[(r, j)] = if in_u_region(r, j, block_size) {
                    raw.u[(r, j)]
                } else {
                    raw.v[(j, r)]
                };
            }
            v_diag_raw[r] = raw.v[(r / block_size, r)];
        }
        Self::from_raw(n_dim, block_size, packed, v_diag_raw, a, b, nonlinearity)
    }

    /// Dense `U` and `V` with softplus applied to their block diagonals.
    pub fn materialize(&self) -> (Mat, Mat) {
        let UnpackedRaw { mut u, mut v } = self.unpack();
        let bs = self.block_size;
        for r in 0..self.hidden() {
            let k = r / bs;
            u[(r, k)] = softplus(u[(r, k)]);
            v[(k, r)] = softplus(v[(k, r)]);
        }
        (u, v)
    }

    /// Rebuilds a unit from materialized `U` (block diagonal must be strictly
    /// positive), keeping `reference`'s raw `V`. A diagonal entry equal to
    /// `reference`'s materialized value keeps its raw encoding bit-for-bit.
    pub(crate) fn with_materialized_u(&self, u: &Mat, a: Vec<f64>) -> Result<Self> {
        let bs = self.block_size;
        let mut out = self.clone();
        for r in 0..self.hidden() {
            let k = r / bs;
            for j in 0..=k {
                let val = u[(r, j)];
                if j < k {
                    out.packed[(r, j)] = val;
                } else {
                    if !(val > 0.0) || !val.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "re-encoded block diagonal U[{r}][{k}] = {val} is not positive"
                        )));
                    }
                    let raw = self.packed[(r, k)];
                    if softplus(raw) != val {
                        out.packed[(r, k)] = softplus_inv(val);
                    }
                }
            }
        }
        out.a = a;
        Ok(out)
    }

    /// Evaluates a single sample.
    pub fn forward(&self, x: &[f64]) -> Result<UnitOutput> {
        if x.len() != self.n_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has length {}, unit expects {}",
                x.len(),
                self.n_dim
            )));
        }
        let xt = Mat::from_vec(self.n_dim, 1, x.to_vec())?;
        let (yt, trace) = self.forward_columns(xt)?;
        let log_diag = trace.log_diag_column(0);
        Ok(UnitOutput {
            y: yt.into_vec(),
            log_diag,
            trace,
        })
    }

    /// Evaluates a batch stored one sample per column (`N x S`).
    pub fn forward_columns(&self, xt: Mat) -> Result<(Mat, UnitTrace)> {
        let (n, bs, nb) = (self.n_dim, self.block_size, self.hidden());
        if xt.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} rows, unit expects {n}",
                xt.rows()
            )));
        }
        let s = xt.cols();
        let u_diag = self.u_diag();
        let v_diag = self.v_diag();
        let packed = &self.packed;
        let work = nb * n * s / 2;

        let mut z = Mat::zeros(nb, s);
        for_each_chunk(z.as_mut_slice(), s, bs, work, |k, zc| {
            for (i, zr) in zc.chunks_mut(s).enumerate() {
                zr.fill(self.a[k * bs + i]);
            }
            gemm(bs, k, s, Strided::rows(packed, k * bs, 0), Strided::rows(&xt, 0, 0), 1.0, zc, s);
            for (i, zr) in zc.chunks_mut(s).enumerate() {
                axpy(u_diag[k * bs + i], xt.row(k), zr);
            }
        });

        let nl = self.nonlinearity;
        let mut phi = Mat::zeros(nb, s);
        let mut dphi = Mat::zeros(nb, s);
        let mut ddphi = Mat::zeros(nb, s);
        for (((zv, p), d1), d2) in z
            .as_slice()
            .iter()
            .zip(phi.as_mut_slice())
            .zip(dphi.as_mut_slice())
            .zip(ddphi.as_mut_slice())
        {
            let act = nl.eval(*zv);
            *p = act.value;
            *d1 = act.d1;
            *d2 = act.d2;
        }

        let mut y = Mat::zeros(n, s);
        for_each_chunk(y.as_mut_slice(), s, OUTPUT_TILE, work, |t, yc| {
            let n0 = t * OUTPUT_TILE;
            let rows = yc.len() / s.max(1);
            for (i, yr) in yc.chunks_mut(s).enumerate() {
                yr.fill(self.b[n0 + i]);
            }
            // rows of phi below the tile feed every output in it
            gemm(rows, n0 * bs, s, Strided::transposed(packed, 0, n0), Strided::rows(&phi, 0, 0), 1.0, yc, s);
            for (i, yr) in yc.chunks_mut(s).enumerate() {
                let row = n0 + i;
                for r in n0 * bs..row * bs {
                    axpy(packed[(r, row)], phi.row(r), yr);
                }
                for r in row * bs..(row + 1) * bs {
                    axpy(v_diag[r], phi.row(r), yr);
                }
            }
        });

        let mut diag = Mat::zeros(n, s);
        for row in 0..n {
            let dr = diag.row_mut(row);
            for r in row * bs..(row + 1) * bs {
                axpy(u_diag[r] * v_diag[r], dphi.row(r), dr);
            }
        }

        if !y.as_slice().iter().all(|v| v.is_finite())
            || !diag.as_slice().iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("unit forward pass".into()));
        }

        Ok((
            y,
            UnitTrace {
                x: xt,
                z,
                phi,
                dphi,
                ddphi,
                diag,
            },
        ))
    }
}

/// Stored float count for one unit.
pub fn stored_float_count(n_dim: usize, block_size: usize) -> usize {
    let nb = n_dim * block_size;
    nb * n_dim + 2 * nb + n_dim
}

/// Result of a single-sample unit evaluation.
#[derive(Debug, Clone)]
pub struct UnitOutput {
    pub y: Vec<f64>,
    pub log_diag: Vec<f64>,
    pub trace: UnitTrace,
}

/// Cached intermediates of one unit over a batch, one sample per column.
#[derive(Debug, Clone)]
pub struct UnitTrace {
    /// Unit input, `N x S`.
    pub x: Mat,
    /// Pre-activation `U x + a`, `NB x S`.
    pub z: Mat,
    pub phi: Mat,
    pub dphi: Mat,
    pub ddphi: Mat,
    /// Diagonal Jacobian terms `d_n = sum_i u_{n,i} v_{n,i} phi'_{nB+i}`, `N x S`.
    pub diag: Mat,
}

impl UnitTrace {
    pub fn samples(&self) -> usize {
        self.x.cols()
    }

    pub fn log_diag_column(&self, s: usize) -> Vec<f64> {
        (0..self.diag.rows())
            .map(|n| self.diag[(n, s)].max(DIAG_FLOOR).ln())
            .collect()
    }

    /// Per-sample sum of log diagonal terms.
    pub fn logdet(&self) -> Vec<f64> {
        let s = self.samples();
        let mut out = vec![0.0; s];
        for n in 0..self.diag.rows() {
            for (o, d) in out.iter_mut().zip(self.diag.row(n)) {
                *o += d.max(DIAG_FLOOR).ln();
            }
        }
        out
    }
}
