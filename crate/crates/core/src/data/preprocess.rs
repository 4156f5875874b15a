use std::f64::consts::LN_2;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, PreprocessMeta};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nonlinearity::sigmoid;

/// Logit squeeze for 8-bit grayscale digits.
pub const LAMBDA_MNIST: f64 = 1e-6;
/// Logit squeeze for 8-bit colour images.
pub const LAMBDA_CIFAR: f64 = 0.05;

const LN_256: f64 = 8.0 * LN_2;

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..0.5).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be in [0, 0.5), got {lambda}")))
    }
}

/// Deterministic part of the pixel map for given noise `u` in (0, 1):
/// `z = logit(lambda + (1 - 2 lambda) (pixel + u) / 256)`.
///
/// The returned correction is `ln |dz/dpixel|` summed over dimensions.
pub fn logit_transform(pixels: &[f64], noise: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    check_lambda(lambda)?;
    if pixels.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels but {} noise values",
            pixels.len(),
            noise.len()
        )));
    }
    let scale = 1.0 - 2.0 * lambda;
    let ln_scale = scale.ln();
    let mut correction = 0.0;
    let z = pixels
        .iter()
        .zip(noise)
        .map(|(&p, &u)| {
            let s = (p + u) / 256.0;
            let t = lambda + scale * s;
            let (ln_t, ln_1mt) = (t.ln(), (-t).ln_1p());
            correction += ln_scale - ln_t - ln_1mt - LN_256;
            ln_t - ln_1mt
        })
        .collect::<Vec<_>>();
    if !correction.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "logit transform left the open unit interval; pixels must lie in [0, 255]".into(),
        ));
    }
    Ok((z, correction))
}

/// Uniform dequantization followed by the logit transform.
pub fn dequantize_logit<R: Rng + ?Sized>(
    pixels: &[f64],
    lambda: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let noise: Vec<f64> = (0..pixels.len()).map(|_| rng.sample(Open01)).collect();
    logit_transform(pixels, &noise, lambda)
}

/// Dequantizes every record with its own `(seed, index)` stream and attaches
/// the per-sample corrections.
pub fn dequantize_dataset(ds: &Dataset, lambda: f64, seed: u64) -> Result<Dataset> {
    check_lambda(lambda)?;
    let n = ds.n_dim();
    let rows = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            dequantize_logit(ds.samples().row(i), lambda, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Mat::zeros(ds.len(), n);
    let mut corrections = Vec::with_capacity(ds.len());
    for (i, (z, c)) in rows.into_iter().enumerate() {
        samples.row_mut(i).copy_from_slice(&z);
        corrections.push(c);
    }
    let mut out = ds.clone();
    *out.samples_mut() = samples;
    out.with_preprocess(PreprocessMeta {
        lambda,
        corrections,
    })
}

/// Maps logit-space values back to the pixel scale, clamped to `[0, 255]`.
pub fn logit_to_pixels(z: &[f64], lambda: f64) -> Vec<f64> {
    let scale = 1.0 - 2.0 * lambda;
    z.iter()
        .map(|&v| ((sigmoid(v) - lambda) / scale * 256.0).clamp(0.0, 255.0))
        .collect()
}

/// Bits per dimension of discrete pixels from a logit-space NLL in nats.
pub fn bpd(mean_nll_z: f64, mean_correction: f64, n_dim: usize) -> f64 {
    (mean_nll_z - mean_correction) / (n_dim as f64 * LN_2)
}
