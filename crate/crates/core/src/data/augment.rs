use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, ImageGeom};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Largest shift along a side: `floor(max_frac * side)`.
pub fn max_shift(side: usize, max_frac: f64) -> usize {
    (max_frac * side as f64).floor().max(0.0) as usize
}

/// Circular shift of one channel-planar image by `dx` columns and `dy` rows.
pub fn shift_image(img: &[f64], geom: ImageGeom, dx: i64, dy: i64) -> Vec<f64> {
    let (h, w) = (geom.height, geom.width);
    let plane = h * w;
    let mut out = vec![0.0; img.len()];
    let sx = dx.rem_euclid(w as i64) as usize;
    let sy = dy.rem_euclid(h as i64) as usize;
    for c in 0..geom.channels {
        let src = &img[c * plane..(c + 1) * plane];
        let dst = &mut out[c * plane..(c + 1) * plane];
        for y in 0..h {
            let ty = (y + sy) % h;
            for x in 0..w {
                dst[ty * w + (x + sx) % w] = src[y * w + x];
            }
        }
    }
    out
}

/// Shifts every row independently; row `i` draws from stream `i` of `seed`.
pub fn augment_rows(samples: &Mat, geom: ImageGeom, max_frac: f64, seed: u64) -> Result<Mat> {
    if samples.cols() != geom.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "{} columns for {}x{}x{} images",
            samples.cols(),
            geom.height,
            geom.width,
            geom.channels
        )));
    }
    if !(max_frac >= 0.0) || !max_frac.is_finite() {
        return Err(Error::Config(format!("shift fraction {max_frac} must be non-negative")));
    }
    let kx = max_shift(geom.width, max_frac) as i64;
    let ky = max_shift(geom.height, max_frac) as i64;
    let mut out = samples.clone();
    if kx == 0 && ky == 0 {
        return Ok(out);
    }
    let cols = samples.cols();
    out.as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dx = rng.random_range(-kx..=kx);
            let dy = rng.random_range(-ky..=ky);
            let shifted = shift_image(row, geom, dx, dy);
            row.copy_from_slice(&shifted);
        });
    Ok(out)
}

/// Randomly shifted copy of an image dataset.
pub fn augment_shift(ds: &Dataset, max_frac: f64, seed: u64) -> Result<Dataset> {
    let geom = ds
        .image_geom()
        .ok_or_else(|| Error::Config("shift augmentation needs image data".into()))?;
    let mut out = ds.clone();
    *out.samples_mut() = augment_rows(ds.samples(), geom, max_frac, seed)?;
    Ok(out)
}
