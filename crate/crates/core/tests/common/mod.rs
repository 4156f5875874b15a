#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trinet::{Architecture, FlowModel, Nonlinearity};

/// Seeded model with every raw parameter jittered away from the
/// near-identity initialization.
pub fn random_model(arch: Architecture, seed: u64, spread: f64) -> FlowModel {
    let mut model = FlowModel::init(&arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) ^ 0x5eed);
    for blk in model.param_blocks_mut() {
        for v in blk.iter_mut() {
            *v += spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

pub fn arch(n: usize, b: usize, l: usize, nl: Nonlinearity, flip: bool) -> Architecture {
    Architecture {
        n_dim: n,
        block_size: b,
        n_layers: l,
        nonlinearity: nl,
        flip,
    }
}

/// `count` distinct architectures drawn without replacement from the product
/// of the given sizes, both nonlinearities and both flip settings.
pub fn family(ns: &[usize], bs: &[usize], ls: &[usize], count: usize) -> Vec<Architecture> {
    let mut all = Vec::new();
    for &n in ns {
        for &b in bs {
            for &l in ls {
                for nl in [Nonlinearity::Tanh, Nonlinearity::LogSym] {
                    for flip in [false, true] {
                        all.push(arch(n, b, l, nl, flip));
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa11);
    all.shuffle(&mut rng);
    all.truncate(count);
    all
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Central-difference Jacobian of the flow output.
pub fn numeric_jacobian(model: &FlowModel, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let yp = model.forward(&xp).unwrap().y;
        let ym = model.forward(&xm).unwrap().y;
        for i in 0..n {
            jac[i][j] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    jac
}

/// `ln |det A|` by Gaussian elimination with partial pivoting.
pub fn ln_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / pivot;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}
