mod common;

use common::{arch, normal_vec, random_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trinet::invert::{invert_unit, DEFAULT_TOL};
use trinet::{invert_flow, Error, Mat, Nonlinearity, TriUnit};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn four_layer_logsym_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = random_model(arch(5, 4, 4, Nonlinearity::LogSym, true), 2, 0.2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = normal_vec(&mut rng, 5, 1.5);
        let y = model.forward(&x).unwrap().y;
        let back = invert_flow(&model, &y, DEFAULT_TOL).unwrap();
        worst = worst.max(max_abs_diff(&back, &x));
    }
    assert!(worst < 1e-6, "worst round-trip error {worst}");
}

#[test]
fn unit_round_trip_both_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for nl in [Nonlinearity::Tanh, Nonlinearity::LogSym] {
        let model = random_model(arch(4, 3, 1, nl, false), 4, 0.3);
        let unit = &model.layers()[0];
        for _ in 0..1000 {
            let x = normal_vec(&mut rng, 4, 1.0);
            let y = unit.forward(&x).unwrap().y;
            let back = invert_unit(unit, &y, 1e-10).unwrap();
            assert!(max_abs_diff(&back, &x) < 1e-8);
        }
    }
}

#[test]
fn scalar_tanh_range_is_sharp() {
    // y = v tanh(u x + a) + b with range (b - v, b + v)
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let u_raw: f64 = rng.random_range(-1.0..2.0);
        let v_raw: f64 = rng.random_range(-1.0..2.0);
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        let packed = Mat::from_vec(1, 1, vec![u_raw]).unwrap();
        let unit =
            TriUnit::from_raw(1, 1, packed, vec![v_raw], vec![a], vec![b], Nonlinearity::Tanh).unwrap();
        let v = unit.v_diag()[0];
        for frac in [-1.5, -1.01, -0.99, -0.5, 0.0, 0.5, 0.99, 1.01, 2.0] {
            let y = b + frac * v;
            let res = invert_unit(&unit, &[y], 1e-10);
            if frac.abs() > 1.0 {
                assert!(matches!(res, Err(Error::NotInvertible { .. })), "{frac}: {res:?}");
            } else {
                let x = res.unwrap();
                assert!((unit.forward(&x).unwrap().y[0] - y).abs() < 1e-8);
            }
        }
    }
}
