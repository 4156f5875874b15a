//! Element-wise activations for triangular units, plus the softplus
//! reparameterization that keeps block diagonals positive.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Strictly increasing, odd activation.
///
/// `LogSym` is `sign(x) * ln(1 + |x|)`: unbounded, so stacks built from it are
/// bijective on all of R^N. `Tanh` is bounded and only injective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Tanh,
    LogSym,
}

/// Value and first two derivatives of an activation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Nonlinearity {
    #[inline]
    pub fn eval(self, x: f64) -> Activation {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                Activation {
                    value: t,
                    d1,
                    d2: -2.0 * t * d1,
                }
            }
            Nonlinearity::LogSym => {
                let ax = x.abs();
                let s = sign(x);
                let inv = 1.0 / (1.0 + ax);
                Activation {
                    value: s * ax.ln_1p(),
                    d1: inv,
                    d2: -s * inv * inv,
                }
            }
        }
    }

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::LogSym => sign(x) * x.abs().ln_1p(),
        }
    }

    /// Supremum of `|phi|`, or `None` when unbounded.
    pub fn bound(self) -> Option<f64> {
        match self {
            Nonlinearity::Tanh => Some(1.0),
            Nonlinearity::LogSym => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::LogSym => "log",
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "log" | "logsym" => Ok(Nonlinearity::LogSym),
            other => Err(Error::Config(format!(
                "unknown nonlinearity '{other}' (expected tanh or log)"
            ))),
        }
    }
}

/// sign with sign(0) = 0.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ln(1 + e^raw)`, equal to `-ln sigmoid(-raw)`.
#[inline]
pub fn softplus(raw: f64) -> f64 {
    if raw > 0.0 {
        raw + (-raw).exp().ln_1p()
    } else {
        raw.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `value > 0`.
#[inline]
pub fn softplus_inv(value: f64) -> f64 {
    if value > 30.0 {
        value + (-(-value).exp()).ln_1p()
    } else {
        value.exp_m1().ln()
    }
}

/// Derivative of softplus.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn softplus_values() {
        assert_eq!(softplus(0.0), LN_2);
        let tiny = softplus(-1e6);
        assert!(tiny >= 0.0 && tiny.is_finite());
        // ln(1 + e^2) to 16 digits
        assert!((softplus(2.0) - 2.126_928_011_042_972_5).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(800.0), 800.0);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &v in &[1e-8, 0.1, 0.5, 1.0, 3.0, 29.0, 31.0, 200.0] {
            let r = softplus_inv(v);
            assert!((softplus(r) - v).abs() <= 1e-12 * v.max(1.0), "v={v}");
        }
        assert!((softplus_inv(E - 1.0) - (E - 1.0).exp_m1().ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        for &x in &[-30.0, -2.0, 0.0, 0.7, 15.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn logsym_closed_forms() {
        let a = Nonlinearity::LogSym.eval(0.0);
        assert_eq!((a.value, a.d1, a.d2), (0.0, 1.0, 0.0));
        let a = Nonlinearity::LogSym.eval(E - 1.0);
        assert!((a.value - 1.0).abs() < 1e-15);
        assert!((a.d1 - 1.0 / E).abs() < 1e-15);
        assert!((a.d2 + 1.0 / (E * E)).abs() < 1e-15);
    }

    #[test]
    fn tanh_at_origin() {
        let a = Nonlinearity::Tanh.eval(0.0);
        assert_eq!((a.value, a.d1, a.d2), (0.0, 1.0, 0.0));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for nl in [Nonlinearity::Tanh, Nonlinearity::LogSym] {
            for &x in &[-3.2, -0.4, 0.3, 1.7, 6.0] {
                let h = 1e-5;
                let a = nl.eval(x);
                let fd1 = (nl.value(x + h) - nl.value(x - h)) / (2.0 * h);
                let fd2 = (nl.eval(x + h).d1 - nl.eval(x - h).d1) / (2.0 * h);
                assert!((fd1 - a.d1).abs() < 1e-8, "{nl} d1 at {x}");
                assert!((fd2 - a.d2).abs() < 1e-7, "{nl} d2 at {x}");
            }
        }
    }

    #[test]
    fn odd_and_increasing() {
        for nl in [Nonlinearity::Tanh, Nonlinearity::LogSym] {
            let mut prev = f64::NEG_INFINITY;
            for i in -200..=200 {
                let x = i as f64 * 0.05;
                let v = nl.value(x);
                assert_eq!(nl.value(-x), -v);
                assert!(v > prev);
                assert!(nl.eval(x).d1 > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("tanh".parse::<Nonlinearity>().unwrap(), Nonlinearity::Tanh);
        assert_eq!("log".parse::<Nonlinearity>().unwrap(), Nonlinearity::LogSym);
        assert!("relu".parse::<Nonlinearity>().is_err());
    }
}
