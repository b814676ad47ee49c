use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tape::rmsnorm_rows;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Where RMSNorm sits relative to a residual branch `F`.
///
/// * `Pre`: `x + F(norm(x))`
/// * `Post`: `norm(x + F(x))`
/// * `Sandwich`: `norm2(x + F(norm1(x)))`
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
    Sandwich,
}

impl NormPlacement {
    pub fn inner(self) -> bool {
        matches!(self, NormPlacement::Pre | NormPlacement::Sandwich)
    }

    pub fn outer(self) -> bool {
        matches!(self, NormPlacement::Post | NormPlacement::Sandwich)
    }
}

/// `x_i * gain_i / sqrt(mean(x^2) + eps)` for one vector.
pub fn rmsnorm<R: Real>(x: &[R], gain: &[R], eps: f64) -> Vec<R> {
    assert_eq!(x.len(), gain.len(), "rmsnorm gain width");
    rmsnorm_rows(x, gain, R::of(eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stays_zero() {
        assert_eq!(rmsnorm(&[0.0f64; 4], &[1.0; 4], DEFAULT_EPS), [0.0; 4]);
    }

    #[test]
    fn three_four() {
        let y = rmsnorm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0);
        let rms = libm::sqrt(12.5);
        assert!((y[0] - 3.0 / rms).abs() < 1e-15);
        assert!((y[1] - 4.0 / rms).abs() < 1e-15);
        assert!((y[0] - 0.848_528).abs() < 1e-6);
        assert!((y[1] - 1.131_371).abs() < 1e-6);
    }

    #[test]
    fn scale_invariant_without_eps() {
        let x = [0.3f64, -1.2, 2.5, 0.01];
        let g = [1.0, 0.5, 2.0, -1.0];
        let a = rmsnorm(&x, &g, 0.0);
        let scaled: Vec<f64> = x.iter().map(|v| v * 7.5).collect();
        let b = rmsnorm(&scaled, &g, 0.0);
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
