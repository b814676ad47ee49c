//! FP8 E4M3 codec and per-tensor quantization.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are
//! no infinities; `S.1111.111` is the only NaN pattern, which leaves 448
//! (`0.1111.110`) as the largest finite magnitude. Encoding rounds to the
//! nearest representable value with ties to even and saturates at ±448.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAX_FINITE: f64 = 448.0;
pub const MIN_SUBNORMAL: f64 = 1.0 / 512.0;
pub const NAN_CODE: u8 = 0x7F;
const MIN_NORMAL_EXP: i32 = -6;

/// One E4M3 byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct E4M3(pub u8);

impl E4M3 {
    pub fn encode(v: f64) -> Self {
        E4M3(encode(v))
    }

    pub fn decode(self) -> f64 {
        decode(self.0)
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == NAN_CODE
    }
}

pub fn decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0F) as i32;
    let man = (code & 0x07) as f64;
    if exp == 0x0F && code & 0x07 == 0x07 {
        return if sign < 0.0 { -f64::NAN } else { f64::NAN };
    }
    let mag = if exp == 0 {
        man / 8.0 * libm::ldexp(1.0, MIN_NORMAL_EXP)
    } else {
        (1.0 + man / 8.0) * libm::ldexp(1.0, exp - 7)
    };
    sign * mag
}

pub fn encode(v: f64) -> u8 {
    let sign: u8 = if v.is_sign_negative() { 0x80 } else { 0 };
    if v.is_nan() {
        return sign | NAN_CODE;
    }
    let a = v.abs();
    if a >= MAX_FINITE {
        return sign | 0x7E;
    }
    if a == 0.0 {
        return sign;
    }
    // spacing of the grid around `a`
    let (_, e2) = libm::frexp(a);
    let exp = (e2 - 1).max(MIN_NORMAL_EXP);
    let quantum = libm::ldexp(1.0, exp - 3);
    // a / quantum is exact (power-of-two scaling); rint rounds half to even
    let steps = libm::rint(a / quantum);
    let q = steps * quantum;
    if q >= MAX_FINITE {
        return sign | 0x7E;
    }
    if q == 0.0 {
        return sign;
    }
    if q < libm::ldexp(1.0, MIN_NORMAL_EXP) {
        return sign | (q / MIN_SUBNORMAL) as u8;
    }
    let (_, e2) = libm::frexp(q);
    let e = e2 - 1;
    let man = (q / libm::ldexp(1.0, e) - 1.0) * 8.0;
    sign | (((e + 7) as u8) << 3) | man as u8
}

/// Grid spacing of the E4M3 format at magnitude `a` (no saturation).
pub fn ulp(a: f64) -> f64 {
    let a = a.abs();
    if a < libm::ldexp(1.0, MIN_NORMAL_EXP) {
        return MIN_SUBNORMAL;
    }
    let (_, e2) = libm::frexp(a);
    libm::ldexp(1.0, e2 - 1 - 3)
}

/// All 256 codes and their decoded values.
pub fn codebook() -> Vec<(u8, f64)> {
    (0..=255u8).map(|c| (c, decode(c))).collect()
}

/// Codes with one per-tensor scale: `x ~ decode(code) * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub codes: Vec<u8>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    /// Absmax scaling so the largest magnitude maps to 448; an all-zero
    /// tensor uses scale 1.
    pub fn quantize<R: Real>(x: &Tensor<R>) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "quantize" });
        }
        let amax = x.max_abs().f64();
        let scale = if amax == 0.0 { 1.0 } else { amax / MAX_FINITE };
        let codes = x.data().iter().map(|v| encode(v.f64() / scale)).collect();
        Ok(QuantTensor {
            codes,
            scale,
            shape: x.shape().to_vec(),
        })
    }

    pub fn dequantize<R: Real>(&self) -> Tensor<R> {
        Tensor::from_parts(
            self.shape.clone(),
            self.codes.iter().map(|&c| R::of(decode(c) * self.scale)).collect(),
        )
    }
}

/// `dequantize(quantize(x))`.
pub fn round_trip<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    Ok(QuantTensor::quantize(x)?.dequantize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_extremes() {
        assert_eq!(encode(0.0), 0x00);
        assert_eq!(decode(0x00), 0.0);
        assert_eq!(decode(0x7E), 448.0);
        assert_eq!(encode(448.0), 0x7E);
        assert_eq!(encode(449.0), 0x7E);
        assert_eq!(encode(1e9), 0x7E);
        assert_eq!(encode(-1e9), 0xFE);
        assert_eq!(decode(0x01), MIN_SUBNORMAL);
        assert!(decode(0x7F).is_nan());
        assert_eq!(encode(f64::NAN), NAN_CODE);
    }

    #[test]
    fn ties_round_to_even() {
        // 1.0 = 0.0111.000, next is 1.125; halfway 1.0625 goes to the even mantissa
        assert_eq!(decode(encode(1.0625)), 1.0);
        // 1.1875 is halfway between 1.125 (odd) and 1.25 (even)
        assert_eq!(decode(encode(1.1875)), 1.25);
        // subnormal halfway between 1/512 and 2/512
        assert_eq!(decode(encode(1.5 / 512.0)), 2.0 / 512.0);
        // below half the smallest subnormal flushes to zero
        assert_eq!(decode(encode(0.49 / 512.0)), 0.0);
    }

    #[test]
    fn every_code_round_trips() {
        for (code, v) in codebook() {
            assert_eq!(encode(v), code, "code {code:#04x} value {v}");
        }
    }

    #[test]
    fn zero_tensor_uses_unit_scale() {
        let q = QuantTensor::quantize(&Tensor::<f64>::zeros([3])).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.codes.iter().all(|&c| c == 0));
    }
}
