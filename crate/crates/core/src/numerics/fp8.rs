//! Per-token 8-bit float quantization (4 exponent bits, 3 mantissa bits, bias 7).
//!
//! The encoding has no infinities; `S.1111.111` is NaN and the largest finite
//! magnitude is 448. Each token vector carries one `f32` scale equal to
//! `max_abs / 448`.

use std::sync::OnceLock;

pub const FP8_MAX: f64 = 448.0;
/// Smallest positive normal magnitude, `2^-6`.
pub const FP8_MIN_NORMAL: f64 = 0.015625;
const NAN_CODE: u8 = 0x7f;

/// Decodes one code to its real value (NaN for the two NaN codes).
pub fn decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let mag = code & 0x7f;
    if mag == NAN_CODE {
        return f64::NAN;
    }
    let exp = (mag >> 3) as i32;
    let man = (mag & 0x07) as f64;
    let value = if exp == 0 { man / 8.0 * 2f64.powi(-6) } else { (1.0 + man / 8.0) * 2f64.powi(exp - 7) };
    sign * value
}

/// Non-negative finite magnitudes indexed by code, ascending.
fn magnitudes() -> &'static [f64; 127] {
    static TABLE: OnceLock<[f64; 127]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 127];
        for (c, slot) in t.iter_mut().enumerate() {
            *slot = decode(c as u8);
        }
        t
    })
}

/// Rounds to the nearest representable value, ties to even code, saturating at ±448.
pub fn encode(value: f64) -> u8 {
    let sign = if value.is_sign_negative() && value != 0.0 { 0x80 } else { 0 };
    let mag = value.abs().min(FP8_MAX);
    let table = magnitudes();
    let hi = table.partition_point(|&t| t < mag);
    let code = if hi == 0 {
        0
    } else if hi == table.len() {
        table.len() - 1
    } else {
        let (lo_v, hi_v) = (table[hi - 1], table[hi]);
        let (dl, dh) = (mag - lo_v, hi_v - mag);
        if dl < dh || (dl == dh && (hi - 1) % 2 == 0) {
            hi - 1
        } else {
            hi
        }
    };
    sign | code as u8
}

/// Quantizes a token vector with absolute-max scaling. An all-zero token gets scale 1.
pub fn quantize_fp8_token(values: &[f64]) -> (Vec<u8>, f32) {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (vec![0; values.len()], 1.0);
    }
    let scale = (max_abs / FP8_MAX) as f32;
    let s = scale as f64;
    (values.iter().map(|v| encode(v / s)).collect(), scale)
}

pub fn dequantize_fp8_token(codes: &[u8], scale: f32) -> Vec<f64> {
    codes.iter().map(|&c| decode(c) * scale as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn code_table_landmarks() {
        assert_eq!(decode(0x7e), 448.0);
        assert_eq!(decode(0x08), FP8_MIN_NORMAL);
        assert_eq!(decode(0x01), 2f64.powi(-9));
        assert!(decode(0x7f).is_nan() && decode(0xff).is_nan());
        assert_eq!(decode(0x80), 0.0);
        for c in 0..=0x7eu8 {
            assert_eq!(encode(decode(c)), c, "code {c:#x} must round-trip");
            if c > 0 {
                assert_eq!(encode(-decode(c)), c | 0x80);
            }
        }
    }

    #[test]
    fn exhaustive_half_ulp_bound_over_normal_codes() {
        // Worst case for round-to-nearest is the midpoint between neighbours.
        let mut worst: f64 = 0.0;
        for c in 0x08u8..0x7e {
            let (a, b) = (decode(c), decode(c + 1));
            let mid = 0.5 * (a + b);
            let q = decode(encode(mid));
            worst = worst.max((q - mid).abs() / mid);
            for t in [0.25, 0.49, 0.51, 0.75] {
                let v = a + t * (b - a);
                let q = decode(encode(v));
                assert!((q - v).abs() / v <= 0.0625, "code {c:#x} t={t}");
            }
        }
        assert!(worst <= 0.0625, "worst relative error {worst}");
        assert!(worst > 0.05);
    }

    #[test]
    fn zero_and_sign_symmetry() {
        let (codes, scale) = quantize_fp8_token(&[0.0; 5]);
        assert_eq!(scale, 1.0);
        assert_eq!(dequantize_fp8_token(&codes, scale), vec![0.0; 5]);

        let v = [0.3, -2.5, 7.0, 1e-3];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let (a, sa) = quantize_fp8_token(&v);
        let (b, sb) = quantize_fp8_token(&neg);
        assert_eq!(sa, sb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x ^ 0x80, *y);
        }
    }

    #[test]
    fn random_tokens_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mag = 10f64.powf(rng.random_range(-3.0..3.0));
            let v: Vec<f64> = (0..64).map(|_| rng.random_range(-mag..mag)).collect();
            let (codes, scale) = quantize_fp8_token(&v);
            let back = dequantize_fp8_token(&codes, scale);
            for (x, y) in v.iter().zip(&back) {
                if x.abs() / scale as f64 >= FP8_MIN_NORMAL {
                    assert!((x - y).abs() / x.abs() <= 0.0625, "{x} -> {y}");
                }
            }
        }
    }
}
