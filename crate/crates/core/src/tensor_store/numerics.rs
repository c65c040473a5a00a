//! Scalar FP8 (E4M3FN) and BF16 codecs plus the accumulation demonstrator.
//!
//! E4M3FN: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are
//! no infinities; only `S.1111.111` is NaN, so the largest finite magnitude
//! is `1.75 * 2^8 = 448`. All rounding is round-to-nearest, ties-to-even.

use crate::error::{Error, Result};

pub const FP8_MAX: f32 = 448.0;
pub const FP8_MAX_BITS: u8 = 0x7E;
pub const FP8_NAN_BITS: u8 = 0x7F;
pub const BF16_NAN_BITS: u16 = 0x7FC0;

const FP8_MIN_NORMAL: f32 = 1.0 / 64.0;
/// Spacing of FP8 subnormals, 2^-9.
const FP8_SUBNORMAL_STEP: f32 = 1.0 / 512.0;

pub fn is_fp8_nan(b: u8) -> bool {
    b & 0x7F == 0x7F
}

pub fn decode_fp8(b: u8) -> f32 {
    if is_fp8_nan(b) {
        return f32::NAN;
    }
    let sign = if b & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = i32::from((b >> 3) & 0x0F);
    let man = f32::from(b & 0x07);
    let magnitude = if exp == 0 {
        man * FP8_SUBNORMAL_STEP
    } else {
        (1.0 + man / 8.0) * 2f32.powi(exp - 7)
    };
    sign * magnitude
}

pub fn encode_fp8(value: f32) -> Result<u8> {
    if !value.is_finite() {
        return Err(Error::InvalidValue(format!(
            "{value} cannot be encoded as fp8_e4m3"
        )));
    }
    let sign = if value.is_sign_negative() { 0x80 } else { 0x00 };
    let abs = value.abs();
    if abs > FP8_MAX {
        return Ok(sign | FP8_MAX_BITS);
    }
    if abs < FP8_MIN_NORMAL {
        // Scaling by a power of two is exact; a result of 8 lands on the
        // smallest normal, whose code is also 8.
        let steps = (abs / FP8_SUBNORMAL_STEP).round_ties_even();
        return Ok(sign | steps as u8);
    }
    let mut exp = ((abs.to_bits() >> 23) & 0xFF) as i32 - 127;
    let mut scaled = (abs / 2f32.powi(exp) * 8.0).round_ties_even();
    if scaled >= 16.0 {
        scaled = 8.0;
        exp += 1;
    }
    let field = exp + 7;
    debug_assert!((1..=15).contains(&field));
    let bits = ((field as u8) << 3) | (scaled as u8 - 8);
    // abs <= 448 never rounds past the largest finite code
    debug_assert!(!is_fp8_nan(bits));
    Ok(sign | bits)
}

/// A bfloat16 value stored as its raw bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Bf16(pub u16);

impl Bf16 {
    pub fn from_f32(value: f32) -> Self {
        Bf16(encode_bf16(value))
    }

    pub fn to_f32(self) -> f32 {
        decode_bf16(self.0)
    }

    pub fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 2]) -> Self {
        Bf16(u16::from_le_bytes(bytes))
    }
}

pub fn encode_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    if value.is_nan() {
        return ((bits >> 16) as u16 & 0x8000) | BF16_NAN_BITS;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

pub fn decode_bf16(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

/// Rounds an f32 to the nearest bf16-representable f32.
pub fn round_to_bf16(value: f32) -> f32 {
    decode_bf16(encode_bf16(value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulateMode {
    /// Partial sums are re-rounded to bf16 after every addition.
    Bf16,
    /// Partial sums stay in f32.
    Fp32,
}

pub fn accumulate(values: &[Bf16], mode: AccumulateMode) -> f32 {
    values.iter().fold(0.0f32, |acc, v| {
        let sum = acc + v.to_f32();
        match mode {
            AccumulateMode::Bf16 => round_to_bf16(sum),
            AccumulateMode::Fp32 => sum,
        }
    })
}
