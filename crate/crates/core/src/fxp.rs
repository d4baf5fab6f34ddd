//! Saturating Q16.16 fixed-point arithmetic.
//!
//! All activations and biases live in this format at layer boundaries:
//! a signed 32-bit raw value interpreted as `value * 2^16` (16 integer
//! bits, 16 fraction bits). Weight application is a bit shift plus a
//! ternary sign flip — never a multiplication. Overflow saturates, and
//! right shifts round to nearest with ties away from zero before the
//! fraction bits are discarded.

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Number of fraction bits.
pub const FRAC_BITS: u32 = 16;
/// Raw representation of 1.0.
pub const ONE_RAW: i32 = 1 << FRAC_BITS;
/// Smallest admissible shift exponent (weight magnitudes span [2^-15, 1]).
pub const SHIFT_MIN: i32 = -15;
/// Largest admissible shift exponent.
pub const SHIFT_MAX: i32 = 0;

/// A Q16.16 fixed-point value.
///
/// Representable range is `[-2^15, 2^15 - 2^-16]`; conversions and
/// arithmetic saturate at the ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct Fixed(i32);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    pub const ONE: Fixed = Fixed(ONE_RAW);
    pub const MAX: Fixed = Fixed(i32::MAX);
    pub const MIN: Fixed = Fixed(i32::MIN);

    #[inline(always)]
    pub const fn from_raw(raw: i32) -> Fixed {
        Fixed(raw)
    }

    #[inline(always)]
    pub const fn raw(self) -> i32 {
        self.0
    }

    /// Nearest representable value, ties away from zero, saturating at the
    /// range ends. Non-finite inputs are rejected.
    pub fn from_real(x: f64) -> Result<Fixed> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        let scaled = (x * ONE_RAW as f64).round();
        Ok(Fixed(sat_narrow(scaled as i64)))
    }

    #[inline(always)]
    pub fn to_real(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    #[inline(always)]
    pub fn saturating_add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0.saturating_add(rhs.0))
    }

    #[inline(always)]
    pub fn saturating_neg(self) -> Fixed {
        Fixed(self.0.saturating_neg())
    }

    /// Narrows a 64-bit accumulator value to Q16.16 with saturation.
    #[inline(always)]
    pub fn from_wide_sat(v: i64) -> Fixed {
        Fixed(sat_narrow(v))
    }

    /// Ternary sign flip: `-x`, `0`, or `x`.
    ///
    /// Negating the most negative raw value saturates to `MAX`.
    #[inline(always)]
    pub fn flip(self, s: Ternary) -> Fixed {
        match s {
            Ternary::Minus => self.saturating_neg(),
            Ternary::Zero => Fixed::ZERO,
            Ternary::Plus => self,
        }
    }

    /// Shift-based multiply: `flip(x >> |p|, s)` with rounding, the
    /// fixed-point image of multiplying by the weight `s * 2^p`.
    ///
    /// `p` must lie in `[SHIFT_MIN, SHIFT_MAX]`.
    pub fn shift_mul(self, p: i32, s: Ternary) -> Result<Fixed> {
        if !(SHIFT_MIN..=SHIFT_MAX).contains(&p) {
            return Err(Error::ShiftExponent(p));
        }
        Ok(Fixed(shift_mul_raw(self.0, p as i8, s.as_i8())))
    }
}

impl std::fmt::Display for Fixed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_real())
    }
}

/// Right shift by `k` bits, round to nearest, ties away from zero.
#[inline(always)]
pub fn shift_round(v: i64, k: u32) -> i64 {
    if k == 0 {
        return v;
    }
    let half = 1i64 << (k - 1);
    if v >= 0 {
        (v + half) >> k
    } else {
        -((-v + half) >> k)
    }
}

/// Integer division rounding to nearest, ties away from zero. `d > 0`.
#[inline(always)]
pub fn div_round(v: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    if v >= 0 {
        (v + d / 2) / d
    } else {
        -((-v + d / 2) / d)
    }
}

#[inline(always)]
fn sat_narrow(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Raw-value shift multiply used by the kernels. `p` in `[-15, 0]`,
/// `s` in `{-1, 0, +1}` (checked by the callers' construction).
#[inline(always)]
pub fn shift_mul_raw(raw: i32, p: i8, s: i8) -> i32 {
    if s == 0 {
        return 0;
    }
    let shifted = shift_round(raw as i64, (-p) as u32);
    let signed = if s < 0 { -shifted } else { shifted };
    sat_narrow(signed)
}

/// Ternary sign operator value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ternary {
    Minus,
    Zero,
    Plus,
}

impl Ternary {
    #[inline(always)]
    pub fn as_i8(self) -> i8 {
        match self {
            Ternary::Minus => -1,
            Ternary::Zero => 0,
            Ternary::Plus => 1,
        }
    }

    #[inline(always)]
    pub fn as_f64(self) -> f64 {
        self.as_i8() as f64
    }

    pub fn from_i8(v: i8) -> Option<Ternary> {
        match v {
            -1 => Some(Ternary::Minus),
            0 => Some(Ternary::Zero),
            1 => Some(Ternary::Plus),
            _ => None,
        }
    }
}

/// 64-bit wide accumulator for dot products; narrowing to Q16.16 happens
/// once at the end so individual terms never saturate.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedAcc(i64);

impl FixedAcc {
    #[inline(always)]
    pub fn new() -> FixedAcc {
        FixedAcc(0)
    }

    #[inline(always)]
    pub fn add(&mut self, v: Fixed) {
        self.0 += v.raw() as i64;
    }

    #[inline(always)]
    pub fn add_raw(&mut self, raw: i32) {
        self.0 += raw as i64;
    }

    #[inline(always)]
    pub fn finish(self) -> Fixed {
        Fixed(sat_narrow(self.0))
    }
}

/// Dense tensor of fixed-point values, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxTensor {
    pub shape: Vec<usize>,
    pub data: Vec<Fixed>,
}

impl FxTensor {
    pub fn zeros(shape: &[usize]) -> FxTensor {
        FxTensor {
            shape: shape.to_vec(),
            data: vec![Fixed::ZERO; shape.iter().product()],
        }
    }

    pub fn from_real_array(a: &ArrayD<f64>) -> Result<FxTensor> {
        let mut data = Vec::with_capacity(a.len());
        for &v in a.iter() {
            data.push(Fixed::from_real(v)?);
        }
        Ok(FxTensor {
            shape: a.shape().to_vec(),
            data,
        })
    }

    pub fn to_real_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_real()).collect(),
        )
        .expect("shape/data length agree")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Instrumentation counters for the arithmetic actually executed by the
/// kernels. `weight_mults` counts real-valued weight multiplications and
/// stays at zero on the shift path; `shifts`/`flips`/`adds` count the
/// shift-domain weight applications. Kernels accumulate locally and bump
/// the globals once per call.
pub mod count {
    use std::sync::atomic::{AtomicU64, Ordering};

    static SHIFTS: AtomicU64 = AtomicU64::new(0);
    static FLIPS: AtomicU64 = AtomicU64::new(0);
    static ADDS: AtomicU64 = AtomicU64::new(0);
    static WEIGHT_MULTS: AtomicU64 = AtomicU64::new(0);

    #[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
    pub struct OpCounts {
        pub shifts: u64,
        pub flips: u64,
        pub adds: u64,
        pub weight_mults: u64,
    }

    impl OpCounts {
        pub fn merge(&mut self, other: OpCounts) {
            self.shifts += other.shifts;
            self.flips += other.flips;
            self.adds += other.adds;
            self.weight_mults += other.weight_mults;
        }
    }

    pub fn reset() {
        SHIFTS.store(0, Ordering::Relaxed);
        FLIPS.store(0, Ordering::Relaxed);
        ADDS.store(0, Ordering::Relaxed);
        WEIGHT_MULTS.store(0, Ordering::Relaxed);
    }

    pub fn snapshot() -> OpCounts {
        OpCounts {
            shifts: SHIFTS.load(Ordering::Relaxed),
            flips: FLIPS.load(Ordering::Relaxed),
            adds: ADDS.load(Ordering::Relaxed),
            weight_mults: WEIGHT_MULTS.load(Ordering::Relaxed),
        }
    }

    pub fn bump(c: OpCounts) {
        SHIFTS.fetch_add(c.shifts, Ordering::Relaxed);
        FLIPS.fetch_add(c.flips, Ordering::Relaxed);
        ADDS.fetch_add(c.adds, Ordering::Relaxed);
        WEIGHT_MULTS.fetch_add(c.weight_mults, Ordering::Relaxed);
    }
}
