//! Shift/sign weight parameterization.
//!
//! A weight tensor is carried as two continuous trainable tensors: shift
//! exponents `P` and sign logits `S`. The effective weight is taken from
//! the rounded views, `w = flip(2^round(P), ternary_sign(S))`, so every
//! weight is zero or `±2^p` with `p` in `[-15, 0]`. The straight-through
//! gradient rules for `P` and `S` live here too, together with the packed
//! 5-bit storage encoding.

use std::f64::consts::LN_2;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::fxp::{SHIFT_MAX, SHIFT_MIN};

/// Smallest shift exponent the packed 5-bit format can store. Magnitude
/// index 15 is reserved for the zero weight, so stored exponents span
/// `[-14, 0]`; an in-memory `-15` clamps to `-14` on pack.
pub const STORE_SHIFT_MIN: i8 = -14;

/// One fixed-point ulp; used to detect zero weights at initialization.
pub const ZERO_EPS: f64 = 1.0 / 65536.0;

/// Round half away from zero.
#[inline(always)]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Ternary sign: `-1` for `s <= -0.5`, `0` on the open interval
/// `(-0.5, 0.5)`, `+1` for `s >= 0.5`.
#[inline(always)]
pub fn ternary_sign(s: f64) -> i8 {
    if s <= -0.5 {
        -1
    } else if s >= 0.5 {
        1
    } else {
        0
    }
}

/// Continuous trainable shift/sign pair. `p` and `s` always share a shape.
#[derive(Debug, Clone)]
pub struct ShiftParam {
    pub p: ArrayD<f64>,
    pub s: ArrayD<f64>,
}

impl ShiftParam {
    pub fn new(p: ArrayD<f64>, s: ArrayD<f64>) -> Result<ShiftParam> {
        if p.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "shift tensor {:?} vs sign tensor {:?}",
                p.shape(),
                s.shape()
            )));
        }
        Ok(ShiftParam { p, s })
    }

    /// Projects the parameters back into their admissible boxes; called
    /// after every optimizer step.
    pub fn clamp_in_place(&mut self) {
        self.p
            .mapv_inplace(|v| v.clamp(SHIFT_MIN as f64, SHIFT_MAX as f64));
        self.s.mapv_inplace(|v| v.clamp(-1.5, 1.5));
    }

    pub fn quantize(&self) -> QuantizedView {
        quantize_parts(&self.p, &self.s)
    }
}

/// [`ShiftParam::quantize`] over borrowed tensors.
pub fn quantize_parts(p: &ArrayD<f64>, s: &ArrayD<f64>) -> QuantizedView {
    let p_bar =
        p.mapv(|v| round_half_away(v).clamp(SHIFT_MIN as f64, SHIFT_MAX as f64) as i8);
    let s_bar = s.mapv(ternary_sign);
    let w = ndarray::Zip::from(&p_bar)
        .and(&s_bar)
        .map_collect(|&p, &s| s as f64 * (p as f64).exp2());
    QuantizedView { p_bar, s_bar, w }
}

/// Rounded view of a [`ShiftParam`]: integer shifts, ternary signs, and
/// the effective weights `w = flip(2^p_bar, s_bar)`.
#[derive(Debug, Clone)]
pub struct QuantizedView {
    pub p_bar: ArrayD<i8>,
    pub s_bar: ArrayD<i8>,
    pub w: ArrayD<f64>,
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Straight-through gradient for the shift tensor:
/// `upstream * dY_dw * w * 2^p_bar * ln 2`, elementwise.
pub fn grad_p(
    upstream: &ArrayD<f64>,
    dy_dw: &ArrayD<f64>,
    view: &QuantizedView,
) -> Result<ArrayD<f64>> {
    check_same_shape(upstream.shape(), dy_dw.shape(), "grad_p upstream/dY_dw")?;
    check_same_shape(upstream.shape(), view.w.shape(), "grad_p upstream/view")?;
    let mut out = upstream * dy_dw;
    ndarray::Zip::from(&mut out)
        .and(&view.w)
        .and(&view.p_bar)
        .for_each(|g, &w, &p| *g *= w * (p as f64).exp2() * LN_2);
    Ok(out)
}

/// Straight-through gradient for the sign tensor: `upstream * dY_dw`.
pub fn grad_s(upstream: &ArrayD<f64>, dy_dw: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    check_same_shape(upstream.shape(), dy_dw.shape(), "grad_s upstream/dY_dw")?;
    Ok(upstream * dy_dw)
}

/// Which backward rule converts a loss gradient w.r.t. the effective
/// weight into gradients for `(P, S)`.
///
/// `Standard` is the straight-through rule used by training; `Analytic`
/// differentiates `w = s * 2^p` exactly and exists for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteVariant {
    #[default]
    Standard,
    Analytic,
}

impl SteVariant {
    /// Maps an aggregated `dL/dw` (same shape as the parameter) to
    /// `(dL/dP, dL/dS)`.
    pub fn grads_from_dl_dw(
        self,
        dl_dw: &ArrayD<f64>,
        view: &QuantizedView,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        match self {
            SteVariant::Standard => {
                let mut dp = dl_dw.clone();
                ndarray::Zip::from(&mut dp)
                    .and(&view.w)
                    .and(&view.p_bar)
                    .for_each(|g, &w, &p| *g *= w * (p as f64).exp2() * LN_2);
                (dp, dl_dw.clone())
            }
            SteVariant::Analytic => {
                let dp = dl_dw * &view.w * LN_2;
                let mut ds = dl_dw.clone();
                ndarray::Zip::from(&mut ds)
                    .and(&view.p_bar)
                    .for_each(|g, &p| *g *= (p as f64).exp2());
                (dp, ds)
            }
        }
    }
}

/// Builds a shift/sign pair from a real-valued weight tensor:
/// `P = clamp(log2(|w|), -15, 0)` with the magnitude floored at `2^-15`,
/// and sign logits `±1`/`0` (zero when `|w| <= 2^-16`).
pub fn init_from_real(w_real: &ArrayD<f64>) -> ShiftParam {
    let p = w_real.mapv(|w| {
        let mag = w.abs().max((SHIFT_MIN as f64).exp2());
        mag.log2().clamp(SHIFT_MIN as f64, SHIFT_MAX as f64)
    });
    let s = w_real.mapv(|w| {
        if w > ZERO_EPS {
            1.0
        } else if w < -ZERO_EPS {
            -1.0
        } else {
            0.0
        }
    });
    ShiftParam { p, s }
}

/// A storable shift weight: `w = s_bar * 2^p_bar`, or exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestShift {
    pub p_bar: i8,
    pub s_bar: i8,
    pub w: f64,
}

/// Nearest storable shift weight by absolute distance, searched over the
/// 31 values the packed format can represent: zero plus `±2^p` for `p`
/// in `[-14, 0]`. Ties keep the earlier candidate in that fixed order.
pub fn nearest_shift_weight(w: f64) -> NearestShift {
    let mut best = NearestShift {
        p_bar: STORE_SHIFT_MIN,
        s_bar: 0,
        w: 0.0,
    };
    let mut best_err = w.abs();
    for &s in &[1i8, -1i8] {
        for m in 0..=(-STORE_SHIFT_MIN) {
            let p = -m;
            let cand = s as f64 * (p as f64).exp2();
            let err = (w - cand).abs();
            if err < best_err {
                best_err = err;
                best = NearestShift {
                    p_bar: p,
                    s_bar: s,
                    w: cand,
                };
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Packed 5-bit storage
//
// Per weight: bits 0..=3 hold the magnitude index m (p_bar = -m, m in
// 0..=14), bit 4 is the sign (1 = negative). Code m = 15 with sign bit 0
// marks the zero weight; p_bar = -15 clamps to -14 on pack. The stream is
// little-endian bit-packed and preceded by a shape header of u32 words.
// ---------------------------------------------------------------------------

const ZERO_CODE: u8 = 0x0F;

fn encode5(p_bar: i8, s_bar: i8) -> u8 {
    if s_bar == 0 {
        return ZERO_CODE;
    }
    let m = (-p_bar.clamp(STORE_SHIFT_MIN, 0)) as u8;
    let sign_bit = if s_bar < 0 { 0x10 } else { 0x00 };
    m | sign_bit
}

fn decode5(code: u8) -> Result<(i8, i8)> {
    let m = code & 0x0F;
    let neg = code & 0x10 != 0;
    if m == 15 {
        if neg {
            return Err(Error::BadPackedStream(format!(
                "invalid 5-bit code {code:#04x}"
            )));
        }
        return Ok((STORE_SHIFT_MIN, 0));
    }
    Ok((-(m as i8), if neg { -1 } else { 1 }))
}

/// Packs rounded shift/sign tensors into the 5-bit stream with its shape
/// header.
pub fn pack_shift5(p_bar: &[i8], s_bar: &[i8], shape: &[usize]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if p_bar.len() != n || s_bar.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "pack: shape {:?} wants {} weights, got {}/{}",
            shape,
            n,
            p_bar.len(),
            s_bar.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * shape.len() + (5 * n).div_ceil(8));
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let payload_start = out.len();
    out.resize(payload_start + (5 * n).div_ceil(8), 0u8);
    for i in 0..n {
        let code = encode5(p_bar[i], s_bar[i]);
        for b in 0..5u32 {
            if code >> b & 1 != 0 {
                let bit = 5 * i + b as usize;
                out[payload_start + bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_shift5`]. Zero weights decode as
/// `(p_bar = -14, s_bar = 0)`.
pub fn unpack_shift5(bytes: &[u8]) -> Result<(Vec<usize>, Vec<i8>, Vec<i8>)> {
    let corrupt = |msg: String| Error::BadPackedStream(msg);
    if bytes.len() < 4 {
        return Err(corrupt("truncated shape header".into()));
    }
    let ndim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if ndim > 8 {
        return Err(corrupt(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut off = 4;
    for _ in 0..ndim {
        if bytes.len() < off + 4 {
            return Err(corrupt(format!("truncated shape header at byte {off}")));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let n: usize = shape.iter().product();
    let want = (5 * n).div_ceil(8);
    if bytes.len() != off + want {
        return Err(corrupt(format!(
            "payload length {} does not match shape {:?} (want {})",
            bytes.len() - off,
            shape,
            want
        )));
    }
    let payload = &bytes[off..];
    let mut p_bar = Vec::with_capacity(n);
    let mut s_bar = Vec::with_capacity(n);
    for i in 0..n {
        let mut code = 0u8;
        for b in 0..5u32 {
            let bit = 5 * i + b as usize;
            if payload[bit / 8] >> (bit % 8) & 1 != 0 {
                code |= 1 << b;
            }
        }
        let (p, s) = decode5(code).map_err(|_| {
            corrupt(format!("invalid 5-bit code {code:#04x} at weight {i}"))
        })?;
        p_bar.push(p);
        s_bar.push(s);
    }
    Ok((shape, p_bar, s_bar))
}
