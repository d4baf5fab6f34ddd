//! Convolution and linear kernels, in both domains.
//!
//! The fixed-point path lowers convolution im2col-style and applies each
//! weight as a rounded bit shift plus sign flip on the Q16.16 raw values,
//! accumulating in 64-bit before a single saturating narrow per output
//! element. The dense real path is the training-time control and the
//! backward workhorse. Batch samples are processed in parallel; all
//! cross-sample reductions happen in a fixed order.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fxp::{self, count::OpCounts, Fixed, FxTensor};
use crate::nn::graph::OpRule;
use crate::shiftparam::{self, SteVariant};

/// Static shape information for a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        (
            (h + 2 * self.pad - eff_h) / self.stride + 1,
            (w + 2 * self.pad - eff_w) / self.stride + 1,
        )
    }

    /// Patch length per group: `(in_c/groups) * kh * kw`.
    pub fn patch(&self) -> usize {
        self.in_c / self.groups * self.kh * self.kw
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c / self.groups, self.kh, self.kw]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        if shape.len() != 4 || shape[1] != self.in_c {
            return Err(Error::ShapeMismatch(format!(
                "conv input {:?}, expected (B, {}, H, W)",
                shape, self.in_c
            )));
        }
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        if shape[2] + 2 * self.pad < eff_h || shape[3] + 2 * self.pad < eff_w {
            return Err(Error::ShapeMismatch(format!(
                "conv input {:?} smaller than effective kernel {}x{}",
                shape, eff_h, eff_w
            )));
        }
        Ok((shape[0], shape[1], shape[2], shape[3]))
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Copy>(
    x: &[T],
    zero: T,
    c0: usize,
    icg: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let l_total = oh * ow;
    let mut k = 0;
    for c in c0..c0 + icg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = &mut col[k * l_total..(k + 1) * l_total];
                let mut l = 0;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize
                        - geom.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.pad as isize;
                        row[l] = if iy >= 0
                            && iy < h as isize
                            && ix >= 0
                            && ix < w as isize
                        {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            zero
                        };
                        l += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c0: usize,
    icg: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let l_total = oh * ow;
    let mut k = 0;
    for c in c0..c0 + icg {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = &col[k * l_total..(k + 1) * l_total];
                let mut l = 0;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize
                        - geom.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[l];
                        }
                        l += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn shift_conv_sample(
    x: &[Fixed],
    out: &mut [Fixed],
    pbar: &[i8],
    sbar: &[i8],
    bias_raw: Option<&[i32]>,
    geom: &ConvGeom,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> OpCounts {
    let l_total = oh * ow;
    let k_total = geom.patch();
    let icg = geom.in_c / geom.groups;
    let ocg = geom.out_c / geom.groups;
    let mut col = vec![Fixed::ZERO; k_total * l_total];
    let mut acc = vec![0i64; l_total];
    let mut counts = OpCounts::default();
    for g_idx in 0..geom.groups {
        im2col(
            x,
            Fixed::ZERO,
            g_idx * icg,
            icg,
            h,
            w,
            geom,
            oh,
            ow,
            &mut col,
        );
        for oc_local in 0..ocg {
            let oc = g_idx * ocg + oc_local;
            let wrow_p = &pbar[oc * k_total..(oc + 1) * k_total];
            let wrow_s = &sbar[oc * k_total..(oc + 1) * k_total];
            acc.fill(0);
            for k in 0..k_total {
                let s = wrow_s[k];
                if s == 0 {
                    continue;
                }
                let p = wrow_p[k];
                let shift = (-p) as u32;
                let row = &col[k * l_total..(k + 1) * l_total];
                if s > 0 {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += fxp::shift_round(v.raw() as i64, shift);
                    }
                } else {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a -= fxp::shift_round(v.raw() as i64, shift);
                    }
                    counts.flips += l_total as u64;
                }
                counts.shifts += l_total as u64;
                counts.adds += l_total as u64;
            }
            let b = bias_raw.map_or(0i64, |b| b[oc] as i64);
            if bias_raw.is_some() {
                counts.adds += l_total as u64;
            }
            let out_row = &mut out[oc * l_total..(oc + 1) * l_total];
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = Fixed::from_wide_sat(*a + b);
            }
        }
    }
    counts
}

#[allow(clippy::too_many_arguments)]
fn dense_conv_sample(
    x: &[f64],
    out: &mut [f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    geom: &ConvGeom,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> OpCounts {
    let l_total = oh * ow;
    let k_total = geom.patch();
    let icg = geom.in_c / geom.groups;
    let ocg = geom.out_c / geom.groups;
    let mut col = vec![0.0f64; k_total * l_total];
    let mut counts = OpCounts::default();
    for g_idx in 0..geom.groups {
        im2col(x, 0.0, g_idx * icg, icg, h, w, geom, oh, ow, &mut col);
        for oc_local in 0..ocg {
            let oc = g_idx * ocg + oc_local;
            let wrow = &wt[oc * k_total..(oc + 1) * k_total];
            let out_row = &mut out[oc * l_total..(oc + 1) * l_total];
            out_row.fill(bias.map_or(0.0, |b| b[oc]));
            for k in 0..k_total {
                let wv = wrow[k];
                let row = &col[k * l_total..(k + 1) * l_total];
                for (o, v) in out_row.iter_mut().zip(row) {
                    *o += wv * v;
                }
                counts.weight_mults += l_total as u64;
                counts.adds += l_total as u64;
            }
        }
    }
    counts
}

/// Shift-domain convolution over a fixed-point batch. Weights are the
/// rounded `(p_bar, s_bar)` tensors flattened row-major as
/// `(out_c, in_c/groups, kh, kw)`; the optional bias is in raw Q16.16.
pub fn shift_conv2d_fixed(
    x: &FxTensor,
    pbar: &[i8],
    sbar: &[i8],
    bias_raw: Option<&[i32]>,
    geom: &ConvGeom,
) -> Result<FxTensor> {
    let (b, c, h, w) = geom.check_input(&x.shape)?;
    if pbar.len() != geom.out_c * geom.patch() || sbar.len() != pbar.len() {
        return Err(Error::ShapeMismatch(format!(
            "conv weights: got {} entries, want {}",
            pbar.len(),
            geom.out_c * geom.patch()
        )));
    }
    let (oh, ow) = geom.out_hw(h, w);
    let mut out = FxTensor::zeros(&[b, geom.out_c, oh, ow]);
    let in_len = c * h * w;
    let out_len = geom.out_c * oh * ow;
    let counts = out
        .data
        .par_chunks_mut(out_len)
        .zip(x.data.par_chunks(in_len))
        .map(|(os, xs)| shift_conv_sample(xs, os, pbar, sbar, bias_raw, geom, h, w, oh, ow))
        .reduce(OpCounts::default, |mut a, b| {
            a.merge(b);
            a
        });
    fxp::count::bump(counts);
    Ok(out)
}

/// Dense real convolution (training control path and gradient oracle
/// counterpart). Counts every weight multiplication it executes.
pub fn conv2d_dense(
    x: &ArrayD<f64>,
    wt: &ArrayD<f64>,
    bias: Option<&[f64]>,
    geom: &ConvGeom,
) -> Result<ArrayD<f64>> {
    let (b, c, h, w) = geom.check_input(x.shape())?;
    let (oh, ow) = geom.out_hw(h, w);
    let x_std = x.as_standard_layout();
    let x_sl = x_std.as_slice().unwrap();
    let w_std = wt.as_standard_layout();
    let w_sl = w_std.as_slice().unwrap();
    let mut out = vec![0.0f64; b * geom.out_c * oh * ow];
    let in_len = c * h * w;
    let out_len = geom.out_c * oh * ow;
    let counts = out
        .par_chunks_mut(out_len)
        .zip(x_sl.par_chunks(in_len))
        .map(|(os, xs)| dense_conv_sample(xs, os, w_sl, bias, geom, h, w, oh, ow))
        .reduce(OpCounts::default, |mut a, b| {
            a.merge(b);
            a
        });
    fxp::count::bump(counts);
    Ok(ArrayD::from_shape_vec(IxDyn(&[b, geom.out_c, oh, ow]), out).unwrap())
}

/// `(dX, dW, db)`; `dX` is absent when the caller did not ask for it.
pub type ConvGrads = (Option<ArrayD<f64>>, ArrayD<f64>, ArrayD<f64>);

/// Gradients of a dense convolution with effective weights `wt`.
pub fn conv2d_backward(
    x: &ArrayD<f64>,
    wt: &ArrayD<f64>,
    dy: &ArrayD<f64>,
    geom: &ConvGeom,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (b, c, h, w) = geom.check_input(x.shape())?;
    let (oh, ow) = geom.out_hw(h, w);
    if dy.shape() != [b, geom.out_c, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream {:?}, expected {:?}",
            dy.shape(),
            [b, geom.out_c, oh, ow]
        )));
    }
    let x_std = x.as_standard_layout();
    let x_sl = x_std.as_slice().unwrap();
    let w_std = wt.as_standard_layout();
    let w_sl = w_std.as_slice().unwrap();
    let dy_std = dy.as_standard_layout();
    let dy_sl = dy_std.as_slice().unwrap();

    let in_len = c * h * w;
    let out_len = geom.out_c * oh * ow;
    let k_total = geom.patch();
    let w_len = geom.out_c * k_total;
    let mut dx = vec![0.0f64; if need_dx { b * in_len } else { 0 }];

    let per_sample = |xs: &[f64], dys: &[f64], dxs: Option<&mut [f64]>| {
        let l_total = oh * ow;
        let icg = geom.in_c / geom.groups;
        let ocg = geom.out_c / geom.groups;
        let mut col = vec![0.0f64; k_total * l_total];
        let mut dcol = vec![0.0f64; k_total * l_total];
        let mut dw = vec![0.0f64; w_len];
        let mut db = vec![0.0f64; geom.out_c];
        let mut dxs = dxs;
        for g_idx in 0..geom.groups {
            im2col(xs, 0.0, g_idx * icg, icg, h, w, geom, oh, ow, &mut col);
            if need_dx {
                dcol.fill(0.0);
            }
            for oc_local in 0..ocg {
                let oc = g_idx * ocg + oc_local;
                let dyr = &dys[oc * l_total..(oc + 1) * l_total];
                db[oc] += dyr.iter().sum::<f64>();
                let wrow = &w_sl[oc * k_total..(oc + 1) * k_total];
                let dwrow = &mut dw[oc * k_total..(oc + 1) * k_total];
                for k in 0..k_total {
                    let crow = &col[k * l_total..(k + 1) * l_total];
                    let mut acc = 0.0;
                    for (cv, dv) in crow.iter().zip(dyr) {
                        acc += cv * dv;
                    }
                    dwrow[k] += acc;
                    if need_dx {
                        let wv = wrow[k];
                        let drow = &mut dcol[k * l_total..(k + 1) * l_total];
                        for (d, dv) in drow.iter_mut().zip(dyr) {
                            *d += wv * dv;
                        }
                    }
                }
            }
            if need_dx {
                col2im_add(
                    &dcol,
                    g_idx * icg,
                    icg,
                    h,
                    w,
                    geom,
                    oh,
                    ow,
                    dxs.as_deref_mut().unwrap(),
                );
            }
        }
        (dw, db)
    };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = if need_dx {
        dx.par_chunks_mut(in_len)
            .zip(x_sl.par_chunks(in_len))
            .zip(dy_sl.par_chunks(out_len))
            .map(|((dxs, xs), dys)| per_sample(xs, dys, Some(dxs)))
            .collect()
    } else {
        x_sl.par_chunks(in_len)
            .zip(dy_sl.par_chunks(out_len))
            .map(|(xs, dys)| per_sample(xs, dys, None))
            .collect()
    };

    let mut dw = vec![0.0f64; w_len];
    let mut db = vec![0.0f64; geom.out_c];
    for (dw_p, db_p) in partials {
        for (a, v) in dw.iter_mut().zip(&dw_p) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(&db_p) {
            *a += v;
        }
    }
    let dx = if need_dx {
        Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap())
    } else {
        None
    };
    Ok((
        dx,
        ArrayD::from_shape_vec(IxDyn(&geom.weight_shape()), dw).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[geom.out_c]), db).unwrap(),
    ))
}

// ---------------------------------------------------------------------------
// Linear kernels
// ---------------------------------------------------------------------------

/// Shift-domain fully connected layer: `x` is `(B, C)`, weights `(K, C)`.
pub fn shift_linear_fixed(
    x: &FxTensor,
    pbar: &[i8],
    sbar: &[i8],
    bias_raw: Option<&[i32]>,
    in_c: usize,
    out_c: usize,
) -> Result<FxTensor> {
    if x.shape.len() != 2 || x.shape[1] != in_c {
        return Err(Error::ShapeMismatch(format!(
            "linear input {:?}, expected (B, {in_c})",
            x.shape
        )));
    }
    if pbar.len() != in_c * out_c || sbar.len() != pbar.len() {
        return Err(Error::ShapeMismatch("linear weight size".into()));
    }
    let b = x.shape[0];
    let mut out = FxTensor::zeros(&[b, out_c]);
    let counts = out
        .data
        .par_chunks_mut(out_c)
        .zip(x.data.par_chunks(in_c))
        .map(|(orow, xrow)| {
            let mut counts = OpCounts::default();
            for k in 0..out_c {
                let wp = &pbar[k * in_c..(k + 1) * in_c];
                let ws = &sbar[k * in_c..(k + 1) * in_c];
                let mut acc = 0i64;
                for c in 0..in_c {
                    let s = ws[c];
                    if s == 0 {
                        continue;
                    }
                    let v = fxp::shift_round(xrow[c].raw() as i64, (-wp[c]) as u32);
                    acc += if s > 0 { v } else { -v };
                    counts.shifts += 1;
                    counts.adds += 1;
                    if s < 0 {
                        counts.flips += 1;
                    }
                }
                if let Some(bias) = bias_raw {
                    acc += bias[k] as i64;
                    counts.adds += 1;
                }
                orow[k] = Fixed::from_wide_sat(acc);
            }
            counts
        })
        .reduce(OpCounts::default, |mut a, b| {
            a.merge(b);
            a
        });
    fxp::count::bump(counts);
    Ok(out)
}

/// Dense real linear layer: `y = x W^T + b`.
pub fn linear_dense(
    x: &ArrayD<f64>,
    wt: &ArrayD<f64>,
    bias: Option<&[f64]>,
) -> Result<ArrayD<f64>> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let (k, cw) = (wt.shape()[0], wt.shape()[1]);
    if c != cw {
        return Err(Error::ShapeMismatch(format!(
            "linear: input C={c} vs weight C={cw}"
        )));
    }
    let mut out = ArrayD::zeros(IxDyn(&[b, k]));
    let mut counts = OpCounts::default();
    for bi in 0..b {
        for ki in 0..k {
            let mut acc = bias.map_or(0.0, |bv| bv[ki]);
            for ci in 0..c {
                acc += x[[bi, ci]] * wt[[ki, ci]];
            }
            out[[bi, ki]] = acc;
        }
    }
    counts.weight_mults += (b * k * c) as u64;
    counts.adds += (b * k * c) as u64;
    fxp::count::bump(counts);
    Ok(out)
}

pub fn linear_backward(
    x: &ArrayD<f64>,
    wt: &ArrayD<f64>,
    dy: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let k = wt.shape()[0];
    let mut dx = ArrayD::zeros(IxDyn(&[b, c]));
    let mut dw = ArrayD::zeros(IxDyn(&[k, c]));
    let mut db = ArrayD::zeros(IxDyn(&[k]));
    for bi in 0..b {
        for ki in 0..k {
            let g = dy[[bi, ki]];
            db[[ki]] += g;
            for ci in 0..c {
                dx[[bi, ci]] += g * wt[[ki, ci]];
                dw[[ki, ci]] += g * x[[bi, ci]];
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Graph rules
// ---------------------------------------------------------------------------

/// How a conv/linear node turns its effective-weight gradient into
/// parameter gradients.
#[derive(Debug, Clone, Copy)]
pub enum WeightMode {
    /// Quantized forward on the fixed view; straight-through backward.
    ShiftQuantized { ste: SteVariant },
    /// Continuous `w = s * 2^p`; exact chain rule. Used to validate the
    /// backward structure against finite differences.
    ShiftSurrogate,
    /// Plain real weight tensor.
    Real,
}

impl WeightMode {
    pub fn is_shift(&self) -> bool {
        !matches!(self, WeightMode::Real)
    }
}

/// Maps the master-copy activations onto the Q16.16 lattice (what the
/// fixed view actually fed the kernel).
pub fn round_q16(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| {
        let raw = (v * 65536.0)
            .round()
            .clamp(i32::MIN as f64, i32::MAX as f64);
        raw / 65536.0
    })
}

/// Continuous surrogate weight `s * 2^p`.
pub fn surrogate_weight(p: &ArrayD<f64>, s: &ArrayD<f64>) -> ArrayD<f64> {
    ndarray::Zip::from(p).and(s).map_collect(|&p, &s| s * p.exp2())
}

fn shift_weight_grads(
    mode: WeightMode,
    dw: &ArrayD<f64>,
    p: &ArrayD<f64>,
    s: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    match mode {
        WeightMode::ShiftQuantized { ste } => {
            let view = shiftparam::quantize_parts(p, s);
            ste.grads_from_dl_dw(dw, &view)
        }
        WeightMode::ShiftSurrogate => {
            let w = surrogate_weight(p, s);
            let dp = dw * &w * std::f64::consts::LN_2;
            let ds = ndarray::Zip::from(dw)
                .and(p)
                .map_collect(|&g, &p| g * p.exp2());
            (dp, ds)
        }
        WeightMode::Real => unreachable!("real mode has no shift params"),
    }
}

/// Backward rule for conv nodes. Input slots: shift modes take
/// `[x, p, s, (bias)]`, real mode takes `[x, w, (bias)]`.
pub struct ConvRule {
    pub geom: ConvGeom,
    pub mode: WeightMode,
    pub has_bias: bool,
    pub need_dx: bool,
}

impl OpRule for ConvRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        match self.mode {
            WeightMode::Real => {
                let (x, w) = (inputs[0], inputs[1]);
                let (dx, dw, db) =
                    conv2d_backward(x, w, grad_out, &self.geom, self.need_dx)
                        .expect("shapes checked at forward");
                let mut grads = vec![dx, Some(dw)];
                if self.has_bias {
                    grads.push(Some(db));
                }
                grads
            }
            WeightMode::ShiftQuantized { .. } | WeightMode::ShiftSurrogate => {
                let (x, p, s) = (inputs[0], inputs[1], inputs[2]);
                let w_eff = match self.mode {
                    WeightMode::ShiftQuantized { .. } => {
                        shiftparam::quantize_parts(p, s).w
                    }
                    _ => surrogate_weight(p, s),
                };
                let x_used = match self.mode {
                    WeightMode::ShiftQuantized { .. } => round_q16(x),
                    _ => x.clone(),
                };
                let (dx, dw, db) =
                    conv2d_backward(&x_used, &w_eff, grad_out, &self.geom, self.need_dx)
                        .expect("shapes checked at forward");
                let (dp, ds) = shift_weight_grads(self.mode, &dw, p, s);
                let mut grads = vec![dx, Some(dp), Some(ds)];
                if self.has_bias {
                    grads.push(Some(db));
                }
                grads
            }
        }
    }
}

/// Backward rule for linear nodes; same slot layout as [`ConvRule`].
pub struct LinearRule {
    pub mode: WeightMode,
    pub has_bias: bool,
}

impl OpRule for LinearRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        match self.mode {
            WeightMode::Real => {
                let (x, w) = (inputs[0], inputs[1]);
                let (dx, dw, db) = linear_backward(x, w, grad_out);
                let mut grads = vec![Some(dx), Some(dw)];
                if self.has_bias {
                    grads.push(Some(db));
                }
                grads
            }
            WeightMode::ShiftQuantized { .. } | WeightMode::ShiftSurrogate => {
                let (x, p, s) = (inputs[0], inputs[1], inputs[2]);
                let w_eff = match self.mode {
                    WeightMode::ShiftQuantized { .. } => {
                        shiftparam::quantize_parts(p, s).w
                    }
                    _ => surrogate_weight(p, s),
                };
                let x_used = match self.mode {
                    WeightMode::ShiftQuantized { .. } => round_q16(x),
                    _ => x.clone(),
                };
                let (dx, dw, db) = linear_backward(&x_used, &w_eff, grad_out);
                let (dp, ds) = shift_weight_grads(self.mode, &dw, p, s);
                let mut grads = vec![Some(dx), Some(dp), Some(ds)];
                if self.has_bias {
                    grads.push(Some(db));
                }
                grads
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn geom(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            pad,
            dilation: 1,
            groups: 1,
        }
    }

    #[test]
    fn scalar_conv_quarter_weight() {
        // 1x1x1x1 input 4.0, single weight p=-2, s=+1, no bias -> 1.0
        let x = FxTensor::from_real_array(
            &ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 4.0),
        )
        .unwrap();
        let g = geom(1, 1, 1, 1, 0);
        let y = shift_conv2d_fixed(&x, &[-2], &[1], None, &g).unwrap();
        assert_eq!(y.data[0].to_real(), 1.0);
        // zero sign yields bias only
        let y = shift_conv2d_fixed(&x, &[-2], &[0], Some(&[3 << 16]), &g).unwrap();
        assert_eq!(y.data[0].to_real(), 3.0);
    }

    #[test]
    fn three_by_three_ones_against_dense_oracle() {
        let x_real = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
        let x = FxTensor::from_real_array(&x_real).unwrap();
        let g = geom(1, 1, 3, 3, 0);
        let pbar = vec![0i8; 9];
        let sbar = vec![1i8; 9];
        let y = shift_conv2d_fixed(&x, &pbar, &sbar, None, &g).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data[0].to_real(), 9.0);

        // brute-force dense convolution with the effective weights
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
        let yd = conv2d_dense(&x_real, &w, None, &g).unwrap();
        assert_eq!(yd[[0, 0, 0, 0]], 9.0);
    }

    #[test]
    fn shift_matches_dense_within_fixed_tolerance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom {
            in_c: 3,
            out_c: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
            groups: 1,
        };
        let x_real = ArrayD::from_shape_fn(IxDyn(&[2, 3, 6, 6]), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let n_w = g.out_c * g.patch();
        let pbar: Vec<i8> = (0..n_w).map(|_| -(rng.random_range(0..8) as i8)).collect();
        let sbar: Vec<i8> = (0..n_w)
            .map(|_| [-1i8, 0, 1][rng.random_range(0..3)])
            .collect();
        let x_fx = FxTensor::from_real_array(&x_real).unwrap();
        let y_fx = shift_conv2d_fixed(&x_fx, &pbar, &sbar, None, &g).unwrap();

        let w_eff = ArrayD::from_shape_vec(
            IxDyn(&g.weight_shape()),
            pbar.iter()
                .zip(&sbar)
                .map(|(&p, &s)| s as f64 * (p as f64).exp2())
                .collect(),
        )
        .unwrap();
        let y_dense = conv2d_dense(&x_fx.to_real_array(), &w_eff, None, &g).unwrap();
        let y = y_fx.to_real_array();
        let max_err = (&y - &y_dense)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_err <= 2f64.powi(-12), "max_err = {max_err:e}");
    }

    #[test]
    fn conv_backward_scalar_examples() {
        // scalar case: x = 4.0, w = 0.25 (p=-2, s=+1), upstream 1
        let x = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 4.0);
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.25);
        let dy = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let g = geom(1, 1, 1, 1, 0);
        let (dx, dw, db) = conv2d_backward(&x, &w, &dy, &g, true).unwrap();
        assert_eq!(dx.unwrap()[[0, 0, 0, 0]], 0.25);
        assert_eq!(dw[[0, 0, 0, 0]], 4.0);
        assert_eq!(db[[0]], 1.0);

        // dL/dP per the straight-through rule: dw * w * 2^p * ln 2
        let p = arr1(&[-2.0]).into_dyn();
        let s = arr1(&[1.0]).into_dyn();
        let view = shiftparam::quantize_parts(&p, &s);
        let (dp, ds) = SteVariant::Standard
            .grads_from_dl_dw(&arr1(&[4.0]).into_dyn(), &view);
        let want = 4.0 * 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((dp[[0]] - want).abs() < 1e-15);
        assert_eq!(ds[[0]], 4.0);
    }

    #[test]
    fn dense_conv_counts_multiplications() {
        fxp::count::reset();
        let x = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 1.0);
        let w = ArrayD::from_elem(IxDyn(&[3, 2, 3, 3]), 0.5);
        let g = geom(2, 3, 3, 1, 1);
        conv2d_dense(&x, &w, None, &g).unwrap();
        let c = fxp::count::snapshot();
        assert_eq!(c.weight_mults, (3 * 2 * 9 * 16) as u64);
        fxp::count::reset();
    }

    #[test]
    fn shift_conv_counts_no_multiplications() {
        fxp::count::reset();
        let x = FxTensor::from_real_array(&ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 1.0))
            .unwrap();
        let g = geom(2, 3, 3, 1, 1);
        let n = 3 * 2 * 9;
        shift_conv2d_fixed(&x, &vec![-1i8; n], &vec![1i8; n], None, &g).unwrap();
        let c = fxp::count::snapshot();
        assert_eq!(c.weight_mults, 0);
        assert!(c.shifts > 0 && c.adds > 0);
        fxp::count::reset();
    }

    #[test]
    fn linear_shift_matches_dense() {
        let x_real = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75],
        )
        .unwrap();
        let x = FxTensor::from_real_array(&x_real).unwrap();
        let pbar = vec![0i8, -1, -2, 0, 0, -3];
        let sbar = vec![1i8, -1, 1, 0, 1, -1];
        let y = shift_linear_fixed(&x, &pbar, &sbar, None, 3, 2).unwrap();
        let w_eff = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            pbar.iter()
                .zip(&sbar)
                .map(|(&p, &s)| s as f64 * (p as f64).exp2())
                .collect(),
        )
        .unwrap();
        let y_dense = linear_dense(&x_real, &w_eff, None).unwrap();
        for (a, b) in y.to_real_array().iter().zip(y_dense.iter()) {
            assert!((a - b).abs() <= 2f64.powi(-13));
        }
    }
}
