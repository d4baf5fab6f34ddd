//! Layers over the autograd graph, each with a fixed-point inference
//! twin (`eval_fixed`) used by the checkpoint evaluation path.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fxp::{self, Fixed, FxTensor};
use crate::nn::conv::{
    self, conv2d_dense, linear_dense, shift_conv2d_fixed, shift_linear_fixed, ConvGeom,
    ConvRule, LinearRule, WeightMode,
};
use crate::nn::graph::{Graph, NodeId, OpRule};
use crate::nn::param::{IdGen, Param, ParamKind, ShiftPair};
use crate::nn::state::{self, StateEntry, StateMap, TensorPayload};
use crate::shiftparam;

/// Uniform access to trainable parameters and named checkpoint state.
pub trait Stateful {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
    fn visit_shift_pairs(&self, _f: &mut dyn FnMut(&ShiftPair)) {}
    fn visit_shift_pairs_mut(&mut self, _f: &mut dyn FnMut(&mut ShiftPair)) {}
    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>);
    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()>;
}

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Weight storage of a conv/linear layer: a shift/sign pair in the shift
/// domain, or a dense real tensor for the control network.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ConvWeights {
    Shift(ShiftPair),
    Real(Param),
}

impl ConvWeights {
    fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        shape: &[usize],
        fan_in: usize,
    ) -> ConvWeights {
        let init = he_normal(rng, shape, fan_in);
        match mode {
            WeightMode::Real => {
                ConvWeights::Real(Param::new(ids, init, ParamKind::Plain { decay: true }))
            }
            _ => ConvWeights::Shift(ShiftPair::new(ids, shiftparam::init_from_real(&init))),
        }
    }

    pub fn shift_pair(&self) -> Option<&ShiftPair> {
        match self {
            ConvWeights::Shift(p) => Some(p),
            ConvWeights::Real(_) => None,
        }
    }
}

fn bias_raw(bias: &Param) -> Result<Vec<i32>> {
    bias.data
        .iter()
        .map(|&v| Fixed::from_real(v).map(|f| f.raw()))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution layer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ShiftConv2d {
    pub geom: ConvGeom,
    pub mode: WeightMode,
    pub weights: ConvWeights,
    pub bias: Option<Param>,
    pub need_dx: bool,
}

impl ShiftConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        geom: ConvGeom,
        with_bias: bool,
        need_dx: bool,
    ) -> ShiftConv2d {
        let shape = geom.weight_shape();
        let fan_in = geom.patch();
        let weights = ConvWeights::new(ids, rng, mode, &shape, fan_in);
        let bias = with_bias.then(|| {
            Param::new(
                ids,
                ArrayD::zeros(IxDyn(&[geom.out_c])),
                ParamKind::Plain { decay: false },
            )
        });
        ShiftConv2d {
            geom,
            mode,
            weights,
            bias,
            need_dx,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let value = {
            let xv = g.value(x);
            self.geom.check_input(xv.shape())?;
            match (&self.weights, self.mode) {
                (ConvWeights::Shift(pair), WeightMode::ShiftQuantized { .. }) => {
                    let view = pair.quantize();
                    let fx = FxTensor::from_real_array(xv)?;
                    let braw = self.bias.as_ref().map(bias_raw).transpose()?;
                    let y = shift_conv2d_fixed(
                        &fx,
                        view.p_bar.as_slice().unwrap(),
                        view.s_bar.as_slice().unwrap(),
                        braw.as_deref(),
                        &self.geom,
                    )?;
                    y.to_real_array()
                }
                (ConvWeights::Shift(pair), WeightMode::ShiftSurrogate) => {
                    let w = conv::surrogate_weight(&pair.p.data, &pair.s.data);
                    conv2d_dense(
                        xv,
                        &w,
                        self.bias.as_ref().map(|b| b.data.as_slice().unwrap()),
                        &self.geom,
                    )?
                }
                (ConvWeights::Real(w), WeightMode::Real) => conv2d_dense(
                    xv,
                    &w.data,
                    self.bias.as_ref().map(|b| b.data.as_slice().unwrap()),
                    &self.geom,
                )?,
                _ => {
                    return Err(Error::InvalidConfig(
                        "conv weight storage does not match its mode".into(),
                    ))
                }
            }
        };
        let mut inputs = vec![x];
        match &self.weights {
            ConvWeights::Shift(pair) => {
                inputs.push(g.param_leaf(&pair.p));
                inputs.push(g.param_leaf(&pair.s));
            }
            ConvWeights::Real(w) => inputs.push(g.param_leaf(w)),
        }
        if let Some(b) = &self.bias {
            inputs.push(g.param_leaf(b));
        }
        Ok(g.push_node(
            value,
            inputs,
            Some(Box::new(ConvRule {
                geom: self.geom,
                mode: self.mode,
                has_bias: self.bias.is_some(),
                need_dx: self.need_dx,
            })),
        ))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let ConvWeights::Shift(pair) = &self.weights else {
            return Err(Error::InvalidConfig(
                "fixed-path inference requires shift weights".into(),
            ));
        };
        let view = pair.quantize();
        let braw = self.bias.as_ref().map(bias_raw).transpose()?;
        shift_conv2d_fixed(
            x,
            view.p_bar.as_slice().unwrap(),
            view.s_bar.as_slice().unwrap(),
            braw.as_deref(),
            &self.geom,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.geom.out_c * self.geom.patch()
    }
}

impl Stateful for ShiftConv2d {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match &mut self.weights {
            ConvWeights::Shift(pair) => {
                out.push(&mut pair.p);
                out.push(&mut pair.s);
            }
            ConvWeights::Real(w) => out.push(w),
        }
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        if let ConvWeights::Shift(pair) = &self.weights {
            f(pair);
        }
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        if let ConvWeights::Shift(pair) = &mut self.weights {
            f(pair);
        }
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        match &self.weights {
            ConvWeights::Shift(pair) => {
                let view = pair.quantize();
                out.push(StateEntry {
                    name: format!("{prefix}.weight"),
                    payload: TensorPayload::Shift {
                        shape: view.p_bar.shape().to_vec(),
                        p_bar: view.p_bar.iter().cloned().collect(),
                        s_bar: view.s_bar.iter().cloned().collect(),
                    },
                });
            }
            ConvWeights::Real(w) => out.push(StateEntry {
                name: format!("{prefix}.weight"),
                payload: TensorPayload::Real(w.data.clone()),
            }),
        }
        if let Some(b) = &self.bias {
            out.push(StateEntry {
                name: format!("{prefix}.bias"),
                payload: TensorPayload::Real(b.data.clone()),
            });
        }
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        let name = format!("{prefix}.weight");
        match &mut self.weights {
            ConvWeights::Shift(pair) => {
                let (shape, p_bar, s_bar) = state::take_shift(map, &name)?;
                if shape != pair.p.data.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        shape,
                        pair.p.data.shape()
                    )));
                }
                pair.p.data = ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    p_bar.iter().map(|&v| v as f64).collect(),
                )
                .unwrap();
                pair.s.data = ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    s_bar.iter().map(|&v| v as f64).collect(),
                )
                .unwrap();
            }
            ConvWeights::Real(w) => {
                let a = state::take_real(map, &name)?;
                if a.shape() != w.data.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        a.shape(),
                        w.data.shape()
                    )));
                }
                w.data = a;
            }
        }
        if let Some(b) = &mut self.bias {
            b.data = state::take_real(map, &format!("{prefix}.bias"))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ShiftLinear {
    pub in_c: usize,
    pub out_c: usize,
    pub mode: WeightMode,
    pub weights: ConvWeights,
    pub bias: Param,
}

impl ShiftLinear {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        in_c: usize,
        out_c: usize,
    ) -> ShiftLinear {
        let weights = ConvWeights::new(ids, rng, mode, &[out_c, in_c], in_c);
        let bias = Param::new(
            ids,
            ArrayD::zeros(IxDyn(&[out_c])),
            ParamKind::Plain { decay: false },
        );
        ShiftLinear {
            in_c,
            out_c,
            mode,
            weights,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let value = {
            let xv = g.value(x);
            match (&self.weights, self.mode) {
                (ConvWeights::Shift(pair), WeightMode::ShiftQuantized { .. }) => {
                    let view = pair.quantize();
                    let fx = FxTensor::from_real_array(xv)?;
                    let braw = bias_raw(&self.bias)?;
                    shift_linear_fixed(
                        &fx,
                        view.p_bar.as_slice().unwrap(),
                        view.s_bar.as_slice().unwrap(),
                        Some(&braw),
                        self.in_c,
                        self.out_c,
                    )?
                    .to_real_array()
                }
                (ConvWeights::Shift(pair), WeightMode::ShiftSurrogate) => {
                    let w = conv::surrogate_weight(&pair.p.data, &pair.s.data);
                    linear_dense(xv, &w, Some(self.bias.data.as_slice().unwrap()))?
                }
                (ConvWeights::Real(w), WeightMode::Real) => {
                    linear_dense(xv, &w.data, Some(self.bias.data.as_slice().unwrap()))?
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "linear weight storage does not match its mode".into(),
                    ))
                }
            }
        };
        let mut inputs = vec![x];
        match &self.weights {
            ConvWeights::Shift(pair) => {
                inputs.push(g.param_leaf(&pair.p));
                inputs.push(g.param_leaf(&pair.s));
            }
            ConvWeights::Real(w) => inputs.push(g.param_leaf(w)),
        }
        inputs.push(g.param_leaf(&self.bias));
        Ok(g.push_node(
            value,
            inputs,
            Some(Box::new(LinearRule {
                mode: self.mode,
                has_bias: true,
            })),
        ))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let ConvWeights::Shift(pair) = &self.weights else {
            return Err(Error::InvalidConfig(
                "fixed-path inference requires shift weights".into(),
            ));
        };
        let view = pair.quantize();
        let braw = bias_raw(&self.bias)?;
        shift_linear_fixed(
            x,
            view.p_bar.as_slice().unwrap(),
            view.s_bar.as_slice().unwrap(),
            Some(&braw),
            self.in_c,
            self.out_c,
        )
    }
}

impl Stateful for ShiftLinear {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match &mut self.weights {
            ConvWeights::Shift(pair) => {
                out.push(&mut pair.p);
                out.push(&mut pair.s);
            }
            ConvWeights::Real(w) => out.push(w),
        }
        out.push(&mut self.bias);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        if let ConvWeights::Shift(pair) = &self.weights {
            f(pair);
        }
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        if let ConvWeights::Shift(pair) = &mut self.weights {
            f(pair);
        }
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        match &self.weights {
            ConvWeights::Shift(pair) => {
                let view = pair.quantize();
                out.push(StateEntry {
                    name: format!("{prefix}.weight"),
                    payload: TensorPayload::Shift {
                        shape: view.p_bar.shape().to_vec(),
                        p_bar: view.p_bar.iter().cloned().collect(),
                        s_bar: view.s_bar.iter().cloned().collect(),
                    },
                });
            }
            ConvWeights::Real(w) => out.push(StateEntry {
                name: format!("{prefix}.weight"),
                payload: TensorPayload::Real(w.data.clone()),
            }),
        }
        out.push(StateEntry {
            name: format!("{prefix}.bias"),
            payload: TensorPayload::Real(self.bias.data.clone()),
        });
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        let name = format!("{prefix}.weight");
        match &mut self.weights {
            ConvWeights::Shift(pair) => {
                let (shape, p_bar, s_bar) = state::take_shift(map, &name)?;
                pair.p.data = ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    p_bar.iter().map(|&v| v as f64).collect(),
                )
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                pair.s.data = ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    s_bar.iter().map(|&v| v as f64).collect(),
                )
                .unwrap();
            }
            ConvWeights::Real(w) => w.data = state::take_real(map, &name)?,
        }
        self.bias.data = state::take_real(map, &format!("{prefix}.bias"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BatchNorm2d {
    pub scale: Param,
    pub bias: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(ids: &mut IdGen, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            scale: Param::new(
                ids,
                ArrayD::ones(IxDyn(&[channels])),
                ParamKind::Plain { decay: true },
            ),
            bias: Param::new(
                ids,
                ArrayD::zeros(IxDyn(&[channels])),
                ParamKind::Plain { decay: false },
            ),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> NodeId {
        let c = self.scale.data.len();
        let (x_hat, inv_std, value) = {
            let xv = g.value(x);
            let b = xv.shape()[0];
            let (h, w) = (xv.shape()[2], xv.shape()[3]);
            let m = (b * h * w) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            if train {
                for ci in 0..c {
                    let lane = xv.index_axis(Axis(1), ci);
                    let mu = lane.sum() / m;
                    let v = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
            } else {
                for ci in 0..c {
                    mean[ci] = self.running_mean[[ci]];
                    var[ci] = self.running_var[[ci]];
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
            let mut x_hat = xv.clone();
            for ci in 0..c {
                let mut lane = x_hat.index_axis_mut(Axis(1), ci);
                let (mu, is) = (mean[ci], inv_std[ci]);
                lane.mapv_inplace(|v| (v - mu) * is);
            }
            let mut value = x_hat.clone();
            for ci in 0..c {
                let mut lane = value.index_axis_mut(Axis(1), ci);
                let (sc, bi) = (self.scale.data[[ci]], self.bias.data[[ci]]);
                lane.mapv_inplace(|v| sc * v + bi);
            }
            if train {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ci in 0..c {
                    self.running_mean[[ci]] =
                        (1.0 - self.momentum) * self.running_mean[[ci]] + self.momentum * mean[ci];
                    self.running_var[[ci]] = (1.0 - self.momentum) * self.running_var[[ci]]
                        + self.momentum * var[ci] * unbias;
                }
            }
            (x_hat, inv_std, value)
        };
        let sc = g.param_leaf(&self.scale);
        let bi = g.param_leaf(&self.bias);
        g.push_node(
            value,
            vec![x, sc, bi],
            Some(Box::new(BnRule { x_hat, inv_std })),
        )
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let c = self.scale.data.len();
        let (bsz, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let mut out = FxTensor::zeros(&x.shape);
        for ci in 0..c {
            let a = self.scale.data[[ci]] / (self.running_var[[ci]] + self.eps).sqrt();
            let b = self.bias.data[[ci]] - a * self.running_mean[[ci]];
            for bi in 0..bsz {
                let base = bi * c * h * w + ci * h * w;
                for i in 0..h * w {
                    let v = x.data[base + i].to_real();
                    out.data[base + i] = Fixed::from_real(a * v + b)?;
                }
            }
        }
        Ok(out)
    }
}

struct BnRule {
    x_hat: ArrayD<f64>,
    inv_std: Vec<f64>,
}

impl OpRule for BnRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let scale = inputs[1];
        let c = scale.len();
        let shape = self.x_hat.shape();
        let m = (shape[0] * shape[2] * shape[3]) as f64;
        let mut dscale = ArrayD::zeros(IxDyn(&[c]));
        let mut dbias = ArrayD::zeros(IxDyn(&[c]));
        let mut dx = ArrayD::zeros(self.x_hat.raw_dim());
        for ci in 0..c {
            let g_lane = grad_out.index_axis(Axis(1), ci);
            let xh_lane = self.x_hat.index_axis(Axis(1), ci);
            let sum_g: f64 = g_lane.sum();
            let sum_gx: f64 = g_lane
                .iter()
                .zip(xh_lane.iter())
                .map(|(&g, &x)| g * x)
                .sum();
            dbias[[ci]] = sum_g;
            dscale[[ci]] = sum_gx;
            let k = scale[[ci]] * self.inv_std[ci] / m;
            let mut dx_lane = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dx_lane)
                .and(&g_lane)
                .and(&xh_lane)
                .for_each(|d, &g, &xh| {
                    *d = k * (m * g - sum_g - xh * sum_gx);
                });
        }
        vec![Some(dx), Some(dscale), Some(dbias)]
    }
}

impl Stateful for BatchNorm2d {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.scale);
        out.push(&mut self.bias);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        out.push(StateEntry {
            name: format!("{prefix}.scale"),
            payload: TensorPayload::Real(self.scale.data.clone()),
        });
        out.push(StateEntry {
            name: format!("{prefix}.bias"),
            payload: TensorPayload::Real(self.bias.data.clone()),
        });
        out.push(StateEntry {
            name: format!("{prefix}.running_mean"),
            payload: TensorPayload::Real(self.running_mean.clone()),
        });
        out.push(StateEntry {
            name: format!("{prefix}.running_var"),
            payload: TensorPayload::Real(self.running_var.clone()),
        });
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.scale.data = state::take_real(map, &format!("{prefix}.scale"))?;
        self.bias.data = state::take_real(map, &format!("{prefix}.bias"))?;
        self.running_mean = state::take_real(map, &format!("{prefix}.running_mean"))?;
        self.running_var = state::take_real(map, &format!("{prefix}.running_var"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pooling and spatial ops
// ---------------------------------------------------------------------------

const POOL_K: usize = 3;
const POOL_PAD: usize = 1;

fn pool_out_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (
        (h + 2 * POOL_PAD - POOL_K) / stride + 1,
        (w + 2 * POOL_PAD - POOL_K) / stride + 1,
    )
}

/// 3x3 max pooling with padding 1; padded positions never win.
pub fn max_pool3(g: &mut Graph, x: NodeId, stride: usize) -> NodeId {
    let xv = g.value(x);
    let (b, c, h, w) = dims4(xv);
    let (oh, ow) = pool_out_hw(h, w, stride);
    let x_std = xv.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let mut out = vec![f64::NEG_INFINITY; b * c * oh * ow];
    let mut idx = vec![0u32; b * c * oh * ow];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..POOL_K {
                        let iy = (oy * stride + ky) as isize - POOL_PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..POOL_K {
                            let ix = (ox * stride + kx) as isize - POOL_PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o] = best;
                    idx[o] = ((bi * c + ci) * h * w + best_i) as u32;
                    o += 1;
                }
            }
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap();
    g.push_node(
        value,
        vec![x],
        Some(Box::new(MaxPoolRule {
            idx,
            in_shape: vec![b, c, h, w],
        })),
    )
}

struct MaxPoolRule {
    idx: Vec<u32>,
    in_shape: Vec<usize>,
}

impl OpRule for MaxPoolRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = vec![0.0f64; self.in_shape.iter().product()];
        let g_std = grad_out.as_standard_layout();
        for (gi, &v) in g_std.as_slice().unwrap().iter().enumerate() {
            dx[self.idx[gi] as usize] += v;
        }
        vec![Some(
            ArrayD::from_shape_vec(IxDyn(&self.in_shape), dx).unwrap(),
        )]
    }
}

/// 3x3 average pooling with padding 1; padded positions are excluded
/// from the divisor.
pub fn avg_pool3(g: &mut Graph, x: NodeId, stride: usize) -> NodeId {
    let xv = g.value(x);
    let (b, c, h, w) = dims4(xv);
    let (oh, ow) = pool_out_hw(h, w, stride);
    let x_std = xv.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let mut out = vec![0.0f64; b * c * oh * ow];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for ky in 0..POOL_K {
                        let iy = (oy * stride + ky) as isize - POOL_PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..POOL_K {
                            let ix = (ox * stride + kx) as isize - POOL_PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += plane[iy as usize * w + ix as usize];
                            count += 1;
                        }
                    }
                    out[o] = acc / count as f64;
                    o += 1;
                }
            }
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap();
    g.push_node(
        value,
        vec![x],
        Some(Box::new(AvgPoolRule {
            stride,
            in_shape: vec![b, c, h, w],
        })),
    )
}

struct AvgPoolRule {
    stride: usize,
    in_shape: Vec<usize>,
}

impl OpRule for AvgPoolRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (b, c, h, w) = (
            self.in_shape[0],
            self.in_shape[1],
            self.in_shape[2],
            self.in_shape[3],
        );
        let (oh, ow) = pool_out_hw(h, w, self.stride);
        let mut dx = vec![0.0f64; b * c * h * w];
        let g_std = grad_out.as_standard_layout();
        let gs = g_std.as_slice().unwrap();
        let mut o = 0;
        for bi in 0..b {
            for ci in 0..c {
                let plane_off = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut cells = [0usize; POOL_K * POOL_K];
                        let mut count = 0usize;
                        for ky in 0..POOL_K {
                            let iy = (oy * self.stride + ky) as isize - POOL_PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..POOL_K {
                                let ix = (ox * self.stride + kx) as isize - POOL_PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cells[count] = iy as usize * w + ix as usize;
                                count += 1;
                            }
                        }
                        let share = gs[o] / count as f64;
                        for &i in &cells[..count] {
                            dx[plane_off + i] += share;
                        }
                        o += 1;
                    }
                }
            }
        }
        vec![Some(
            ArrayD::from_shape_vec(IxDyn(&self.in_shape), dx).unwrap(),
        )]
    }
}

/// Spatial mean over H and W: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let (b, c, h, w) = dims4(xv);
    let mut out = ArrayD::zeros(IxDyn(&[b, c]));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xw in 0..w {
                    acc += xv[[bi, ci, y, xw]];
                }
            }
            out[[bi, ci]] = acc / (h * w) as f64;
        }
    }
    g.push_node(
        out,
        vec![x],
        Some(Box::new(GapRule {
            in_shape: vec![b, c, h, w],
        })),
    )
}

struct GapRule {
    in_shape: Vec<usize>,
}

impl OpRule for GapRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (b, c, h, w) = (
            self.in_shape[0],
            self.in_shape[1],
            self.in_shape[2],
            self.in_shape[3],
        );
        let mut dx = ArrayD::zeros(IxDyn(&self.in_shape));
        let share = 1.0 / (h * w) as f64;
        for bi in 0..b {
            for ci in 0..c {
                let g = grad_out[[bi, ci]] * share;
                for y in 0..h {
                    for xw in 0..w {
                        dx[[bi, ci, y, xw]] = g;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Drops the first spatial row and column; the strided twin of the
/// factorized-reduce branch.
pub fn crop_tl(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let value = xv
        .slice(ndarray::s![.., .., 1.., 1..])
        .to_owned()
        .into_dyn();
    g.push_node(value, vec![x], Some(Box::new(CropTlRule)))
}

struct CropTlRule;

impl OpRule for CropTlRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = ArrayD::zeros(inputs[0].raw_dim());
        dx.slice_mut(ndarray::s![.., .., 1.., 1..]).assign(grad_out);
        vec![Some(dx)]
    }
}

/// The "no connection" operation: zeros at the (possibly strided) output
/// shape. Constant w.r.t. the input.
pub fn zero_out(g: &mut Graph, x: NodeId, stride: usize) -> NodeId {
    let xv = g.value(x);
    let (b, c, h, w) = dims4(xv);
    let shape = [b, c, h.div_ceil(stride), w.div_ceil(stride)];
    g.constant(ArrayD::zeros(IxDyn(&shape)))
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// Fixed-path twins for the pooling/spatial ops
// ---------------------------------------------------------------------------

pub fn relu_fixed(x: &FxTensor) -> FxTensor {
    FxTensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|v| Fixed::from_raw(v.raw().max(0)))
            .collect(),
    }
}

pub fn max_pool3_fixed(x: &FxTensor, stride: usize) -> FxTensor {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = pool_out_hw(h, w, stride);
    let mut out = FxTensor::zeros(&[b, c, oh, ow]);
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = i32::MIN;
                    for ky in 0..POOL_K {
                        let iy = (oy * stride + ky) as isize - POOL_PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..POOL_K {
                            let ix = (ox * stride + kx) as isize - POOL_PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            best = best.max(x.data[base + iy as usize * w + ix as usize].raw());
                        }
                    }
                    out.data[o] = Fixed::from_raw(best);
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn avg_pool3_fixed(x: &FxTensor, stride: usize) -> FxTensor {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = pool_out_hw(h, w, stride);
    let mut out = FxTensor::zeros(&[b, c, oh, ow]);
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    let mut count = 0i64;
                    for ky in 0..POOL_K {
                        let iy = (oy * stride + ky) as isize - POOL_PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..POOL_K {
                            let ix = (ox * stride + kx) as isize - POOL_PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x.data[base + iy as usize * w + ix as usize].raw() as i64;
                            count += 1;
                        }
                    }
                    out.data[o] = Fixed::from_wide_sat(fxp::div_round(acc, count));
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool_fixed(x: &FxTensor) -> FxTensor {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = FxTensor::zeros(&[b, c]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let mut acc = 0i64;
            for i in 0..h * w {
                acc += x.data[base + i].raw() as i64;
            }
            out.data[bi * c + ci] = Fixed::from_wide_sat(fxp::div_round(acc, (h * w) as i64));
        }
    }
    out
}

pub fn crop_tl_fixed(x: &FxTensor) -> FxTensor {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = FxTensor::zeros(&[b, c, h - 1, w - 1]);
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for y in 1..h {
                for xw in 1..w {
                    out.data[o] = x.data[base + y * w + xw];
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn concat_channels_fixed(parts: &[&FxTensor]) -> FxTensor {
    let (b, h, w) = (parts[0].shape[0], parts[0].shape[2], parts[0].shape[3]);
    let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = FxTensor::zeros(&[b, c_total, h, w]);
    for bi in 0..b {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape[1];
            let src = &p.data[bi * pc * h * w..(bi + 1) * pc * h * w];
            let dst_start = bi * c_total * h * w + c_off * h * w;
            out.data[dst_start..dst_start + pc * h * w].copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

pub fn zero_fixed(x: &FxTensor, stride: usize) -> FxTensor {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    FxTensor::zeros(&[b, c, h.div_ceil(stride), w.div_ceil(stride)])
}

/// Elementwise saturating addition of two same-shaped fixed tensors.
pub fn add_fixed(a: &FxTensor, b: &FxTensor) -> FxTensor {
    debug_assert_eq!(a.shape, b.shape);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.saturating_add(y))
        .collect();
    fxp::count::bump(fxp::count::OpCounts {
        adds: a.data.len() as u64,
        ..Default::default()
    });
    FxTensor {
        shape: a.shape.clone(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Composite operations
// ---------------------------------------------------------------------------

/// relu -> 1x1 conv -> bn; the cell input preprocessor.
#[derive(Debug)]
pub struct ReluConvBn {
    pub conv: ShiftConv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        in_c: usize,
        out_c: usize,
    ) -> ReluConvBn {
        let geom = ConvGeom {
            in_c,
            out_c,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        };
        ReluConvBn {
            conv: ShiftConv2d::new(ids, rng, mode, geom, false, true),
            bn: BatchNorm2d::new(ids, out_c),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let h = g.relu(x);
        let h = self.conv.forward(g, h)?;
        Ok(self.bn.forward(g, h, train))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let h = relu_fixed(x);
        let h = self.conv.eval_fixed(&h)?;
        self.bn.eval_fixed(&h)
    }
}

impl Stateful for ReluConvBn {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.conv.visit_shift_pairs(f);
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.conv.visit_shift_pairs_mut(f);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.conv.collect_state(&format!("{prefix}.conv"), out);
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.conv.load_state(&format!("{prefix}.conv"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }
}

/// Separable convolution: two rounds of relu -> depthwise k x k ->
/// pointwise 1x1 -> bn. The first depthwise carries the stride.
#[derive(Debug)]
pub struct SepConv {
    pub dw1: ShiftConv2d,
    pub pw1: ShiftConv2d,
    pub bn1: BatchNorm2d,
    pub dw2: ShiftConv2d,
    pub pw2: ShiftConv2d,
    pub bn2: BatchNorm2d,
}

impl SepConv {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        c: usize,
        k: usize,
        stride: usize,
    ) -> Result<SepConv> {
        if k != 3 && k != 5 {
            return Err(Error::InvalidConfig(format!(
                "separable convolution kernel {k} unsupported (3 or 5)"
            )));
        }
        let dw = |stride: usize| ConvGeom {
            in_c: c,
            out_c: c,
            kh: k,
            kw: k,
            stride,
            pad: (k - 1) / 2,
            dilation: 1,
            groups: c,
        };
        let pw = ConvGeom {
            in_c: c,
            out_c: c,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        };
        Ok(SepConv {
            dw1: ShiftConv2d::new(ids, rng, mode, dw(stride), false, true),
            pw1: ShiftConv2d::new(ids, rng, mode, pw, false, true),
            bn1: BatchNorm2d::new(ids, c),
            dw2: ShiftConv2d::new(ids, rng, mode, dw(1), false, true),
            pw2: ShiftConv2d::new(ids, rng, mode, pw, false, true),
            bn2: BatchNorm2d::new(ids, c),
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let h = g.relu(x);
        let h = self.dw1.forward(g, h)?;
        let h = self.pw1.forward(g, h)?;
        let h = self.bn1.forward(g, h, train);
        let h = g.relu(h);
        let h = self.dw2.forward(g, h)?;
        let h = self.pw2.forward(g, h)?;
        Ok(self.bn2.forward(g, h, train))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let h = relu_fixed(x);
        let h = self.dw1.eval_fixed(&h)?;
        let h = self.pw1.eval_fixed(&h)?;
        let h = self.bn1.eval_fixed(&h)?;
        let h = relu_fixed(&h);
        let h = self.dw2.eval_fixed(&h)?;
        let h = self.pw2.eval_fixed(&h)?;
        self.bn2.eval_fixed(&h)
    }

    pub fn shift_weight_count(&self) -> usize {
        self.dw1.weight_count()
            + self.pw1.weight_count()
            + self.dw2.weight_count()
            + self.pw2.weight_count()
    }
}

impl Stateful for SepConv {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.dw1.collect_params(out);
        self.pw1.collect_params(out);
        self.bn1.collect_params(out);
        self.dw2.collect_params(out);
        self.pw2.collect_params(out);
        self.bn2.collect_params(out);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.dw1.visit_shift_pairs(f);
        self.pw1.visit_shift_pairs(f);
        self.dw2.visit_shift_pairs(f);
        self.pw2.visit_shift_pairs(f);
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.dw1.visit_shift_pairs_mut(f);
        self.pw1.visit_shift_pairs_mut(f);
        self.dw2.visit_shift_pairs_mut(f);
        self.pw2.visit_shift_pairs_mut(f);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.dw1.collect_state(&format!("{prefix}.dw1"), out);
        self.pw1.collect_state(&format!("{prefix}.pw1"), out);
        self.bn1.collect_state(&format!("{prefix}.bn1"), out);
        self.dw2.collect_state(&format!("{prefix}.dw2"), out);
        self.pw2.collect_state(&format!("{prefix}.pw2"), out);
        self.bn2.collect_state(&format!("{prefix}.bn2"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.dw1.load_state(&format!("{prefix}.dw1"), map)?;
        self.pw1.load_state(&format!("{prefix}.pw1"), map)?;
        self.bn1.load_state(&format!("{prefix}.bn1"), map)?;
        self.dw2.load_state(&format!("{prefix}.dw2"), map)?;
        self.pw2.load_state(&format!("{prefix}.pw2"), map)?;
        self.bn2.load_state(&format!("{prefix}.bn2"), map)
    }
}

/// Dilated separable convolution: relu -> depthwise k x k dilation 2 ->
/// pointwise 1x1 -> bn.
#[derive(Debug)]
pub struct DilConv {
    pub dw: ShiftConv2d,
    pub pw: ShiftConv2d,
    pub bn: BatchNorm2d,
}

impl DilConv {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        c: usize,
        k: usize,
        stride: usize,
    ) -> Result<DilConv> {
        if k != 3 && k != 5 {
            return Err(Error::InvalidConfig(format!(
                "dilated convolution kernel {k} unsupported (3 or 5)"
            )));
        }
        let dilation = 2;
        let dw = ConvGeom {
            in_c: c,
            out_c: c,
            kh: k,
            kw: k,
            stride,
            pad: dilation * (k - 1) / 2,
            dilation,
            groups: c,
        };
        let pw = ConvGeom {
            in_c: c,
            out_c: c,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        };
        Ok(DilConv {
            dw: ShiftConv2d::new(ids, rng, mode, dw, false, true),
            pw: ShiftConv2d::new(ids, rng, mode, pw, false, true),
            bn: BatchNorm2d::new(ids, c),
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let h = g.relu(x);
        let h = self.dw.forward(g, h)?;
        let h = self.pw.forward(g, h)?;
        Ok(self.bn.forward(g, h, train))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let h = relu_fixed(x);
        let h = self.dw.eval_fixed(&h)?;
        let h = self.pw.eval_fixed(&h)?;
        self.bn.eval_fixed(&h)
    }
}

impl Stateful for DilConv {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.dw.collect_params(out);
        self.pw.collect_params(out);
        self.bn.collect_params(out);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.dw.visit_shift_pairs(f);
        self.pw.visit_shift_pairs(f);
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.dw.visit_shift_pairs_mut(f);
        self.pw.visit_shift_pairs_mut(f);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.dw.collect_state(&format!("{prefix}.dw"), out);
        self.pw.collect_state(&format!("{prefix}.pw"), out);
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.dw.load_state(&format!("{prefix}.dw"), map)?;
        self.pw.load_state(&format!("{prefix}.pw"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }
}

/// Stride-2 skip connection: two offset 1x1 stride-2 convs concatenated,
/// then bn. Halves the spatial size while keeping the channel count.
#[derive(Debug)]
pub struct FactorizedReduce {
    pub conv1: ShiftConv2d,
    pub conv2: ShiftConv2d,
    pub bn: BatchNorm2d,
}

impl FactorizedReduce {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        in_c: usize,
        out_c: usize,
    ) -> Result<FactorizedReduce> {
        if !out_c.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "factorized reduce needs an even channel count, got {out_c}"
            )));
        }
        let geom = ConvGeom {
            in_c,
            out_c: out_c / 2,
            kh: 1,
            kw: 1,
            stride: 2,
            pad: 0,
            dilation: 1,
            groups: 1,
        };
        Ok(FactorizedReduce {
            conv1: ShiftConv2d::new(ids, rng, mode, geom, false, true),
            conv2: ShiftConv2d::new(ids, rng, mode, geom, false, true),
            bn: BatchNorm2d::new(ids, out_c),
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let h = g.relu(x);
        let a = self.conv1.forward(g, h)?;
        let shifted = crop_tl(g, h);
        let b = self.conv2.forward(g, shifted)?;
        let cat = g.concat_channels(&[a, b]);
        Ok(self.bn.forward(g, cat, train))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let h = relu_fixed(x);
        let a = self.conv1.eval_fixed(&h)?;
        let shifted = crop_tl_fixed(&h);
        let b = self.conv2.eval_fixed(&shifted)?;
        let cat = concat_channels_fixed(&[&a, &b]);
        self.bn.eval_fixed(&cat)
    }
}

impl Stateful for FactorizedReduce {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn.collect_params(out);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.conv1.visit_shift_pairs(f);
        self.conv2.visit_shift_pairs(f);
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.conv1.visit_shift_pairs_mut(f);
        self.conv2.visit_shift_pairs_mut(f);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.conv1.collect_state(&format!("{prefix}.conv1"), out);
        self.conv2.collect_state(&format!("{prefix}.conv2"), out);
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.conv1.load_state(&format!("{prefix}.conv1"), map)?;
        self.conv2.load_state(&format!("{prefix}.conv2"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }
}
