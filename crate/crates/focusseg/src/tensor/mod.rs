//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A `Tensor` is a cheap-clone handle (`Arc`) to an immutable value buffer.
//! Every differentiable operation records the op and its input handles on the
//! produced tensor, so the computation graph is the DAG of handles; `backward`
//! on a scalar walks it in reverse topological order. Values are immutable
//! after construction — only gradient buffers are written later.

mod container;
mod conv;
mod gradcheck;
mod graph;

pub use container::{read_tensor, write_tensor};
pub use conv::{conv2d, conv_output_dims, same_padding};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GroupReport};
pub use graph::{backward_pass, topo_order, GradMap};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// Multiply by a constant.
    Scale(f64),
    /// Clamp to [lo, hi]; gradient passes only where the input is inside.
    Clamp(f64, f64),
}

pub(crate) struct ConvRecord {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub dilation: usize,
    /// im2col buffer, rows = C_in*k*k, cols = out_h*out_w. Kept for backward.
    pub cols: Vec<f64>,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) enum Op {
    Binary {
        kind: BinaryKind,
        lhs: Tensor,
        rhs: Tensor,
    },
    Unary {
        kind: UnaryKind,
        input: Tensor,
    },
    SumAll {
        input: Tensor,
    },
    SumSpatial {
        input: Tensor,
    },
    GlobalAvgPool {
        input: Tensor,
    },
    Conv2d(Box<ConvRecord>),
    BilinearUpsample {
        input: Tensor,
        factor: usize,
    },
    LogSoftmax {
        input: Tensor,
    },
    ConcatChannels {
        inputs: Vec<Tensor>,
    },
    /// Straight-through estimator hook: routes the channel-summed product
    /// gradient of an `apply_mask` back into the importance map.
    SteMask {
        features: Tensor,
        scores: Tensor,
        mask: Vec<f64>,
    },
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Handle to an immutable n-dimensional f64 array participating in the graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor shape must have positive extents, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::contract(format!(
            "data length {len} does not match shape {shape:?} (numel {numel})"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        let needs_grad = requires_grad
            || match &op {
                None => false,
                Some(o) => op_inputs(o).iter().any(|t| t.needs_grad()),
            };
        Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                needs_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        Tensor::new(shape, data, false, Some(op))
    }

    /// Constant leaf; no gradient is ever computed for it.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut cell = self.inner.grad.lock().unwrap();
        match cell.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => *cell = Some(contribution.to_vec()),
        }
    }

    /// New constant leaf with the same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode differentiation from a scalar. Populates `grad` on every
    /// reachable `requires_grad` leaf; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        let grads = graph::backward_pass(self)?;
        for node in graph::topo_order(self) {
            if node.is_leaf() && node.requires_grad() {
                if let Some(g) = grads.get(&node.id()) {
                    node.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinaryKind::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinaryKind::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinaryKind::Mul, self, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinaryKind::Div, self, rhs)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_op(UnaryKind::Sigmoid, self)
    }

    pub fn relu(&self) -> Tensor {
        unary_op(UnaryKind::Relu, self)
    }

    pub fn exp(&self) -> Tensor {
        unary_op(UnaryKind::Exp, self)
    }

    pub fn log(&self) -> Tensor {
        unary_op(UnaryKind::Log, self)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        unary_op(UnaryKind::Scale(factor), self)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary_op(UnaryKind::Clamp(lo, hi), self)
    }

    // ---- reductions ----

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.inner.data.iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::SumAll { input: self.clone() })
    }

    /// Per-channel spatial sum: `[C,H,W] -> [C,1,1]`.
    pub fn sum_spatial(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let mut out = vec![0.0; c];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.inner.data[ch * h * w..(ch + 1) * h * w].iter().sum();
        }
        Ok(Tensor::from_op(
            vec![c, 1, 1],
            out,
            Op::SumSpatial { input: self.clone() },
        ))
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; c];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.inner.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() * inv;
        }
        Ok(Tensor::from_op(
            vec![c, 1, 1],
            out,
            Op::GlobalAvgPool { input: self.clone() },
        ))
    }

    // ---- spatial ----

    /// Bilinear upsample by an integer factor, half-pixel centers, edge clamp.
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Tensor> {
        if factor < 1 {
            return Err(Error::config(format!(
                "upsample factor must be >= 1, got {factor}"
            )));
        }
        let (c, h, w) = self.dims3()?;
        if factor == 1 {
            // Identity, but still recorded so gradients flow.
            return Ok(Tensor::from_op(
                self.inner.shape.clone(),
                self.inner.data.clone(),
                Op::BilinearUpsample { input: self.clone(), factor },
            ));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ytaps = upsample_taps(h, factor);
        let xtaps = upsample_taps(w, factor);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &self.inner.data[ch * h * w..(ch + 1) * h * w];
            let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out_plane[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            Op::BilinearUpsample { input: self.clone(), factor },
        ))
    }

    /// Per-pixel log-softmax over the channel axis, stabilized by max
    /// subtraction; exp of the output sums to 1 per pixel.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if c < 2 {
            return Err(Error::contract(format!(
                "log_softmax needs >= 2 channels, got {c}"
            )));
        }
        let hw = h * w;
        let data = &self.inner.data;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(data[ch * hw + p]);
            }
            let mut lse = 0.0;
            for ch in 0..c {
                lse += (data[ch * hw + p] - m).exp();
            }
            let lse = lse.ln();
            for ch in 0..c {
                out[ch * hw + p] = data[ch * hw + p] - m - lse;
            }
        }
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            Op::LogSoftmax { input: self.clone() },
        ))
    }

    pub(crate) fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.inner.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::contract(format!("expected rank-3 tensor, got {s:?}"))),
        }
    }
}

/// (low index, high index, weight of high tap) per output position.
fn upsample_taps(in_extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let inv = 1.0 / factor as f64;
    (0..in_extent * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) * inv - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_extent - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_extent - 1);
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Binary { lhs, rhs, .. } => vec![lhs, rhs],
        Op::Unary { input, .. }
        | Op::SumAll { input }
        | Op::SumSpatial { input }
        | Op::GlobalAvgPool { input }
        | Op::BilinearUpsample { input, .. }
        | Op::LogSoftmax { input } => vec![input],
        Op::Conv2d(rec) => vec![&rec.input, &rec.weight, &rec.bias],
        Op::ConcatChannels { inputs } => inputs.iter().collect(),
        Op::SteMask { features, scores, .. } => vec![features, scores],
    }
}

// ---- broadcasting ----

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "broadcast rank mismatch: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&ea, &eb)| {
            if ea == eb || ea == 1 || eb == 1 {
                Ok(ea.max(eb))
            } else {
                Err(Error::contract(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        })
        .collect()
}

/// Row-major strides with 0 on axes the operand broadcasts along.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

/// Calls `f(out_off, a_off, b_off)` for every output position.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for out_off in 0..numel {
        f(out_off, a_off, b_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            a_off += a_strides[ax];
            b_off += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            a_off -= a_strides[ax] * out_shape[ax];
            b_off -= b_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn binary_op(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let apply = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let out = if a.shape() == b.shape() {
        let mut out = vec![0.0; a.numel()];
        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
            *o = apply(x, y);
        }
        Tensor::from_op(
            a.shape().to_vec(),
            out,
            Op::Binary { kind, lhs: a.clone(), rhs: b.clone() },
        )
    } else {
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let astr = broadcast_strides(a.shape(), &shape);
        let bstr = broadcast_strides(b.shape(), &shape);
        let mut out = vec![0.0; shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&shape, &astr, &bstr, |o, ai, bi| {
            out[o] = apply(ad[ai], bd[bi]);
        });
        Tensor::from_op(shape, out, Op::Binary { kind, lhs: a.clone(), rhs: b.clone() })
    };
    Ok(out)
}

fn unary_op(kind: UnaryKind, input: &Tensor) -> Tensor {
    let out: Vec<f64> = input
        .data()
        .iter()
        .map(|&x| match kind {
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            // Not x.max(0.0): f64::max ignores NaN, which would silently
            // launder a numerical blowup into zeros.
            UnaryKind::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Scale(c) => c * x,
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        })
        .collect();
    Tensor::from_op(
        input.shape().to_vec(),
        out,
        Op::Unary { kind, input: input.clone() },
    )
}

/// Concatenate along the channel axis: n tensors `[C_i,H,W] -> [sum C_i,H,W]`.
pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::contract("concat_channels needs at least one input"));
    }
    let (_, h, w) = inputs[0].dims3()?;
    let mut total_c = 0;
    for t in inputs {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::contract(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                t.shape(),
                inputs[0].shape()
            )));
        }
        total_c += c;
    }
    let mut out = Vec::with_capacity(total_c * h * w);
    for t in inputs {
        out.extend_from_slice(t.data());
    }
    Ok(Tensor::from_op(
        vec![total_c, h, w],
        out,
        Op::ConcatChannels { inputs: inputs.to_vec() },
    ))
}

/// Non-overlapping max pooling (window == stride), zero-padding ragged edges.
/// Not differentiable; used to downsample binary target maps.
pub fn max_pool(input: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::config("max_pool window must be positive"));
    }
    let (c, h, w) = input.dims3()?;
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = 0.0f64; // zero padding participates in the max
                for iy in oy * window..((oy + 1) * window).min(h) {
                    for ix in ox * window..((ox + 1) * window).min(w) {
                        m = m.max(plane[iy * w + ix]);
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = m;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Masked product with an optional straight-through gradient into `scores`.
///
/// Forward is `features * mask` (mask broadcast over channels). Backward sends
/// `mask * grad` to `features`; when `ste` is set it additionally sends the
/// channel-summed `features * grad` to `scores`, treating the binarization as
/// identity. With `ste` off the mask is a constant.
pub fn mul_mask(features: &Tensor, mask: &Tensor, scores: &Tensor, ste: bool) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let (mc, mh, mw) = mask.dims3()?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::contract(format!(
            "mask shape {:?} does not match features {:?}",
            mask.shape(),
            features.shape()
        )));
    }
    if !ste {
        return features.mul(mask);
    }
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[ch * hw + p] = features.data()[ch * hw + p] * mask.data()[p];
        }
    }
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        Op::SteMask {
            features: features.clone(),
            scores: scores.clone(),
            mask: mask.data().to_vec(),
        },
    ))
}
