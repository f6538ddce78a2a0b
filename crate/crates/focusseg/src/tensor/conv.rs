//! 2-D convolution (cross-correlation) with dilation, via explicit patch
//! gather (im2col) and a matrix product. Backward reuses the gathered patch
//! matrix: weight gradients are a product against it, input gradients go
//! through the transposed gather (col2im).

// Index arithmetic in the gather/scatter loops mirrors the tap geometry;
// iterator rewrites obscure it.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use super::graph::GradMap;
use super::{ConvRecord, Op, Tensor};
use crate::error::{Error, Result};

/// Zero padding per side for "same" output extents at stride 1.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

/// Output spatial extents for a same-padded conv.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) -> (usize, usize) {
    let pad = same_padding(kernel, dilation);
    let span = dilation * (kernel - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (w + 2 * pad - span) / stride + 1;
    (oh, ow)
}

fn validate(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let ws = weight.shape();
    let [c_out, wc_in, kh, kw] = match ws {
        &[a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::contract(format!(
                "conv2d weight must be rank 4, got {ws:?}"
            )))
        }
    };
    if kh != kw {
        return Err(Error::config(format!("conv2d kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::config(format!("conv2d kernel must be odd, got {kh}")));
    }
    if dilation == 0 {
        return Err(Error::config("conv2d dilation must be positive"));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if wc_in != c_in {
        return Err(Error::contract(format!(
            "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::contract(format!(
            "conv2d bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    Ok((c_in, h, w, c_out, kh))
}

/// Gather dilated k x k patches into a row-major [C_in*k*k, out_h*out_w]
/// matrix, zero-filling taps that fall in the padding.
fn im2col(
    data: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let pad = same_padding(kernel, dilation) as isize;
    let n = out_h * out_w;
    let mut cols = vec![0.0; c_in * kernel * kernel * n];
    for ci in 0..c_in {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = &mut cols[((ci * kernel + kr) * kernel + kc) * n..][..n];
                let dy = (kr * dilation) as isize - pad;
                let dx = (kc * dilation) as isize - pad;
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * out_w..(oy + 1) * out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch-matrix gradient back onto the input grid; the exact
/// transpose of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let pad = same_padding(kernel, dilation) as isize;
    let n = out_h * out_w;
    let mut grad = vec![0.0; c_in * h * w];
    for ci in 0..c_in {
        let plane = &mut grad[ci * h * w..(ci + 1) * h * w];
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = &dcols[((ci * kernel + kr) * kernel + kc) * n..][..n];
                let dy = (kr * dilation) as isize - pad;
                let dx = (kc * dilation) as isize - pad;
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * out_w..(oy + 1) * out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Same-padded dilated convolution of a `[C_in,H,W]` input with a
/// `[C_out,C_in,k,k]` weight and `[C_out]` bias. Stride 1 preserves the spatial
/// extents for every dilation.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (c_in, h, w, c_out, kernel) = validate(input, weight, bias, stride, dilation)?;
    let (out_h, out_w) = conv_output_dims(h, w, kernel, stride, dilation);
    let n = out_h * out_w;
    let k_len = c_in * kernel * kernel;
    let cols = im2col(input.data(), c_in, h, w, kernel, stride, dilation, out_h, out_w);

    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; c_out * n];
    for co in 0..c_out {
        let out_row = &mut out[co * n..(co + 1) * n];
        out_row.fill(bd[co]);
        let w_row = &wd[co * k_len..(co + 1) * k_len];
        for (r, &wv) in w_row.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let col_row = &cols[r * n..(r + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(col_row) {
                *o += wv * cv;
            }
        }
    }

    Ok(Tensor::from_op(
        vec![c_out, out_h, out_w],
        out,
        Op::Conv2d(Box::new(ConvRecord {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            dilation,
            cols,
            out_h,
            out_w,
        })),
    ))
}

pub(super) fn backward(rec: &ConvRecord, node: &Tensor, grad: &[f64], grads: &mut GradMap) {
    let (c_in, h, w) = rec.input.dims3().expect("recorded op shape");
    let c_out = node.shape()[0];
    let kernel = rec.weight.shape()[2];
    let n = rec.out_h * rec.out_w;
    let k_len = c_in * kernel * kernel;

    if rec.bias.needs_grad() {
        let mut db = vec![0.0; c_out];
        for co in 0..c_out {
            db[co] = grad[co * n..(co + 1) * n].iter().sum();
        }
        super::graph::accumulate(grads, &rec.bias, db);
    }

    if rec.weight.needs_grad() {
        let mut dw = vec![0.0; c_out * k_len];
        for co in 0..c_out {
            let g_row = &grad[co * n..(co + 1) * n];
            let dw_row = &mut dw[co * k_len..(co + 1) * k_len];
            for (r, dw_val) in dw_row.iter_mut().enumerate() {
                let col_row = &rec.cols[r * n..(r + 1) * n];
                let mut acc = 0.0;
                for (g, c) in g_row.iter().zip(col_row) {
                    acc += g * c;
                }
                *dw_val += acc;
            }
        }
        super::graph::accumulate(grads, &rec.weight, dw);
    }

    if rec.input.needs_grad() {
        let wd = rec.weight.data();
        let mut dcols = vec![0.0; k_len * n];
        for co in 0..c_out {
            let g_row = &grad[co * n..(co + 1) * n];
            let w_row = &wd[co * k_len..(co + 1) * k_len];
            for (r, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let dcol_row = &mut dcols[r * n..(r + 1) * n];
                for (d, &g) in dcol_row.iter_mut().zip(g_row) {
                    *d += wv * g;
                }
            }
        }
        let dinput = col2im(
            &dcols, c_in, h, w, kernel, rec.stride, rec.dilation, rec.out_h, rec.out_w,
        );
        super::graph::accumulate(grads, &rec.input, dinput);
    }
}
