//! Convolutional and locally-connected layers over NHWC batches.
//!
//! Both use cross-correlation with zero "same" padding. The only difference is
//! where the filter comes from: one shared bank (`conv2d`) or one bank per output
//! position (`local2d`). Both share this code, so a locally-connected layer whose
//! banks are all copies of one filter reproduces the convolution bit for bit.

use super::{same_padding, LayerParams, LayerSpec, Window};
use crate::tensor::Tensor;

struct Geometry {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    pad_top: usize,
    pad_left: usize,
    kh: usize,
    kw: usize,
    stride: usize,
}

impl Geometry {
    fn new(spec: &LayerSpec, w: Window) -> Self {
        let (in_h, in_w, in_c) = (spec.in_shape[0], spec.in_shape[1], spec.in_shape[2]);
        let (out_h, pad_top) = same_padding(in_h, w.filter_h, w.stride);
        let (out_w, pad_left) = same_padding(in_w, w.filter_w, w.stride);
        Geometry {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c: w.channels_out,
            pad_top,
            pad_left,
            kh: w.filter_h,
            kw: w.filter_w,
            stride: w.stride,
        }
    }

    fn bank_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Offsets of the filter bank and bias for output position `p`, channel `co`.
    fn offsets(&self, local: bool, p: usize, co: usize) -> (usize, usize) {
        if local {
            let idx = p * self.out_c + co;
            (idx * self.bank_len(), idx)
        } else {
            (co * self.bank_len(), co)
        }
    }

    /// Input row/column for an output coordinate and filter tap, if inside the image.
    #[inline]
    fn source(&self, out: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
        (out * self.stride + tap).checked_sub(pad).filter(|&i| i < extent)
    }
}

pub(super) fn forward(spec: &LayerSpec, w: Window, local: bool, params: &LayerParams, x: &[f64], batch: usize) -> Vec<f64> {
    let g = Geometry::new(spec, w);
    let weights = params.weights.data();
    let bias = params.bias.as_ref().map(Tensor::data).expect("windowed layer has bias");
    let in_len = g.in_h * g.in_w * g.in_c;
    let mut out = vec![0.0; batch * g.out_h * g.out_w * g.out_c];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let out_base = ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                for co in 0..g.out_c {
                    let (wb, bi) = g.offsets(local, p, co);
                    let mut acc = 0.0;
                    for ci in 0..g.in_c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else { continue };
                                acc += weights[wb + (ci * g.kh + ky) * g.kw + kx] * xb[(iy * g.in_w + ix) * g.in_c + ci];
                            }
                        }
                    }
                    out[out_base + co] = acc + bias[bi];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    spec: &LayerSpec,
    w: Window,
    local: bool,
    params: &LayerParams,
    x: &[f64],
    dz: &[f64],
    batch: usize,
    need_input_grad: bool,
) -> (Option<Vec<f64>>, LayerParams) {
    let g = Geometry::new(spec, w);
    let weights = params.weights.data();
    let in_len = g.in_h * g.in_w * g.in_c;
    let mut dw = vec![0.0; weights.len()];
    let mut db = vec![0.0; params.bias.as_ref().map_or(0, Tensor::len)];
    let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let out_base = ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                for co in 0..g.out_c {
                    let d = dz[out_base + co];
                    if d == 0.0 {
                        continue;
                    }
                    let (wb, bi) = g.offsets(local, p, co);
                    db[bi] += d;
                    for ci in 0..g.in_c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else { continue };
                                let wi = wb + (ci * g.kh + ky) * g.kw + kx;
                                let xi = (iy * g.in_w + ix) * g.in_c + ci;
                                dw[wi] += d * xb[xi];
                                if need_input_grad {
                                    dx[b * in_len + xi] += d * weights[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let grads = LayerParams {
        weights: Tensor::from_parts(params.weights.shape().to_vec(), dw),
        bias: params.bias.as_ref().map(|bias| Tensor::from_parts(bias.shape().to_vec(), db)),
    };
    (need_input_grad.then_some(dx), grads)
}
