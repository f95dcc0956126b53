use super::LayerSpec;

/// Max pooling; windows at the far edge may be partial. Returns the pooled values
/// and, for every output entry, the flat input index (within the whole batch) of
/// the first maximum in row-major window order.
pub(super) fn forward(
    spec: &LayerSpec,
    window_h: usize,
    window_w: usize,
    stride: usize,
    x: &[f64],
    batch: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (h, w, c) = (spec.in_shape[0], spec.in_shape[1], spec.in_shape[2]);
    let (oh, ow) = (spec.out_shape[0], spec.out_shape[1]);
    let n = batch * oh * ow * c;
    let mut out = Vec::with_capacity(n);
    let mut winners = Vec::with_capacity(n);
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            let rows = oy * stride..(oy * stride + window_h).min(h);
            for ox in 0..ow {
                let cols = ox * stride..(ox * stride + window_w).min(w);
                for ch in 0..c {
                    let mut best = base + (rows.start * w + cols.start) * c + ch;
                    for iy in rows.clone() {
                        for ix in cols.clone() {
                            let idx = base + (iy * w + ix) * c + ch;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    winners.push(best);
                }
            }
        }
    }
    (out, winners)
}

pub(super) fn backward(in_len: usize, winners: &[usize], dz: &[f64], batch: usize) -> Vec<f64> {
    let mut dx = vec![0.0; batch * in_len];
    for (&idx, &d) in winners.iter().zip(dz) {
        dx[idx] += d;
    }
    dx
}
