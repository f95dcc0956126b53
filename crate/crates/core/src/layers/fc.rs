use crate::tensor::{gemm_acc, transpose_block, Tensor};

/// `z[b] = W[:, :in] · x[b] + W[:, in]`, bias added after the ascending-index sum.
pub(super) fn forward(inputs: usize, outputs: usize, weights: &Tensor, x: &[f64], batch: usize) -> Vec<f64> {
    let cols = inputs + 1;
    let w = weights.data();
    let wt = transpose_block(outputs, inputs, w, cols);
    let mut z = vec![0.0; batch * outputs];
    gemm_acc(batch, inputs, outputs, x, inputs, &wt, outputs, &mut z, outputs);
    for row in z.chunks_exact_mut(outputs) {
        for (o, v) in row.iter_mut().enumerate() {
            *v += w[o * cols + inputs];
        }
    }
    z
}

/// Returns `(dx, dW)` where `dW` includes the bias column.
pub(super) fn backward(
    inputs: usize,
    outputs: usize,
    weights: &Tensor,
    x: &[f64],
    dz: &[f64],
    batch: usize,
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Tensor) {
    let cols = inputs + 1;
    let dzt = transpose_block(batch, outputs, dz, outputs);
    let mut dw = vec![0.0; outputs * cols];
    gemm_acc(outputs, batch, inputs, &dzt, batch, x, inputs, &mut dw, cols);
    for o in 0..outputs {
        dw[o * cols + inputs] = dzt[o * batch..(o + 1) * batch].iter().sum();
    }
    let dx = need_input_grad.then(|| {
        let mut dx = vec![0.0; batch * inputs];
        gemm_acc(batch, outputs, inputs, dz, outputs, weights.data(), cols, &mut dx, inputs);
        dx
    });
    (dx, Tensor::from_parts(vec![outputs, cols], dw))
}
