//! Elementwise activations, channel concatenation, dropout, and the fully
//! connected head.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::matmul::{matmul_nn, matmul_nt, matmul_tn};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu shape")
}

pub fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

// Largest f64 strictly below 1.0; keeps sigmoid outputs inside the open
// interval even for saturating inputs.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&x| (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, ONE_MINUS))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("sigmoid shape")
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect()
}

pub fn concat_channels_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let (n, _, h, w) = inputs[0].dims4();
    for t in inputs {
        let (tn, _, th, tw) = t.dims4();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat extents disagree: {:?} vs {:?}",
                inputs[0].shape(),
                t.shape()
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * c_total * h * w);
    for ni in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            let base = ni * c * h * w;
            out.extend_from_slice(&t.data()[base..base + c * h * w]);
        }
    }
    Tensor::new(vec![n, c_total, h, w], out)
}

/// Scatter the output gradient back to per-input gradients.
pub fn concat_channels_backward(
    input_shapes: &[&[usize]],
    out_shape: &[usize],
    grad_out: &[f64],
) -> Vec<Vec<f64>> {
    let n = out_shape[0];
    let c_total = out_shape[1];
    let area = out_shape[2] * out_shape[3];
    let mut grads: Vec<Vec<f64>> = input_shapes
        .iter()
        .map(|s| vec![0.0; s.iter().product()])
        .collect();
    for ni in 0..n {
        let mut c_off = 0;
        for (shape, grad) in input_shapes.iter().zip(grads.iter_mut()) {
            let c = shape[1];
            let src = (ni * c_total + c_off) * area;
            let dst = ni * c * area;
            grad[dst..dst + c * area].copy_from_slice(&grad_out[src..src + c * area]);
            c_off += c;
        }
    }
    grads
}

/// y[n,k] = sum_f x[n,f] w[k,f] + b[k]
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f) = input.dims2();
    let (k, wf) = weight.dims2();
    if wf != f || bias.numel() != k {
        return Err(Error::Shape(format!(
            "linear shapes disagree: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; n * k];
    matmul_nt(input.data(), weight.data(), n, f, k, &mut out);
    for row in out.chunks_mut(k) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, f) = input.dims2();
    let (k, _) = weight.dims2();
    let mut grad_in = vec![0.0; n * f];
    matmul_nn(grad_out, weight.data(), n, k, f, &mut grad_in);
    let mut grad_w = vec![0.0; k * f];
    matmul_tn(grad_out, input.data(), n, k, f, &mut grad_w);
    let mut grad_b = vec![0.0; k];
    for row in grad_out.chunks(k) {
        for (gb, &g) in grad_b.iter_mut().zip(row) {
            *gb += g;
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Inverted dropout: the mask holds 0.0 for dropped cells and 1/keep for
/// retained ones, so eval needs no rescaling.
pub fn dropout_mask(numel: usize, rate: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..numel)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}
