//! 2D cross-correlation over NCHW tensors, via im2col plus matmul.

use rayon::prelude::*;

use super::matmul::{matmul_nn, matmul_nt, matmul_tn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv_geom(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if input_shape.len() != 4 || kernel_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects NCHW input and OIHW kernel, got {input_shape:?} / {kernel_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (n, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (c_out, kc, kh, kw) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    if h_out == 0 || w_out == 0 {
        return Err(Error::Shape("conv2d output extent is not positive".into()));
    }
    Ok(ConvGeom { n, c_in, h, w, c_out, kh, kw, stride, padding, h_out, w_out })
}

/// Unfold one batch element into a [c_in*kh*kw, h_out*w_out] patch matrix.
fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let patch = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = ((c * g.kh + dy) * g.kw + dx) * patch;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input gradient (scatter add).
fn col2im(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let patch = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = ((c * g.kh + dy) * g.kw + dx) * patch;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, g: &ConvGeom) -> Tensor {
    let ckk = g.c_in * g.kh * g.kw;
    let patch = g.h_out * g.w_out;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * patch;
    let mut out = vec![0.0; g.n * out_stride];

    out.par_chunks_mut(out_stride).enumerate().for_each(|(ni, out_n)| {
        let mut cols = vec![0.0; ckk * patch];
        im2col(&input.data()[ni * in_stride..(ni + 1) * in_stride], g, &mut cols);
        matmul_nn(kernel.data(), &cols, g.c_out, ckk, patch, out_n);
    });
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out).expect("conv output shape")
}

/// Returns (grad_input, grad_kernel). Per-element partials are reduced in a
/// fixed batch order so results are identical regardless of thread count.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeom,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ckk = g.c_in * g.kh * g.kw;
    let patch = g.h_out * g.w_out;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * patch;

    let mut grad_input = vec![0.0; g.n * in_stride];
    let kernel_partials: Vec<Vec<f64>> = grad_input
        .par_chunks_mut(in_stride)
        .enumerate()
        .map(|(ni, gin_n)| {
            let gout_n = &grad_out[ni * out_stride..(ni + 1) * out_stride];
            let mut cols = vec![0.0; ckk * patch];
            im2col(&input.data()[ni * in_stride..(ni + 1) * in_stride], g, &mut cols);

            let mut gk = vec![0.0; g.c_out * ckk];
            matmul_nt(gout_n, &cols, g.c_out, patch, ckk, &mut gk);

            let mut gcols = vec![0.0; ckk * patch];
            matmul_tn(kernel.data(), gout_n, g.c_out, ckk, patch, &mut gcols);
            col2im(&gcols, g, gin_n);
            gk
        })
        .collect();

    let mut grad_kernel = vec![0.0; g.c_out * ckk];
    for part in kernel_partials {
        for (acc, v) in grad_kernel.iter_mut().zip(part) {
            *acc += v;
        }
    }
    (grad_input, grad_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: Tensor, kernel: Tensor, stride: usize, padding: usize) -> Tensor {
        let g = conv_geom(input.shape(), kernel.shape(), stride, padding).unwrap();
        conv2d_forward(&input, &kernel, &g)
    }

    #[test]
    fn all_ones_window_sums() {
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let kernel = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let out = run(input, kernel, 1, 0);
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.25 - 10.0).collect();
        let input = Tensor::new(vec![2, 3, 4, 5], data.clone()).unwrap();
        // 1x1 kernel that copies channel c of the input to channel c of the output
        let mut k = vec![0.0; 9];
        k[0] = 1.0;
        k[4] = 1.0;
        k[8] = 1.0;
        let kernel = Tensor::new(vec![3, 3, 1, 1], k).unwrap();
        let out = run(input, kernel, 1, 0);
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn padding_and_stride_geometry() {
        let g = conv_geom(&[1, 1, 5, 5], &[2, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (3, 3));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let err = conv_geom(&[1, 2, 5, 5], &[1, 3, 3, 3], 1, 0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        assert!(conv_geom(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
    }
}
