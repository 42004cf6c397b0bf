//! Spatial pooling kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct MaxPoolOut {
    pub output: Tensor,
    /// Flat index into the input buffer of the winning element, one per output
    /// element. Ties go to the first index in window scan order.
    pub argmax: Vec<u32>,
}

pub fn maxpool2d_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<MaxPoolOut> {
    let (n, c, h, w) = input.dims4();
    if window == 0 || stride == 0 {
        return Err(Error::Config("maxpool window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "maxpool window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    let h_out = (h + 2 * padding - window) / stride + 1;
    let w_out = (w + 2 * padding - window) / stride + 1;

    let mut out = vec![0.0; n * c * h_out * w_out];
    let mut argmax = vec![0u32; out.len()];
    let data = input.data();
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for dy in 0..window {
                    let iy = (oy * stride + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..window {
                        let ix = (ox * stride + dx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = (nc * h * w + idx) as u32;
                        }
                    }
                }
                let o = nc * h_out * w_out + oy * w_out + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(MaxPoolOut {
        output: Tensor::new(vec![n, c, h_out, w_out], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_numel: usize, argmax: &[u32], grad_out: &[f64]) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_numel];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx as usize] += g;
    }
    grad_in
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2d_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("avgpool needs at least 2x2 input, got {h}x{w}")));
    }
    let h_out = h / 2;
    let w_out = w / 2;
    let mut out = vec![0.0; n * c * h_out * w_out];
    let data = input.data();
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        let out_plane = &mut out[nc * h_out * w_out..(nc + 1) * h_out * w_out];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let base = 2 * oy * w + 2 * ox;
                out_plane[oy * w_out + ox] =
                    0.25 * (plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, h_out, w_out], out)
}

pub fn avgpool2d_backward(input_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let h_out = h / 2;
    let w_out = w / 2;
    let mut grad_in = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let gin = &mut grad_in[nc * h * w..(nc + 1) * h * w];
        let gout = &grad_out[nc * h_out * w_out..(nc + 1) * h_out * w_out];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let g = 0.25 * gout[oy * w_out + ox];
                let base = 2 * oy * w + 2 * ox;
                gin[base] += g;
                gin[base + 1] += g;
                gin[base + w] += g;
                gin[base + w + 1] += g;
            }
        }
    }
    grad_in
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avg_pool_forward(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let area = (h * w) as f64;
    let mut out = vec![0.0; n * c];
    for (nc, o) in out.iter_mut().enumerate() {
        let plane = &input.data()[nc * h * w..(nc + 1) * h * w];
        *o = plane.iter().sum::<f64>() / area;
    }
    Tensor::new(vec![n, c], out).expect("gap shape")
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let area = (h * w) as f64;
    let mut grad_in = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let g = grad_out[nc] / area;
        grad_in[nc * h * w..(nc + 1) * h * w].fill(g);
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_window_maximum() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d_forward(&input, 2, 2, 0).unwrap();
        assert_eq!(out.output.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.output.data(), &[4.0]);
        assert_eq!(out.argmax, vec![3]);
    }

    #[test]
    fn maxpool_constant_image_halves_extent() {
        let input = Tensor::full(vec![2, 3, 6, 6], 1.5);
        let out = maxpool2d_forward(&input, 2, 2, 0).unwrap();
        assert_eq!(out.output.shape(), &[2, 3, 3, 3]);
        assert!(out.output.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
        let out = maxpool2d_forward(&input, 2, 2, 0).unwrap();
        assert_eq!(out.argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_small_input() {
        let input = Tensor::full(vec![1, 1, 1, 4], 0.0);
        assert!(maxpool2d_forward(&input, 2, 2, 0).is_err());
    }

    #[test]
    fn avgpool_averages_quads() {
        let input = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]).unwrap();
        let out = avgpool2d_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[2.5, 6.5]);
    }

    #[test]
    fn gap_means_each_plane() {
        let input = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]).unwrap();
        let out = global_avg_pool_forward(&input);
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.data(), &[2.0, 20.0]);
    }
}
