//! Bilinear resizing with pixel-center alignment, and mean-pixel centering.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image_io::ImageBuffer;

/// Resize to a square SxS tensor (shape [1, S, S]) holding raw intensities.
///
/// Sample coordinates map as x_src = (x_dst + 0.5) * W / S - 0.5, clamped to
/// the border. At equal sizes this is an exact copy.
pub fn resize_bilinear(image: &ImageBuffer, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Config("resize target must be at least 1".into()));
    }
    let (w, h) = (image.width, image.height);
    let mut out = vec![0.0f64; target * target];
    let sx = w as f64 / target as f64;
    let sy = h as f64 / target as f64;
    for y in 0..target {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..target {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let p00 = image.pixels[y0 * w + x0] as f64;
            let p01 = image.pixels[y0 * w + x1] as f64;
            let p10 = image.pixels[y1 * w + x0] as f64;
            let p11 = image.pixels[y1 * w + x1] as f64;
            let top = p00 + wx * (p01 - p00);
            let bot = p10 + wx * (p11 - p10);
            out[y * target + x] = top + wy * (bot - top);
        }
    }
    Tensor::new(vec![1, target, target], out)
}

/// Subtract the dataset mean pixel (zero centering).
pub fn caffe_preprocess(tensor: &Tensor, mean_pixel: f64) -> Tensor {
    let data = tensor.data().iter().map(|v| v - mean_pixel).collect();
    Tensor::new(tensor.shape().to_vec(), data).expect("preprocess shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = ImageBuffer::new(7, 7, vec![42; 49]).unwrap();
        for target in [1, 3, 7, 12] {
            let out = resize_bilinear(&img, target).unwrap();
            assert!(out.data().iter().all(|&v| v == 42.0));
        }
    }

    #[test]
    fn equal_size_resize_is_identity() {
        let pixels: Vec<u8> = (0..36).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageBuffer::new(6, 6, pixels.clone()).unwrap();
        let out = resize_bilinear(&img, 6).unwrap();
        for (o, p) in out.data().iter().zip(&pixels) {
            assert_eq!(*o, *p as f64);
        }
    }

    #[test]
    fn downscale_matches_hand_evaluated_bilinear() {
        // 4x4 gradient image: pixel(y, x) = 10*y + x
        let pixels: Vec<u8> = (0..16).map(|i| (10 * (i / 4) + i % 4) as u8).collect();
        let img = ImageBuffer::new(4, 4, pixels).unwrap();
        let out = resize_bilinear(&img, 2).unwrap();
        // Sample coordinate for dst 0: (0.5)*2 - 0.5 = 0.5; for dst 1: 2.5.
        // Interpolating the separable ramp gives value(fy, fx) = 10*fy + fx.
        let expect = [10.0 * 0.5 + 0.5, 10.0 * 0.5 + 2.5, 10.0 * 2.5 + 0.5, 10.0 * 2.5 + 2.5];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-9, "{o} vs {e}");
        }
    }

    #[test]
    fn resize_preserves_value_range() {
        let pixels: Vec<u8> = (0..64).map(|i| ((i * 37 + 11) % 256) as u8).collect();
        let img = ImageBuffer::new(8, 8, pixels.clone()).unwrap();
        let lo = *pixels.iter().min().unwrap() as f64;
        let hi = *pixels.iter().max().unwrap() as f64;
        for target in [3, 5, 8, 17] {
            let out = resize_bilinear(&img, target).unwrap();
            for &v in out.data() {
                assert!(v >= lo && v <= hi);
            }
        }
    }

    #[test]
    fn preprocess_subtracts_mean() {
        let t = Tensor::full(vec![1, 2, 2], 128.0);
        let out = caffe_preprocess(&t, 128.0);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let id = caffe_preprocess(&t, 0.0);
        assert_eq!(id.data(), t.data());
    }
}
