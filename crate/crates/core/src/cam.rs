//! Gradient-weighted class activation maps over the final dense block's
//! feature maps, with heatmap overlay export.

use std::path::Path;

use crate::data::image_io::{write_pgm16, ImageBuffer};
use crate::data::manifest::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Normalized activation map at the final feature maps' spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub class_index: usize,
    pub height: usize,
    pub width: usize,
    /// Values in [0, 1]; all zero when the map has no positive activation.
    pub values: Vec<f64>,
}

/// Compute the activation map for one class on one preprocessed image
/// (shape [1, S, S], already mean-centered).
///
/// The chosen class's pre-sigmoid logit is backpropagated to the final dense
/// block's output; channel weights are the spatially averaged gradients; the
/// map is the ReLU of the weighted channel sum, normalized by its maximum.
pub fn grad_cam(model: &Model, image: &Tensor, class_index: usize) -> Result<Heatmap> {
    if class_index >= NUM_CLASSES {
        return Err(Error::Config(format!("class index {class_index} out of range")));
    }
    if !model.all_finite() {
        return Err(Error::Numeric("model parameters are not finite".into()));
    }
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Shape(format!("expected [1, S, S] image, got {shape:?}")));
    }
    let batch = Tensor::new(vec![1, 1, shape[1], shape[2]], image.data().to_vec())?;

    let mut tape = Tape::new();
    let trace = model.forward_eval(&mut tape, batch)?;
    let mut seed = Tensor::zeros(vec![1, NUM_CLASSES]);
    seed.data_mut()[class_index] = 1.0;
    tape.backward_seeded(trace.logits, seed)?;

    let activations = tape.value(trace.last_block);
    let (_, c, h, w) = activations.dims4();
    let area = h * w;
    let zeros;
    let grads = match tape.grad(trace.last_block) {
        Some(g) => g.data(),
        None => {
            zeros = vec![0.0; c * area];
            &zeros
        }
    };

    let mut map = vec![0.0f64; area];
    for ci in 0..c {
        let g_plane = &grads[ci * area..(ci + 1) * area];
        let a_plane = &activations.data()[ci * area..(ci + 1) * area];
        let weight = g_plane.iter().sum::<f64>() / area as f64;
        for (m, &a) in map.iter_mut().zip(a_plane) {
            *m += weight * a;
        }
    }
    for m in map.iter_mut() {
        *m = m.max(0.0);
    }
    let peak = map.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for m in map.iter_mut() {
            *m /= peak;
        }
    }
    Ok(Heatmap { class_index, height: h, width: w, values: map })
}

/// Bilinear upsampling of the heatmap grid with pixel-center alignment.
pub fn upsample(heatmap: &Heatmap, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (heatmap.width, heatmap.height);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v = &heatmap.values;
            let top = v[y0 * w + x0] + wx * (v[y0 * w + x1] - v[y0 * w + x0]);
            let bot = v[y1 * w + x0] + wx * (v[y1 * w + x1] - v[y1 * w + x0]);
            out[y * out_w + x] = top + wy * (bot - top);
        }
    }
    out
}

/// First position of the maximum value, as (x, y).
pub fn argmax_position(values: &[f64], width: usize) -> (usize, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut pos = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v > best {
            best = v;
            pos = (i % width, i / width);
        }
    }
    pos
}

/// Monotone heat colormap: black through red and orange to white.
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (3.0 * v).min(1.0);
    let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
    [r, g, b]
}

pub const OVERLAY_OPACITY: f64 = 0.4;

/// Blend the upsampled heatmap over the grayscale image at 40% opacity and
/// write a PNG. Output dimensions equal the input image's.
pub fn overlay_export(heatmap: &Heatmap, image: &ImageBuffer, out_path: &Path) -> Result<()> {
    let up = upsample(heatmap, image.width, image.height);
    let mut rgb = Vec::with_capacity(image.width * image.height * 3);
    for (i, &px) in image.pixels.iter().enumerate() {
        let gray = px as f64;
        let heat = colormap(up[i]);
        for channel in heat {
            let blended = (1.0 - OVERLAY_OPACITY) * gray + OVERLAY_OPACITY * (channel * 255.0);
            rgb.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let img = image::RgbImage::from_raw(image.width as u32, image.height as u32, rgb)
        .expect("buffer sized to dimensions");
    img.save(out_path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", out_path.display()))))
}

/// Raw heatmap as a 16-bit PGM, values scaled onto [0, 65535].
pub fn heatmap_to_pgm16(heatmap: &Heatmap, out_path: &Path) -> Result<()> {
    let samples: Vec<u16> = heatmap
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pgm16(heatmap.width, heatmap.height, &samples, out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_micro, Model, ModelConfig};

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            input_size: 32,
            block_layer_counts: vec![1, 1],
            growth_rate: 4,
            stem_channels: 4,
            ..preset_micro()
        };
        Model::build(&cfg, 5).unwrap()
    }

    fn test_image(s: usize) -> Tensor {
        let data: Vec<f64> = (0..s * s).map(|i| ((i * 31 % 97) as f64) - 40.0).collect();
        Tensor::new(vec![1, s, s], data).unwrap()
    }

    #[test]
    fn heatmap_extent_matches_last_feature_map() {
        let model = tiny_model();
        let hm = grad_cam(&model, &test_image(32), 0).unwrap();
        // 32 -> stem conv 16 -> pool 8 -> one transition 4
        assert_eq!((hm.height, hm.width), (4, 4));
        assert!(hm.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn normalization_peaks_at_one_when_positive() {
        let model = tiny_model();
        for class in 0..NUM_CLASSES {
            let hm = grad_cam(&model, &test_image(32), class).unwrap();
            let peak = hm.values.iter().cloned().fold(0.0f64, f64::max);
            assert!(peak == 1.0 || peak == 0.0, "class {class} peak {peak}");
        }
    }

    #[test]
    fn positive_rescale_of_head_row_leaves_map_unchanged() {
        let mut model = tiny_model();
        let image = test_image(32);
        let before = grad_cam(&model, &image, 2).unwrap();

        let idx = model.param_index("head.linear.weight").unwrap();
        let cols = model.params()[idx].value.shape()[1];
        for j in 0..cols {
            model.param_mut(idx).value.data_mut()[2 * cols + j] *= 7.5;
        }
        let after = grad_cam(&model, &image, 2).unwrap();
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_head_row_yields_all_zero_map() {
        let mut model = tiny_model();
        let widx = model.param_index("head.linear.weight").unwrap();
        let cols = model.params()[widx].value.shape()[1];
        for j in 0..cols {
            model.param_mut(widx).value.data_mut()[1 * cols + j] = 0.0;
        }
        let bidx = model.param_index("head.linear.bias").unwrap();
        model.param_mut(bidx).value.data_mut()[1] = 0.0;

        let hm = grad_cam(&model, &test_image(32), 1).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_parameters_are_rejected() {
        let mut model = tiny_model();
        model.param_mut(0).value.data_mut()[0] = f64::NAN;
        assert!(grad_cam(&model, &test_image(32), 0).is_err());
    }

    #[test]
    fn overlay_matches_image_dimensions_and_is_deterministic() {
        let hm = Heatmap { class_index: 0, height: 2, width: 2, values: vec![0.0, 1.0, 0.5, 0.2] };
        let img = ImageBuffer::new(8, 6, vec![100; 48]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        overlay_export(&hm, &img, &p1).unwrap();
        overlay_export(&hm, &img, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        let decoded = image::open(&p1).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (8, 6));
    }

    #[test]
    fn zero_heatmap_overlay_is_pure_grayscale_blend() {
        let hm = Heatmap { class_index: 0, height: 2, width: 2, values: vec![0.0; 4] };
        let img = ImageBuffer::new(4, 4, vec![200; 16]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        overlay_export(&hm, &img, &p).unwrap();
        let decoded = image::open(&p).unwrap().to_rgb8();
        // zero heat maps to black, so each channel is 0.6 * gray
        for px in decoded.pixels() {
            assert_eq!(px.0, [120, 120, 120]);
        }
    }
}
