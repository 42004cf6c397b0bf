//! Random affine augmentation: small shifts, rotations, and zoom. Flips are
//! structurally impossible: the sampled transform is rotation times positive
//! scale, so its linear part always preserves orientation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Shift bound as a fraction of width/height, sampled in [-f, +f].
    pub max_shift_fraction: f64,
    /// Rotation sampled uniformly from this closed interval, in degrees.
    pub rotation_degrees: (f64, f64),
    /// Zoom factor sampled in [1-z, 1+z].
    pub zoom_fraction: f64,
    pub flips_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift_fraction: 0.10,
            rotation_degrees: (0.0, 3.0),
            zoom_fraction: 0.05,
            flips_enabled: false,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_shift_fraction: 0.0,
            rotation_degrees: (0.0, 0.0),
            zoom_fraction: 0.0,
            flips_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flips_enabled {
            return Err(Error::Config("flips are not a supported augmentation".into()));
        }
        if !(0.0..=0.5).contains(&self.max_shift_fraction) {
            return Err(Error::Config(format!(
                "shift fraction {} outside [0, 0.5]",
                self.max_shift_fraction
            )));
        }
        if self.rotation_degrees.0 > self.rotation_degrees.1 {
            return Err(Error::Config("rotation interval is reversed".into()));
        }
        if !(0.0..1.0).contains(&self.zoom_fraction) {
            return Err(Error::Config(format!("zoom fraction {} outside [0, 1)", self.zoom_fraction)));
        }
        Ok(())
    }
}

/// One drawn transform: dst = R(theta) * s * (src - c) + c + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSample {
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
    pub scale: f64,
}

impl AffineSample {
    pub const IDENTITY: AffineSample =
        AffineSample { shift_x: 0.0, shift_y: 0.0, rotation_deg: 0.0, scale: 1.0 };

    /// Forward linear part [[a, b], [c, d]].
    pub fn linear_matrix(&self) -> [f64; 4] {
        let r = self.rotation_deg.to_radians();
        let (sin, cos) = r.sin_cos();
        [self.scale * cos, -self.scale * sin, self.scale * sin, self.scale * cos]
    }

    /// True when the linear part cannot mirror the image: positive
    /// determinant and positive diagonal (rotation well below 90 degrees).
    pub fn preserves_orientation(&self) -> bool {
        let m = self.linear_matrix();
        let det = m[0] * m[3] - m[1] * m[2];
        det > 0.0 && m[0] > 0.0 && m[3] > 0.0
    }
}

/// Draw shift, rotation, and zoom for one image of extent `size`.
pub fn sample_transform(
    config: &AugmentConfig,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AffineSample> {
    config.validate()?;
    let max_shift = config.max_shift_fraction * size as f64;
    let sample_range = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> f64 {
        if lo == hi {
            // still consume one draw so streams stay aligned across configs
            let _ = rng.gen::<f64>();
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    };
    let shift_x = sample_range(rng, -max_shift, max_shift);
    let shift_y = sample_range(rng, -max_shift, max_shift);
    let rotation_deg = sample_range(rng, config.rotation_degrees.0, config.rotation_degrees.1);
    let scale = sample_range(rng, 1.0 - config.zoom_fraction, 1.0 + config.zoom_fraction);
    Ok(AffineSample { shift_x, shift_y, rotation_deg, scale })
}

/// Warp a [1, S, S] tensor by the sampled transform. Out-of-bounds samples
/// take `fill` (callers pass the dataset mean pixel).
pub fn apply_transform(input: &Tensor, sample: &AffineSample, fill: f64) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
        return Err(Error::Shape(format!("augment expects [1, S, S], got {shape:?}")));
    }
    let s = shape[1];
    let c = (s as f64 - 1.0) / 2.0;
    let r = sample.rotation_deg.to_radians();
    let (sin, cos) = r.sin_cos();
    let inv_scale = 1.0 / sample.scale;
    let data = input.data();
    let mut out = vec![0.0f64; s * s];

    for y in 0..s {
        for x in 0..s {
            // invert: src = R(-theta)/s_zoom * (dst - c - t) + c
            let dx = x as f64 - c - sample.shift_x;
            let dy = y as f64 - c - sample.shift_y;
            let sx = inv_scale * (cos * dx + sin * dy) + c;
            let sy = inv_scale * (-sin * dx + cos * dy) + c;

            out[y * s + x] = if sx < 0.0 || sy < 0.0 || sx > (s - 1) as f64 || sy > (s - 1) as f64 {
                fill
            } else {
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(s - 1);
                let y1 = (y0 + 1).min(s - 1);
                let wx = sx - x0 as f64;
                let wy = sy - y0 as f64;
                let top = data[y0 * s + x0] + wx * (data[y0 * s + x1] - data[y0 * s + x0]);
                let bot = data[y1 * s + x0] + wx * (data[y1 * s + x1] - data[y1 * s + x0]);
                top + wy * (bot - top)
            };
        }
    }
    Tensor::new(vec![1, s, s], out)
}

pub fn augment(
    input: &Tensor,
    config: &AugmentConfig,
    fill: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let size = input.shape().last().copied().unwrap_or(0);
    let sample = sample_transform(config, size, rng)?;
    apply_transform(input, &sample, fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn ramp(s: usize) -> Tensor {
        let data: Vec<f64> = (0..s * s).map(|i| i as f64).collect();
        Tensor::new(vec![1, s, s], data).unwrap()
    }

    #[test]
    fn zero_range_config_is_exact_identity() {
        let input = ramp(8);
        let mut rng = rng_from(5);
        let out = augment(&input, &AugmentConfig::identity(), 0.0, &mut rng).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn fixed_seed_gives_identical_outputs() {
        let input = ramp(16);
        let cfg = AugmentConfig::default();
        let a = augment(&input, &cfg, 10.0, &mut rng_from(99)).unwrap();
        let b = augment(&input, &cfg, 10.0, &mut rng_from(99)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn sampled_shifts_respect_the_ten_percent_bound() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_from(7);
        let size = 50;
        let bound = 0.10 * size as f64;
        for _ in 0..1000 {
            let s = sample_transform(&cfg, size, &mut rng).unwrap();
            assert!(s.shift_x.abs() <= bound && s.shift_y.abs() <= bound);
            assert!((cfg.rotation_degrees.0..=cfg.rotation_degrees.1).contains(&s.rotation_deg));
            assert!((0.95..=1.05).contains(&s.scale));
        }
    }

    #[test]
    fn no_sampled_transform_can_flip() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_from(13);
        for _ in 0..1000 {
            let s = sample_transform(&cfg, 64, &mut rng).unwrap();
            assert!(s.preserves_orientation());
        }
    }

    #[test]
    fn flips_enabled_is_rejected() {
        let cfg = AugmentConfig { flips_enabled: true, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_of_bounds_samples_use_fill() {
        let input = Tensor::full(vec![1, 4, 4], 100.0);
        let sample = AffineSample { shift_x: 10.0, shift_y: 0.0, rotation_deg: 0.0, scale: 1.0 };
        let out = apply_transform(&input, &sample, -1.0).unwrap();
        // the whole left portion now falls outside the source
        assert_eq!(out.data()[0], -1.0);
    }
}
