//! 8-bit grayscale image decode/encode: binary PGM (P5) and grayscale PNG.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "image buffer {width}x{height} does not match {} pixels",
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => load_pgm(path),
        "png" => load_png(path),
        other => Err(Error::UnsupportedFormat(format!(
            "image extension {other:?} (expected pgm or png): {}",
            path.display()
        ))),
    }
}

fn load_pgm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse binary PGM. Comments after tokens are honored per the format: any
/// `#` starts a comment running to end of line.
fn parse_pgm(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-ascii PGM header".into()))?;
        tokens.push(
            tok.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header token {tok:?}")))?,
        );
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}, only 8-bit (255) supported"
        )));
    }
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "truncated PGM raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    ImageBuffer::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn write_pgm(image: &ImageBuffer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.pixels)?;
    Ok(())
}

/// 16-bit PGM (maxval 65535, big-endian samples), used for raw heatmap dumps.
pub fn write_pgm16(width: usize, height: usize, samples: &[u16], path: &Path) -> Result<()> {
    if samples.len() != width * height {
        return Err(Error::Shape("pgm16 sample count mismatch".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n65535\n")?;
    let mut raster = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        raster.extend_from_slice(&s.to_be_bytes());
    }
    f.write_all(&raster)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<ImageBuffer> {
    let dynimg = image::open(path)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            ImageBuffer::new(w, h, img.into_raw())
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{}: PNG color type {:?}, only 8-bit grayscale supported",
            path.display(),
            other.color()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_decode_is_pixel_exact() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 255, 128, 64]);
    }

    #[test]
    fn pgm_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = ImageBuffer::new(3, 2, vec![1, 2, 3, 250, 128, 0]).unwrap();
        write_pgm(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_pgm_is_rejected_on_load() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00";
        assert!(matches!(parse_pgm(bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        let bytes = b"P5\n4 4\n255\n\x00\x01";
        assert!(matches!(parse_pgm(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn color_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([10, 20, 30]));
        img.save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn grayscale_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = image::GrayImage::from_raw(2, 2, vec![0, 255, 7, 99]).unwrap();
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.pixels, vec![0, 255, 7, 99]);
    }
}
