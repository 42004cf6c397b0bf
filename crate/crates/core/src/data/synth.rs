//! Synthetic chest-image dataset with planted per-class signatures, for
//! desk-scale training runs and activation-map localization checks.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_n, rng_from};

use super::image_io::{write_pgm, ImageBuffer};
use super::manifest::{write_manifest, LabelState, StudyRecord, NUM_CLASSES};

/// Per-class probability that a study is positive. Deliberately unequal so
/// class weighting is exercised.
pub const CLASS_POSITIVE_RATES: [f64; NUM_CLASSES] = [0.45, 0.30, 0.40, 0.35, 0.25];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_studies: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of studies that also carry a lateral view.
    pub lateral_fraction: f64,
    /// Per-class fraction of manifest cells overwritten with -1.0.
    pub uncertain_fraction: f64,
    pub out_dir: PathBuf,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_studies == 0 {
            return Err(Error::Config("n_studies must be positive".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        for (name, v) in [
            ("lateral_fraction", self.lateral_fraction),
            ("uncertain_fraction", self.uncertain_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub boxes_path: PathBuf,
    pub records: Vec<StudyRecord>,
    /// Underlying truth per study, before uncertainty injection.
    pub truth: Vec<[bool; NUM_CLASSES]>,
}

/// Signature geometry per class, in unit image coordinates.
struct Signature {
    cx: f64,
    cy: f64,
    shape: Shape,
}

enum Shape {
    Disk { r: f64 },
    Ellipse { rx: f64, ry: f64 },
    Square { half: f64 },
    Ring { r_out: f64, r_in: f64 },
}

fn class_signature(class: usize) -> Signature {
    match class {
        0 => Signature { cx: 0.30, cy: 0.25, shape: Shape::Disk { r: 0.16 } },
        1 => Signature { cx: 0.50, cy: 0.62, shape: Shape::Ellipse { rx: 0.20, ry: 0.15 } },
        2 => Signature { cx: 0.72, cy: 0.30, shape: Shape::Square { half: 0.14 } },
        3 => Signature { cx: 0.28, cy: 0.68, shape: Shape::Ring { r_out: 0.16, r_in: 0.07 } },
        _ => Signature { cx: 0.72, cy: 0.72, shape: Shape::Disk { r: 0.15 } },
    }
}

const JITTER_FRACTION: f64 = 0.09;
const SIGNATURE_BRIGHTNESS: f64 = 85.0;
const NOISE_SIGMA: f64 = 10.0;

/// Inclusive pixel bounding box of one planted signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BlobBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

fn paint_background(pixels: &mut [f64], s: usize, lateral: bool) {
    let sf = s as f64;
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 / sf, y as f64 / sf);
            let mut v = if lateral { 52.0 } else { 58.0 };
            if lateral {
                // single broad lung field plus a bright posterior band
                let d = ((fx - 0.45) / 0.30).powi(2) + ((fy - 0.48) / 0.36).powi(2);
                if d < 1.0 {
                    v += 38.0;
                }
                if fx > 0.78 {
                    v += 30.0;
                }
            } else {
                // two lung fields and a mediastinal stripe
                for lung_cx in [0.30, 0.70] {
                    let d = ((fx - lung_cx) / 0.18).powi(2) + ((fy - 0.45) / 0.32).powi(2);
                    if d < 1.0 {
                        v += 38.0;
                    }
                }
                if (fx - 0.5).abs() < 0.06 {
                    v += 22.0;
                }
            }
            pixels[y * s + x] = v;
        }
    }
}

fn paint_signature(pixels: &mut [f64], s: usize, sig: &Signature, jx: f64, jy: f64) -> BlobBox {
    let sf = s as f64;
    let cx = (sig.cx + jx) * sf;
    let cy = (sig.cy + jy) * sf;
    let (ex, ey) = match sig.shape {
        Shape::Disk { r } => (r * sf, r * sf),
        Shape::Ellipse { rx, ry } => (rx * sf, ry * sf),
        Shape::Square { half } => (half * sf, half * sf),
        Shape::Ring { r_out, .. } => (r_out * sf, r_out * sf),
    };
    let clampi = |v: f64| -> usize { v.round().max(0.0).min(sf - 1.0) as usize };
    let bbox = BlobBox {
        x0: clampi(cx - ex),
        y0: clampi(cy - ey),
        x1: clampi(cx + ex),
        y1: clampi(cy + ey),
    };

    for y in bbox.y0..=bbox.y1 {
        for x in bbox.x0..=bbox.x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match sig.shape {
                Shape::Disk { r } => {
                    let rr = r * sf;
                    dx * dx + dy * dy <= rr * rr
                }
                Shape::Ellipse { rx, ry } => {
                    (dx / (rx * sf)).powi(2) + (dy / (ry * sf)).powi(2) <= 1.0
                }
                Shape::Square { .. } => true,
                Shape::Ring { r_out, r_in } => {
                    let d2 = dx * dx + dy * dy;
                    let (ro, ri) = (r_out * sf, r_in * sf);
                    d2 <= ro * ro && d2 >= ri * ri
                }
            };
            if inside {
                pixels[y * s + x] += SIGNATURE_BRIGHTNESS;
            }
        }
    }
    bbox
}

fn render_study_image(
    s: usize,
    truth: &[bool; NUM_CLASSES],
    jitter: &[(f64, f64); NUM_CLASSES],
    noise_seed: u64,
    lateral: bool,
) -> (ImageBuffer, Vec<(usize, BlobBox)>) {
    let mut pixels = vec![0.0f64; s * s];
    paint_background(&mut pixels, s, lateral);

    let mut boxes = Vec::new();
    for (class, &positive) in truth.iter().enumerate() {
        if positive {
            let sig = class_signature(class);
            let (jx, jy) = jitter[class];
            let bbox = paint_signature(&mut pixels, s, &sig, jx, jy);
            boxes.push((class, bbox));
        }
    }

    let mut rng = rng_from(noise_seed);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("sigma positive");
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    (ImageBuffer::new(s, s, bytes).expect("image extents"), boxes)
}

/// Pick exactly round(fraction * n) distinct indices, deterministically.
fn pick_indices(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let count = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let mut chosen = vec![false; n];
    for &i in order.iter().take(count.min(n)) {
        chosen[i] = true;
    }
    chosen
}

/// Generate the dataset tree: PGM images under images/, a manifest CSV, and
/// a sidecar CSV of planted-signature bounding boxes for the frontal view.
/// Fully deterministic for a fixed config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let n = cfg.n_studies;
    let s = cfg.image_size;

    let has_lateral = pick_indices(n, cfg.lateral_fraction, derive_seed(cfg.seed, 1));
    let uncertain: Vec<Vec<bool>> = (0..NUM_CLASSES)
        .map(|k| pick_indices(n, cfg.uncertain_fraction, derive_seed_n(cfg.seed, &[2, k as u64])))
        .collect();

    let mut records = Vec::with_capacity(n);
    let mut truth_all = Vec::with_capacity(n);
    let mut box_rows = String::from("study_id,class,x0,y0,x1,y1\n");

    for i in 0..n {
        let mut study_rng = rng_from(derive_seed_n(cfg.seed, &[3, i as u64]));
        let mut truth = [false; NUM_CLASSES];
        for (k, t) in truth.iter_mut().enumerate() {
            *t = study_rng.gen::<f64>() < CLASS_POSITIVE_RATES[k];
        }
        let mut jitter = [(0.0, 0.0); NUM_CLASSES];
        for j in jitter.iter_mut() {
            *j = (
                study_rng.gen_range(-JITTER_FRACTION..=JITTER_FRACTION),
                study_rng.gen_range(-JITTER_FRACTION..=JITTER_FRACTION),
            );
        }

        let rel_dir = format!("images/patient{i:05}/study1");
        let frontal_rel = format!("{rel_dir}/view1_frontal.pgm");
        let (frontal_img, boxes) = render_study_image(
            s,
            &truth,
            &jitter,
            derive_seed_n(cfg.seed, &[4, i as u64]),
            false,
        );
        write_pgm(&frontal_img, &cfg.out_dir.join(&frontal_rel))?;

        let study_id = rel_dir.clone();
        for (class, bbox) in &boxes {
            box_rows.push_str(&format!(
                "{study_id},{class},{},{},{},{}\n",
                bbox.x0, bbox.y0, bbox.x1, bbox.y1
            ));
        }

        let lateral_rel = if has_lateral[i] {
            let rel = format!("{rel_dir}/view2_lateral.pgm");
            let (lat_img, _) = render_study_image(
                s,
                &truth,
                &jitter,
                derive_seed_n(cfg.seed, &[5, i as u64]),
                true,
            );
            write_pgm(&lat_img, &cfg.out_dir.join(&rel))?;
            Some(rel)
        } else {
            None
        };

        let mut labels = [LabelState::Unmentioned; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            labels[k] = if uncertain[k][i] {
                LabelState::Uncertain
            } else if truth[k] {
                LabelState::Positive
            } else {
                LabelState::Negative
            };
        }

        records.push(StudyRecord {
            study_id,
            patient_id: format!("patient{i:05}"),
            frontal_path: Some(PathBuf::from(frontal_rel)),
            lateral_path: lateral_rel.map(PathBuf::from),
            labels,
        });
        truth_all.push(truth);
    }

    let manifest_path = cfg.out_dir.join("manifest.csv");
    write_manifest(&records, &manifest_path)?;
    let boxes_path = cfg.out_dir.join("boxes.csv");
    std::fs::write(&boxes_path, box_rows)?;

    Ok(SynthOutput { manifest_path, boxes_path, records, truth: truth_all })
}

/// Read the bounding-box sidecar back into a (study_id, class) map.
pub fn read_boxes(path: &Path) -> Result<HashMap<(String, usize), BlobBox>> {
    let content = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("boxes line {} has {} fields", i + 1, f.len())));
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad box coordinate {s:?}")))
        };
        let class = parse(f[1])?;
        map.insert(
            (f[0].to_string(), class),
            BlobBox { x0: parse(f[2])?, y0: parse(f[3])?, x1: parse(f[4])?, y1: parse(f[5])? },
        );
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, n: usize) -> SynthConfig {
        SynthConfig {
            n_studies: n,
            image_size: 32,
            seed: 11,
            lateral_fraction: 0.3,
            uncertain_fraction: 0.2,
            out_dir: dir.to_path_buf(),
        }
    }

    fn tree_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn same_seed_regenerates_identical_tree() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&cfg(d1.path(), 12)).unwrap();
        synth_generate(&cfg(d2.path(), 12)).unwrap();
        assert_eq!(tree_digest(d1.path()), tree_digest(d2.path()));
    }

    #[test]
    fn lateral_fraction_counts_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&cfg(dir.path(), 100)).unwrap();
        let lat = out.records.iter().filter(|r| r.lateral_path.is_some()).count();
        assert_eq!(lat, 30);
        assert!(out.records.iter().all(|r| r.frontal_path.is_some()));
    }

    #[test]
    fn uncertain_fraction_counts_exactly_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&cfg(dir.path(), 100)).unwrap();
        for k in 0..NUM_CLASSES {
            let unc = out
                .records
                .iter()
                .filter(|r| r.labels[k] == LabelState::Uncertain)
                .count();
            assert_eq!(unc, 20, "class {k}");
        }
    }

    #[test]
    fn boxes_cover_exactly_the_positive_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), 25);
        c.uncertain_fraction = 0.0;
        let out = synth_generate(&c).unwrap();
        let boxes = read_boxes(&out.boxes_path).unwrap();
        for (rec, truth) in out.records.iter().zip(&out.truth) {
            for (k, &pos) in truth.iter().enumerate() {
                assert_eq!(boxes.contains_key(&(rec.study_id.clone(), k)), pos);
            }
        }
    }

    #[test]
    fn manifest_round_trips_through_parser() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&cfg(dir.path(), 10)).unwrap();
        let parsed = super::super::manifest::parse_manifest(&out.manifest_path).unwrap();
        assert_eq!(parsed, out.records);
    }
}
