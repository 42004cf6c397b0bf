//! Training/validation streams: cached resized images, dataset mean, lateral
//! expansion, and per-entry deterministic augmentation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_n, rng_from};
use crate::tensor::Tensor;

use super::augment::{augment, AugmentConfig};
use super::image_io::load_image;
use super::manifest::{StudyRecord, ViewKind};
use super::resize::{caffe_preprocess, resize_bilinear};

/// One training example: a study plus an augmentation slot. `aug_copy`
/// `None` loads the image as-is; `Some(tag)` draws a fresh transform per
/// epoch from a stream keyed by (study, tag, epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainEntry {
    pub study_idx: usize,
    pub aug_copy: Option<u32>,
}

/// Frontal studies receive augmentation directly, one entry each.
pub fn frontal_entries(records: &[StudyRecord]) -> Vec<TrainEntry> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.has_view(ViewKind::Frontal))
        .map(|(i, _)| TrainEntry { study_idx: i, aug_copy: Some(0) })
        .collect()
}

/// Lateral studies are replicated into four entries: the original plus three
/// augmentation-tagged copies.
pub fn expand_lateral(records: &[StudyRecord]) -> Vec<TrainEntry> {
    let mut entries = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.has_view(ViewKind::Lateral) {
            entries.push(TrainEntry { study_idx: i, aug_copy: None });
            for tag in 1..=3 {
                entries.push(TrainEntry { study_idx: i, aug_copy: Some(tag) });
            }
        }
    }
    entries
}

/// Entries for evaluation: every study with the view, loaded clean.
pub fn eval_entries(records: &[StudyRecord], view: ViewKind) -> Vec<TrainEntry> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.has_view(view))
        .map(|(i, _)| TrainEntry { study_idx: i, aug_copy: None })
        .collect()
}

/// All images of one view, decoded and resized once. `base[i]` is `None`
/// when study `i` lacks the view.
pub struct PreparedImages {
    pub view: ViewKind,
    pub size: usize,
    pub base: Vec<Option<Tensor>>,
    /// Arithmetic mean of every pixel across the prepared split.
    pub mean_pixel: f64,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Decode, resize, and compute the split mean pixel. Relative manifest paths
/// are resolved against `root` (normally the manifest's directory).
pub fn prepare_images(
    records: &[StudyRecord],
    view: ViewKind,
    size: usize,
    root: &Path,
) -> Result<PreparedImages> {
    let mut base = Vec::with_capacity(records.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in records {
        match rec.path_for(view) {
            Some(p) => {
                let img = load_image(&resolve(root, p))?;
                let t = resize_bilinear(&img, size)?;
                sum += t.data().iter().sum::<f64>();
                count += t.numel();
                base.push(Some(t));
            }
            None => base.push(None),
        }
    }
    if count == 0 {
        return Err(Error::Config(format!("no {view} images in split")));
    }
    Ok(PreparedImages { view, size, base, mean_pixel: sum / count as f64 })
}

impl PreparedImages {
    /// Load one entry: optional augmentation (mean-filled borders), then
    /// mean subtraction. `mean_pixel` is the training-split mean, which for
    /// validation streams differs from this split's own mean.
    pub fn load_entry(
        &self,
        entry: &TrainEntry,
        aug: &AugmentConfig,
        mean_pixel: f64,
        run_seed: u64,
        epoch: u64,
    ) -> Result<Tensor> {
        let tensor = self.base[entry.study_idx]
            .as_ref()
            .ok_or_else(|| {
                Error::Config(format!("study {} lacks a {} view", entry.study_idx, self.view))
            })?;
        let loaded = match entry.aug_copy {
            Some(tag) => {
                let seed =
                    derive_seed_n(run_seed, &[entry.study_idx as u64, tag as u64, epoch]);
                augment(tensor, aug, mean_pixel, &mut rng_from(seed))?
            }
            None => tensor.clone(),
        };
        Ok(caffe_preprocess(&loaded, mean_pixel))
    }

    /// Stack entries into an [N, 1, S, S] batch.
    pub fn load_batch(
        &self,
        entries: &[TrainEntry],
        aug: &AugmentConfig,
        mean_pixel: f64,
        run_seed: u64,
        epoch: u64,
    ) -> Result<Tensor> {
        let n = entries.len();
        let mut data = Vec::with_capacity(n * self.size * self.size);
        for e in entries {
            let t = self.load_entry(e, aug, mean_pixel, run_seed, epoch)?;
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![n, 1, self.size, self.size], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::LabelState;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn synth(dir: &Path, n: usize) -> Vec<StudyRecord> {
        synth_generate(&SynthConfig {
            n_studies: n,
            image_size: 32,
            seed: 3,
            lateral_fraction: 0.5,
            uncertain_fraction: 0.0,
            out_dir: dir.to_path_buf(),
        })
        .unwrap()
        .records
    }

    #[test]
    fn lateral_expansion_quadruples_entries() {
        let rec = |lat: bool| StudyRecord {
            study_id: "s".into(),
            patient_id: "p".into(),
            frontal_path: Some("f.pgm".into()),
            lateral_path: lat.then(|| "l.pgm".into()),
            labels: [LabelState::Negative; 5],
        };
        let records: Vec<StudyRecord> = (0..10).map(|_| rec(true)).collect();
        assert_eq!(expand_lateral(&records).len(), 40);
        assert_eq!(expand_lateral(&[]).len(), 0);
        assert_eq!(frontal_entries(&records).len(), 10);
    }

    #[test]
    fn preprocessed_split_mean_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth(dir.path(), 8);
        let prep = prepare_images(&records, ViewKind::Frontal, 32, dir.path()).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in prep.base.iter().flatten() {
            sum += t.data().iter().map(|v| v - prep.mean_pixel).sum::<f64>();
            count += t.numel();
        }
        assert!((sum / count as f64).abs() < 1e-6);
    }

    #[test]
    fn stored_mean_matches_brute_force_recount() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth(dir.path(), 6);
        let prep = prepare_images(&records, ViewKind::Frontal, 32, dir.path()).unwrap();

        // independent recount straight from the files
        let mut sum = 0.0;
        let mut count = 0usize;
        for rec in &records {
            let img = load_image(&dir.path().join(rec.frontal_path.as_ref().unwrap())).unwrap();
            let t = resize_bilinear(&img, 32).unwrap();
            for &v in t.data() {
                sum += v;
                count += 1;
            }
        }
        assert!((prep.mean_pixel - sum / count as f64).abs() < 1e-9);
    }

    #[test]
    fn entry_loads_are_deterministic_per_seed_and_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth(dir.path(), 4);
        let prep = prepare_images(&records, ViewKind::Frontal, 32, dir.path()).unwrap();
        let entry = TrainEntry { study_idx: 0, aug_copy: Some(1) };
        let aug = AugmentConfig::default();
        let a = prep.load_entry(&entry, &aug, prep.mean_pixel, 9, 2).unwrap();
        let b = prep.load_entry(&entry, &aug, prep.mean_pixel, 9, 2).unwrap();
        let c = prep.load_entry(&entry, &aug, prep.mean_pixel, 9, 3).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }
}
