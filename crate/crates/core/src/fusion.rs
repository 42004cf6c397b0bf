//! Per-study combination of frontal and lateral model outputs by per-class
//! maximum probability, then thresholding into labels.

use std::path::Path;

use crate::data::manifest::{StudyRecord, ViewKind, NUM_CLASSES};
use crate::data::resize::{caffe_preprocess, resize_bilinear};
use crate::data::{load_image, PATHOLOGIES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPrediction {
    pub study_id: String,
    pub frontal: Option<[f64; NUM_CLASSES]>,
    pub lateral: Option<[f64; NUM_CLASSES]>,
    pub fused: [f64; NUM_CLASSES],
    pub labels: [u8; NUM_CLASSES],
}

/// Elementwise maximum over the available views' probability vectors.
pub fn fuse_max(vectors: &[[f64; NUM_CLASSES]]) -> Result<[f64; NUM_CLASSES]> {
    if vectors.is_empty() {
        return Err(Error::Config("fuse_max over zero views".into()));
    }
    let mut out = vectors[0];
    for v in &vectors[1..] {
        for (o, &x) in out.iter_mut().zip(v) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(out)
}

/// Threshold at [`LABEL_THRESHOLD`], boundary counted positive.
pub fn threshold_labels(fused: &[f64; NUM_CLASSES]) -> [u8; NUM_CLASSES] {
    let mut labels = [0u8; NUM_CLASSES];
    for (l, &p) in labels.iter_mut().zip(fused) {
        *l = u8::from(p >= LABEL_THRESHOLD);
    }
    labels
}

/// A model paired with the preprocessing constants it was trained with.
pub struct ViewModel {
    pub model: Model,
    pub view: ViewKind,
    pub mean_pixel: f64,
}

impl ViewModel {
    fn predict_image(&self, root: &Path, rel: &Path) -> Result<[f64; NUM_CLASSES]> {
        let path = if rel.is_absolute() { rel.to_path_buf() } else { root.join(rel) };
        let img = load_image(&path)?;
        let size = self.model.config.input_size;
        let resized = resize_bilinear(&img, size)?;
        let centered = caffe_preprocess(&resized, self.mean_pixel);
        let batch = Tensor::new(vec![1, 1, size, size], centered.data().to_vec())?;
        let mut tape = Tape::new();
        let trace = self.model.forward_eval(&mut tape, batch)?;
        let mut probs = [0.0; NUM_CLASSES];
        probs.copy_from_slice(tape.value(trace.probs).data());
        Ok(probs)
    }
}

/// Route each present view through its model and fuse. A view with no
/// matching model is an error only when nothing can be predicted at all.
pub fn predict_study(
    frontal_model: Option<&ViewModel>,
    lateral_model: Option<&ViewModel>,
    study: &StudyRecord,
    root: &Path,
) -> Result<StudyPrediction> {
    for (slot, expected) in [(frontal_model, ViewKind::Frontal), (lateral_model, ViewKind::Lateral)] {
        if let Some(vm) = slot {
            if vm.view != expected {
                return Err(Error::Config(format!(
                    "model trained for {} passed in the {} slot",
                    vm.view, expected
                )));
            }
        }
    }

    let frontal = match (frontal_model, study.path_for(ViewKind::Frontal)) {
        (Some(vm), Some(p)) => Some(vm.predict_image(root, p)?),
        _ => None,
    };
    let lateral = match (lateral_model, study.path_for(ViewKind::Lateral)) {
        (Some(vm), Some(p)) => Some(vm.predict_image(root, p)?),
        _ => None,
    };

    let views: Vec<[f64; NUM_CLASSES]> = frontal.into_iter().chain(lateral).collect();
    if views.is_empty() {
        return Err(Error::Config(format!(
            "study {}: no view image matches a provided model",
            study.study_id
        )));
    }
    let fused = fuse_max(&views)?;
    Ok(StudyPrediction {
        study_id: study.study_id.clone(),
        frontal,
        lateral,
        fused,
        labels: threshold_labels(&fused),
    })
}

/// Prediction dump: one row per (study, view) with that view's
/// probabilities, the fused probabilities, and the thresholded labels.
pub fn predictions_to_csv(predictions: &[StudyPrediction]) -> String {
    let mut out = String::from("study_id,view");
    for p in PATHOLOGIES {
        out.push_str(&format!(",{p}"));
    }
    for p in PATHOLOGIES {
        out.push_str(&format!(",fused_{p}"));
    }
    for p in PATHOLOGIES {
        out.push_str(&format!(",label_{p}"));
    }
    out.push('\n');
    for pred in predictions {
        for (view, probs) in [("Frontal", &pred.frontal), ("Lateral", &pred.lateral)] {
            if let Some(probs) = probs {
                out.push_str(&pred.study_id);
                out.push(',');
                out.push_str(view);
                for v in probs {
                    out.push_str(&format!(",{v}"));
                }
                for v in &pred.fused {
                    out.push_str(&format!(",{v}"));
                }
                for l in &pred.labels {
                    out.push_str(&format!(",{l}"));
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Parse a prediction dump back into per-study fused probabilities.
pub fn fused_from_csv(content: &str) -> Result<Vec<(String, [f64; NUM_CLASSES])>> {
    let mut out: Vec<(String, [f64; NUM_CLASSES])> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + 3 * NUM_CLASSES {
            return Err(Error::Parse(format!(
                "prediction line {} has {} fields, expected {}",
                i + 1,
                fields.len(),
                2 + 3 * NUM_CLASSES
            )));
        }
        let study_id = fields[0].to_string();
        if out.last().map(|(id, _)| id == &study_id).unwrap_or(false) {
            continue; // second view row of the same study repeats the fused block
        }
        let mut fused = [0.0; NUM_CLASSES];
        for (k, slot) in fused.iter_mut().enumerate() {
            *slot = fields[2 + NUM_CLASSES + k]
                .parse()
                .map_err(|_| Error::Parse(format!("bad fused probability on line {}", i + 1)))?;
        }
        out.push((study_id, fused));
    }
    Ok(out)
}
