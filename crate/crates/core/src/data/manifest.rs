//! Study manifests: CSV parsing, grouping of per-view rows into studies, and
//! the label-state vocabulary.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

/// Pathology column order used everywhere in the crate.
pub const PATHOLOGIES: [&str; NUM_CLASSES] =
    ["Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelState {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
}

impl LabelState {
    pub fn parse(field: &str) -> Result<Self> {
        let trimmed = field.trim();
        if trimmed.is_empty() {
            return Ok(LabelState::Unmentioned);
        }
        let v: f64 = trimmed
            .parse()
            .map_err(|_| Error::Parse(format!("label value {trimmed:?} is not numeric")))?;
        if v == 1.0 {
            Ok(LabelState::Positive)
        } else if v == 0.0 {
            Ok(LabelState::Negative)
        } else if v == -1.0 {
            Ok(LabelState::Uncertain)
        } else {
            Err(Error::Parse(format!("label value {trimmed:?} is not 1.0, 0.0, -1.0 or blank")))
        }
    }

    pub fn manifest_field(self) -> &'static str {
        match self {
            LabelState::Positive => "1.0",
            LabelState::Negative => "0.0",
            LabelState::Uncertain => "-1.0",
            LabelState::Unmentioned => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewKind {
    Frontal,
    Lateral,
}

impl ViewKind {
    pub fn parse(field: &str) -> Result<Self> {
        match field.trim() {
            "Frontal" => Ok(ViewKind::Frontal),
            "Lateral" => Ok(ViewKind::Lateral),
            other => Err(Error::Parse(format!("view {other:?} is neither Frontal nor Lateral"))),
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewKind::Frontal => write!(f, "Frontal"),
            ViewKind::Lateral => write!(f, "Lateral"),
        }
    }
}

/// One patient study with up to two view images and five label states.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub frontal_path: Option<PathBuf>,
    pub lateral_path: Option<PathBuf>,
    pub labels: [LabelState; NUM_CLASSES],
}

impl StudyRecord {
    pub fn path_for(&self, view: ViewKind) -> Option<&Path> {
        match view {
            ViewKind::Frontal => self.frontal_path.as_deref(),
            ViewKind::Lateral => self.lateral_path.as_deref(),
        }
    }

    pub fn has_view(&self, view: ViewKind) -> bool {
        self.path_for(view).is_some()
    }
}

/// Study key: the directory containing the image. Patient id: that
/// directory's parent component.
fn study_key(image_path: &str) -> (String, String) {
    let path = Path::new(image_path);
    let study_dir = path.parent().unwrap_or_else(|| Path::new(""));
    let study_id = study_dir.to_string_lossy().into_owned();
    let patient_id = study_dir
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    (study_id, patient_id)
}

fn split_line(line: &str) -> Vec<&str> {
    line.trim_end_matches('\r').split(',').collect()
}

/// Parse a manifest CSV into study records, grouping frontal/lateral rows of
/// the same study directory. Row order determines study order; extra columns
/// beyond the required set are ignored.
pub fn parse_manifest(csv_path: &Path) -> Result<Vec<StudyRecord>> {
    let content = std::fs::read_to_string(csv_path)?;
    parse_manifest_str(&content)
}

pub fn parse_manifest_str(content: &str) -> Result<Vec<StudyRecord>> {
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("manifest is empty".into()))?;
    let columns = split_line(header);

    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Parse(format!("manifest is missing required column {name:?}")))
    };
    let path_col = find("Path")?;
    let view_col = find("Frontal/Lateral")?;
    let label_cols: Vec<usize> = PATHOLOGIES
        .iter()
        .map(|p| find(p))
        .collect::<Result<_>>()?;

    let mut records: Vec<StudyRecord> = Vec::new();
    let mut index_of: std::collections::HashMap<String, usize> = std::collections::HashMap::new();

    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_line(line);
        let need = *[path_col, view_col, label_cols[NUM_CLASSES - 1]]
            .iter()
            .chain(label_cols.iter())
            .max()
            .unwrap();
        if fields.len() <= need {
            return Err(Error::Parse(format!(
                "manifest line {} has {} fields, expected at least {}",
                line_no + 2,
                fields.len(),
                need + 1
            )));
        }
        let image_path = fields[path_col].trim();
        let view = ViewKind::parse(fields[view_col])?;
        let mut labels = [LabelState::Unmentioned; NUM_CLASSES];
        for (slot, &col) in labels.iter_mut().zip(&label_cols) {
            *slot = LabelState::parse(fields[col])?;
        }

        let (study_id, patient_id) = study_key(image_path);
        let idx = *index_of.entry(study_id.clone()).or_insert_with(|| {
            records.push(StudyRecord {
                study_id,
                patient_id,
                frontal_path: None,
                lateral_path: None,
                labels,
            });
            records.len() - 1
        });
        let rec = &mut records[idx];
        match view {
            ViewKind::Frontal => rec.frontal_path = Some(PathBuf::from(image_path)),
            ViewKind::Lateral => rec.lateral_path = Some(PathBuf::from(image_path)),
        }
    }

    for rec in &records {
        if rec.frontal_path.is_none() && rec.lateral_path.is_none() {
            return Err(Error::Parse(format!("study {} has no view image", rec.study_id)));
        }
    }
    Ok(records)
}

pub fn write_manifest(records: &[StudyRecord], csv_path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("Path,Frontal/Lateral");
    for p in PATHOLOGIES {
        out.push(',');
        out.push_str(p);
    }
    out.push('\n');
    for rec in records {
        for (path, view) in [(&rec.frontal_path, "Frontal"), (&rec.lateral_path, "Lateral")] {
            if let Some(path) = path {
                out.push_str(&path.to_string_lossy());
                out.push(',');
                out.push_str(view);
                for label in rec.labels {
                    out.push(',');
                    out.push_str(label.manifest_field());
                }
                out.push('\n');
            }
        }
    }
    std::fs::write(csv_path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Path,Frontal/Lateral,Atelectasis,Cardiomegaly,Consolidation,Edema,Pleural Effusion";

    #[test]
    fn uncertain_value_parses_to_uncertain_state() {
        let csv = format!("{HEADER}\nimg/p1/s1/f.pgm,Frontal,1.0,0.0,-1.0,,0.0\n");
        let recs = parse_manifest_str(&csv).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].labels[2], LabelState::Uncertain);
        assert_eq!(recs[0].labels[3], LabelState::Unmentioned);
    }

    #[test]
    fn all_blank_labels_are_unmentioned() {
        let csv = format!("{HEADER}\nimg/p1/s1/f.pgm,Frontal,,,,,\n");
        let recs = parse_manifest_str(&csv).unwrap();
        assert!(recs[0].labels.iter().all(|&l| l == LabelState::Unmentioned));
    }

    #[test]
    fn two_views_of_one_study_group_into_one_record() {
        let csv = format!(
            "{HEADER}\nimg/p1/s1/f.pgm,Frontal,1.0,0.0,0.0,0.0,0.0\nimg/p1/s1/l.pgm,Lateral,1.0,0.0,0.0,0.0,0.0\n"
        );
        let recs = parse_manifest_str(&csv).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].frontal_path.is_some());
        assert!(recs[0].lateral_path.is_some());
        assert_eq!(recs[0].patient_id, "p1");
    }

    #[test]
    fn missing_column_is_an_error() {
        let csv = "Path,Frontal/Lateral,Atelectasis\nimg/f.pgm,Frontal,1.0\n";
        assert!(parse_manifest_str(csv).is_err());
    }

    #[test]
    fn garbage_label_value_is_an_error() {
        let csv = format!("{HEADER}\nimg/p1/s1/f.pgm,Frontal,2.0,0.0,0.0,0.0,0.0\n");
        assert!(parse_manifest_str(&csv).is_err());
    }

    #[test]
    fn integer_spelling_of_labels_is_accepted() {
        let csv = format!("{HEADER}\nimg/p1/s1/f.pgm,Frontal,1,0,-1,0,1\n");
        let recs = parse_manifest_str(&csv).unwrap();
        assert_eq!(recs[0].labels[0], LabelState::Positive);
        assert_eq!(recs[0].labels[2], LabelState::Uncertain);
    }

    #[test]
    fn extra_columns_are_ignored() {
        let csv = format!(
            "Sex,{HEADER},Age\nF,img/p1/s1/f.pgm,Frontal,1.0,0.0,0.0,0.0,0.0,63\n"
        );
        let recs = parse_manifest_str(&csv).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].labels[0], LabelState::Positive);
    }
}
