//! Dataset manifests: one JSON record per line describing an image, its
//! optional class label, split and object boxes.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Plane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Unlabeled images for the generic layers.
    Natural,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<[f64; 4]>,
}

impl ImageRecord {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect()
    }

    /// Image identifier used in reports: the file stem.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// An image held in memory together with its annotations.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: Plane,
    pub class: Option<String>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut rec: ImageRecord = serde_json::from_str(&line)?;
            if rec.path.is_relative() {
                rec.path = base.join(&rec.path);
            }
            records.push(rec);
        }
        Ok(Manifest { records })
    }

    /// Write records with paths relative to the manifest's directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            let mut rec = rec.clone();
            if let Ok(rel) = rec.path.strip_prefix(base) {
                rec.path = rel.to_path_buf();
            }
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn select(&self, split: Split, class: Option<&str>) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && (class.is_none() || r.class.as_deref() == class))
            .collect()
    }

    /// Class labels in order of first appearance.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if let Some(c) = &r.class {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    pub fn load_images(records: &[&ImageRecord]) -> Result<Vec<LabeledImage>> {
        records
            .iter()
            .map(|r| {
                Ok(LabeledImage {
                    id: r.id(),
                    image: Plane::load(&r.path).map_err(|e| match e {
                        Error::Image(img) => Error::Corrupt(format!("{}: {img}", r.path.display())),
                        other => other,
                    })?,
                    class: r.class.clone(),
                    boxes: r.bboxes(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            records: vec![
                ImageRecord {
                    path: dir.path().join("a.png"),
                    class: Some("mug".into()),
                    split: Split::Train,
                    boxes: vec![[1.0, 2.0, 30.0, 40.0]],
                },
                ImageRecord {
                    path: dir.path().join("n.png"),
                    class: None,
                    split: Split::Natural,
                    boxes: vec![],
                },
            ],
        };
        let p = dir.path().join("manifest.jsonl");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"path\":\"a.png\""));
        assert_eq!(Manifest::load(&p).unwrap(), m);
        assert_eq!(m.classes(), vec!["mug".to_string()]);
        assert_eq!(m.select(Split::Natural, None).len(), 1);
    }
}
