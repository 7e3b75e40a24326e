//! Line-delimited dataset manifests.
//!
//! The first non-empty line declares the label vocabulary, every following
//! line is one record:
//!
//! ```text
//! {"vocabulary": ["stripes", "dots"]}
//! {"image_id": "a", "image_path": "images/a.ppm", "labels": ["dots"], "item_id": "x"}
//! ```
//!
//! `item_id` (retrieval ground truth) and `parts` (labelled pixel boxes) are
//! optional. Image paths are resolved relative to the manifest's directory
//! and only read when an image is requested.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppm::RgbImage;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PartBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection(&self, other: &PartBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledPart {
    pub label: String,
    #[serde(flatten)]
    pub bbox: PartBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    pub image_path: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<LabelledPart>,
}

impl Record {
    /// Retrieval identity; defaults to the image id.
    pub fn item(&self) -> &str {
        self.item_id.as_deref().unwrap_or(&self.image_id)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub vocabulary: Vec<String>,
    pub records: Vec<Record>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(vocabulary: Vec<String>, records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            vocabulary,
            records,
            base_dir: base_dir.into(),
        };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut seen = HashMap::new();
        for (i, v) in self.vocabulary.iter().enumerate() {
            if seen.insert(v.as_str(), i).is_some() {
                return Err(err(format!("duplicate vocabulary label {v:?}")));
            }
        }
        for r in &self.records {
            for l in r.labels.iter().chain(r.parts.iter().map(|p| &p.label)) {
                if !seen.contains_key(l.as_str()) {
                    return Err(err(format!(
                        "record {:?} has label {l:?} outside the vocabulary",
                        r.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (n, first) = lines.next().ok_or_else(|| err(1, "missing vocabulary header".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| err(n, e.to_string()))?;
        let records = lines
            .map(|(n, l)| serde_json::from_str::<Record>(l).map_err(|e| err(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest {
            vocabulary: header.vocabulary,
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate(path)?;
        Ok(m)
    }

    pub fn to_lines(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            vocabulary: self.vocabulary.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == label)
    }

    /// Multi-hot target over the vocabulary.
    pub fn target(&self, record: &Record) -> Vec<f64> {
        let mut t = vec![0.0; self.vocabulary.len()];
        for l in &record.labels {
            if let Some(i) = self.label_index(l) {
                t[i] = 1.0;
            }
        }
        t
    }

    pub fn label_indices(&self, record: &Record) -> Vec<usize> {
        let mut v: Vec<usize> = record.labels.iter().filter_map(|l| self.label_index(l)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.base_dir.join(&record.image_path)
    }

    pub fn load_image(&self, record: &Record) -> Result<RgbImage> {
        RgbImage::read(&self.image_path(record))
    }

    /// Decodes the record's image and checks it against the model input size.
    pub fn load_tensor(&self, record: &Record, height: usize, width: usize) -> Result<Tensor> {
        let img = self.load_image(record)?;
        if img.height != height || img.width != width {
            return Err(Error::Image {
                path: self.image_path(record),
                message: format!(
                    "size {}x{} does not match the configured input {height}x{width}",
                    img.height, img.width
                ),
            });
        }
        Ok(img.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_record_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::load(write(dir.path(), "{\"vocabulary\": [\"a\"]}\n")).unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.vocabulary, vec!["a"]);
    }

    #[test]
    fn unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "{\"vocabulary\": [\"a\"]}\n{\"image_id\": \"r7\", \"image_path\": \"x.ppm\", \"labels\": [\"zebra\"]}\n",
        );
        let err = DatasetManifest::load(p).unwrap_err().to_string();
        assert!(err.contains("zebra") && err.contains("r7"), "{err}");
    }

    #[test]
    fn missing_image_fails_on_access_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "{\"vocabulary\": [\"a\", \"b\"]}\n{\"image_id\": \"r\", \"image_path\": \"nope.ppm\", \"labels\": [\"b\"]}\n",
        );
        let m = DatasetManifest::load(p).unwrap();
        assert_eq!(m.target(&m.records[0]), vec![0.0, 1.0]);
        assert!(m.load_image(&m.records[0]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Record {
            image_id: "i".into(),
            image_path: "i.ppm".into(),
            labels: vec!["a".into()],
            item_id: Some("item".into()),
            parts: vec![LabelledPart {
                label: "a".into(),
                bbox: PartBox { x0: 1, y0: 2, x1: 5, y1: 6 },
            }],
        };
        let m = DatasetManifest::new(vec!["a".into()], vec![rec], dir.path()).unwrap();
        let p = dir.path().join("out.jsonl");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.records[0].item(), "item");
    }
}
