//! Dataset layout on disk:
//! `<root>/dataset.json` plus, per split, `<split>/images/<idx>.pgm` and
//! `<split>/annotations.jsonl` (one line per image).

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Family, SplitCounts, SynthConfig, SynthError};
use crate::geometry::{Annotation, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Wire form of one annotation line; boxes are flattened.
#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    class: usize,
    x: f32,
    y: f32,
    w: f32,
    h: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineRecord {
    image: String,
    boxes: Vec<BoxRecord>,
}

/// One image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// File name under `<split>/images/`.
    pub image: String,
    pub boxes: Vec<Annotation>,
}

/// In-memory view of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn annotations_path(&self) -> PathBuf {
        self.root.join(self.split.as_str()).join("annotations.jsonl")
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root
            .join(self.split.as_str())
            .join("images")
            .join(&entry.image)
    }

    pub fn save_annotations(&self) -> Result<(), SynthError> {
        let path = self.annotations_path();
        let io_err = |source| SynthError::IoFailure {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(&path).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        for entry in &self.entries {
            let record = LineRecord {
                image: entry.image.clone(),
                boxes: entry
                    .boxes
                    .iter()
                    .map(|a| BoxRecord {
                        class: a.class_id,
                        x: a.bbox.x,
                        y: a.bbox.y,
                        w: a.bbox.w,
                        h: a.bbox.h,
                    })
                    .collect(),
            };
            let line = serde_json::to_string(&record).expect("annotation serializes");
            out.write_all(line.as_bytes()).map_err(io_err)?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Total ground-truth boxes across the split.
    pub fn num_boxes(&self) -> usize {
        self.entries.iter().map(|e| e.boxes.len()).sum()
    }
}

/// Dataset-level metadata stored at `<root>/dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub format_version: u32,
    pub family: Family,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub seed: u64,
    /// Mean of train pixels in [0,1] units.
    pub pixel_mean: f64,
    /// Std-dev of train pixels in [0,1] units.
    pub pixel_std: f64,
    pub counts: SplitCounts,
    pub config: SynthConfig,
}

impl DatasetInfo {
    pub fn save(&self, root: &Path) -> Result<(), SynthError> {
        let path = root.join("dataset.json");
        let body = serde_json::to_string_pretty(self).expect("info serializes");
        fs::write(&path, body).map_err(|source| SynthError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_dataset_info(root: &Path) -> Result<DatasetInfo, SynthError> {
    let path = root.join("dataset.json");
    let body = fs::read_to_string(&path).map_err(|source| SynthError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|e| SynthError::ParseFailure {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Load one split, validating that every referenced image exists and every
/// box is well-formed and inside the image bounds.
pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest, SynthError> {
    let info = load_dataset_info(root)?;
    let n = info.image_size as f32;
    let path = root.join(split.as_str()).join("annotations.jsonl");
    let file = fs::File::open(&path).map_err(|source| SynthError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    let file_name = path.display().to_string();
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| SynthError::IoFailure {
            path: file_name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LineRecord =
            serde_json::from_str(&line).map_err(|e| SynthError::ParseFailure {
                file: file_name.clone(),
                line: line_no,
                msg: e.to_string(),
            })?;
        let image_path = root.join(split.as_str()).join("images").join(&record.image);
        if !image_path.is_file() {
            return Err(SynthError::ValidationFailure {
                file: file_name.clone(),
                line: line_no,
                index: 0,
                msg: format!("image file '{}' missing", record.image),
            });
        }
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for (index, b) in record.boxes.iter().enumerate() {
            let bbox = BBox::new(b.x, b.y, b.w, b.h);
            if !bbox.is_valid_within(n, n) {
                return Err(SynthError::ValidationFailure {
                    file: file_name.clone(),
                    line: line_no,
                    index,
                    msg: format!(
                        "box ({}, {}, {}, {}) degenerate or outside {n}x{n}",
                        b.x, b.y, b.w, b.h
                    ),
                });
            }
            boxes.push(Annotation {
                class_id: b.class,
                bbox,
            });
        }
        entries.push(ManifestEntry {
            image: record.image,
            boxes,
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
    })
}
