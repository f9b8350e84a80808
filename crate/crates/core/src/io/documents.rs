//! JSON annotation and model-config documents.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::density::PointAnnotations;
use crate::error::{Error, Result};
use crate::fusion::ModelConfig;

/// `{"image": "...", "width": W, "height": H, "points": [[x, y], ...]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl AnnotationDoc {
    pub fn from_annotations(image: impl Into<String>, ann: &PointAnnotations) -> Self {
        Self {
            image: image.into(),
            width: ann.width,
            height: ann.height,
            points: ann.points.iter().map(|&(x, y)| [x, y]).collect(),
        }
    }

    /// Checked conversion; out-of-bounds points are validation errors.
    pub fn to_annotations(&self) -> Result<PointAnnotations> {
        PointAnnotations::new(
            self.width,
            self.height,
            self.points.iter().map(|&[x, y]| (x, y)).collect(),
        )
    }
}

/// Byte offset of serde_json's 1-based line/column position.
fn json_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::format(json_offset(text, e.line(), e.column()), format!("{what}: {e}"))
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to(), "invalid UTF-8"))
}

pub fn parse_annotations(text: &str) -> Result<AnnotationDoc> {
    let doc: AnnotationDoc = parse_json(text, "annotation document")?;
    doc.to_annotations()?;
    Ok(doc)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationDoc> {
    parse_annotations(&read_text(path.as_ref())?)
}

/// Parses and validates a model config. Missing fields take defaults.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = parse_json(text, "config document")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    parse_config(&read_text(path.as_ref())?)
}

pub fn config_to_json(cfg: &ModelConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}
