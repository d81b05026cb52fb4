//! Per-frame parameter records and their JSONL encoding.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{GlobalPlacement, PoseParams, ShapeParams};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

/// Pose, shape and placement of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub placement: GlobalPlacement,
}

/// One frame of a sequence. Input records flagged invalid carry no
/// parameters; after gap filling they keep `valid = false` but hold the
/// interpolated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: u64,
    pub valid: bool,
    pub params: Option<FrameParams>,
    /// Mask path relative to the bundle directory.
    pub mask: Option<String>,
}

impl FrameRecord {
    pub fn invalid(index: u64, mask: Option<String>) -> Self {
        Self { index, valid: false, params: None, mask }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    index: u64,
    valid: bool,
    pose: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    scale: Option<f64>,
    rotation: Option<[f64; 3]>,
    translation: Option<[f64; 3]>,
    mask: Option<String>,
}

impl From<&FrameRecord> for Line {
    fn from(r: &FrameRecord) -> Self {
        let p = r.params.as_ref();
        Line {
            index: r.index,
            valid: r.valid,
            pose: p.map(|p| p.pose.0.clone()),
            beta: p.map(|p| p.shape.beta.clone()),
            scale: p.map(|p| p.shape.scale),
            rotation: p.map(|p| p.placement.rotation.into()),
            translation: p.map(|p| p.placement.translation.into()),
            mask: r.mask.clone(),
        }
    }
}

impl Line {
    fn into_record(self, line: usize) -> Result<FrameRecord, RecordError> {
        let params = match (self.pose, self.beta, self.scale, self.rotation, self.translation) {
            (Some(pose), Some(beta), Some(scale), Some(r), Some(t)) => Some(FrameParams {
                pose: PoseParams(pose),
                shape: ShapeParams { beta, scale },
                placement: GlobalPlacement { rotation: Vector3::from(r), translation: Vector3::from(t) },
            }),
            (None, None, None, None, None) => None,
            _ => {
                return Err(RecordError::Invalid { line, msg: "parameter fields must be all present or all null".into() })
            }
        };
        if self.valid && params.is_none() {
            return Err(RecordError::Invalid { line, msg: "valid frame without parameters".into() });
        }
        Ok(FrameRecord { index: self.index, valid: self.valid, params, mask: self.mask })
    }
}

pub fn record_to_line(record: &FrameRecord) -> String {
    serde_json::to_string(&Line::from(record)).expect("records are always serializable")
}

pub fn encode_jsonl(records: &[FrameRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_line(r));
        out.push('\n');
    }
    out
}

/// Parses JSONL records and checks that indices strictly increase.
pub fn decode_jsonl(text: &str) -> Result<Vec<FrameRecord>, RecordError> {
    parse_lines(text.lines().map(|l| Ok(l.to_owned())))
}

fn parse_lines(lines: impl Iterator<Item = Result<String, RecordError>>) -> Result<Vec<FrameRecord>, RecordError> {
    let mut out: Vec<FrameRecord> = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let parsed: Line = serde_json::from_str(&l).map_err(|source| RecordError::Parse { line, source })?;
        let rec = parsed.into_record(line)?;
        if out.last().is_some_and(|p| p.index >= rec.index) {
            return Err(RecordError::Invalid { line, msg: format!("frame index {} does not increase", rec.index) });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FrameRecord>, RecordError> {
    let f = fs::File::open(path).map_err(|e| RecordError::Io(path.display().to_string(), e))?;
    let name = path.display().to_string();
    parse_lines(BufReader::new(f).lines().map(|l| l.map_err(|e| RecordError::Io(name.clone(), e))))
}

pub fn write_jsonl(path: &Path, records: &[FrameRecord]) -> Result<(), RecordError> {
    let mut f = fs::File::create(path).map_err(|e| RecordError::Io(path.display().to_string(), e))?;
    f.write_all(encode_jsonl(records).as_bytes()).map_err(|e| RecordError::Io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<FrameRecord> {
        let params = FrameParams {
            pose: PoseParams(vec![0.1, -1.0 / 3.0, 2e-17, 0.0, 0.0, std::f64::consts::PI, 1e300, -0.0, 5.5]),
            shape: ShapeParams { beta: vec![0.3, -0.7], scale: 1.0 + f64::EPSILON },
            placement: GlobalPlacement {
                rotation: Vector3::new(0.1, 0.2, 0.30000000000000004),
                translation: Vector3::new(0.0, 0.0, 3.0),
            },
        };
        vec![
            FrameRecord { index: 0, valid: true, params: Some(params.clone()), mask: Some("masks/000000.pgm".into()) },
            FrameRecord::invalid(1, None),
            FrameRecord { index: 2, valid: false, params: Some(params), mask: None },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let recs = sample();
        let text = encode_jsonl(&recs);
        let back = decode_jsonl(&text).unwrap();
        assert_eq!(recs, back);
        assert_eq!(encode_jsonl(&back), text);
    }

    #[test]
    fn invalid_line_uses_nulls() {
        let line = record_to_line(&FrameRecord::invalid(4, None));
        assert_eq!(
            line,
            r#"{"index":4,"valid":false,"pose":null,"beta":null,"scale":null,"rotation":null,"translation":null,"mask":null}"#
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_jsonl("{\"index\":0}"), Err(RecordError::Parse { line: 1, .. })));
        let two = encode_jsonl(&[FrameRecord::invalid(3, None), FrameRecord::invalid(3, None)]);
        assert!(matches!(decode_jsonl(&two), Err(RecordError::Invalid { line: 2, .. })));
        let partial = r#"{"index":0,"valid":true,"pose":[0,0,0],"beta":null,"scale":1,"rotation":[0,0,0],"translation":[0,0,1],"mask":null}"#;
        assert!(decode_jsonl(partial).is_err());
    }
}
