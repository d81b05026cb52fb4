//! Synthetic scenarios with known ground truth: a procedural body, an
//! orbiting camera, rendered masks and corrupted per-frame predictions.

mod body;
mod scenario;

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::bodymodel::{BodyModel, BodyModelError};
use crate::frames::{read_jsonl, write_jsonl, FrameRecord, RecordError};
use crate::geometry::{CameraIntrinsics, GeometryError, SilhouetteMask};

pub use body::{
    default_base_pose, make_procedural_body, mirror_joint, mirror_rotation, BETA_COUNT, JOINT_COUNT, JOINT_NAMES,
    NECK, PARENTS, PELVIS,
};
pub use scenario::{
    crop_to_fraction, erode_to_fraction, generate_scenario, mask_name, orbit_placements, Bundle, InjectedFrame, InjectionLog,
    NoiseSpec, OcclusionStyle, OcclusionWindow, ScenarioSpec,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("orbit radius {radius} does not clear the body (horizontal reach {body})")]
    RadiusTooSmall { radius: f64, body: f64 },
    #[error(transparent)]
    Model(#[from] BodyModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("frame {frame}: mask {path} cannot be read: {source}")]
    MissingMask {
        frame: u64,
        path: String,
        #[source]
        source: GeometryError,
    },
}

const VERTEX_MAGIC: &[u8; 4] = b"P4DV";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |e| SynthError::Io(path.display().to_string(), e)
}

/// Encodes per-frame vertex arrays as little-endian f32 behind a 16-byte
/// header: magic, frame count, vertex count, four reserved zero bytes.
pub fn encode_vertices(frames: &[Vec<Vector3<f64>>]) -> Result<Vec<u8>, SynthError> {
    let nv = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != nv) {
        return Err(SynthError::InvalidSpec("vertex count differs between frames".into()));
    }
    let mut out = Vec::with_capacity(16 + frames.len() * nv * 12);
    out.extend_from_slice(VERTEX_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(nv as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for v in frames.iter().flatten() {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vertices(bytes: &[u8], path: &str) -> Result<Vec<Vec<Vector3<f64>>>, SynthError> {
    let bad = |msg: &str| SynthError::Format { path: path.into(), msg: msg.into() };
    if bytes.len() < 16 || &bytes[..4] != VERTEX_MAGIC {
        return Err(bad("missing vertex file header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, nv) = (word(4), word(8));
    if bytes.len() != 16 + t * nv * 12 {
        return Err(bad("payload length does not match header"));
    }
    let floats: Vec<f64> =
        bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(floats
        .chunks_exact(3 * nv.max(1))
        .take(t)
        .map(|f| f.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect())
        .collect())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Format { path: path.display().to_string(), msg: e.to_string() })
}

/// Writes a bundle directory. Existing files with the same names are
/// overwritten.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<(), SynthError> {
    for sub in ["masks", "gt_masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    bundle.model.save(&dir.join("model.json"))?;
    write_json(&dir.join("scenario.json"), &bundle.spec)?;
    write_json(&dir.join("camera.json"), &bundle.intrinsics)?;
    write_json(&dir.join("injection_log.json"), &bundle.injection_log)?;
    write_jsonl(&dir.join("gt_frames.jsonl"), &bundle.gt_frames)?;
    write_jsonl(&dir.join("pred_frames.jsonl"), &bundle.pred_frames)?;
    for (t, (m, g)) in bundle.masks.iter().zip(&bundle.gt_masks).enumerate() {
        m.write_pgm(&dir.join(mask_name("masks", t)))?;
        g.write_pgm(&dir.join(mask_name("gt_masks", t)))?;
    }
    if let Some(v) = &bundle.gt_vertices {
        let p = dir.join("gt_vertices.f32");
        fs::write(&p, encode_vertices(v)?).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Loads the mask each record points at, relative to `dir`.
pub fn load_masks(dir: &Path, records: &[FrameRecord]) -> Result<Vec<SilhouetteMask>, SynthError> {
    records
        .iter()
        .map(|r| {
            let rel = r.mask.clone().unwrap_or_else(|| mask_name("masks", r.index as usize));
            SilhouetteMask::read_pgm(&dir.join(&rel)).map_err(|source| SynthError::MissingMask {
                frame: r.index,
                path: rel,
                source,
            })
        })
        .collect()
}

/// Reads a bundle directory written by [`write_bundle`]. Ground-truth
/// masks and vertices are optional.
pub fn read_bundle(dir: &Path) -> Result<Bundle, SynthError> {
    let model = BodyModel::load(&dir.join("model.json"))?;
    let spec: ScenarioSpec = read_json(&dir.join("scenario.json"))?;
    let cam = dir.join("camera.json");
    let intrinsics: CameraIntrinsics = if cam.exists() { read_json(&cam)? } else { spec.intrinsics() };
    intrinsics.validate()?;
    let log_path = dir.join("injection_log.json");
    let injection_log = if log_path.exists() { read_json(&log_path)? } else { InjectionLog::default() };
    let pred_frames = read_jsonl(&dir.join("pred_frames.jsonl"))?;
    let gt_path = dir.join("gt_frames.jsonl");
    let gt_frames = if gt_path.exists() { read_jsonl(&gt_path)? } else { Vec::new() };
    let masks = load_masks(dir, &pred_frames)?;
    for (r, m) in pred_frames.iter().zip(&masks) {
        if m.width() != intrinsics.width || m.height() != intrinsics.height {
            return Err(SynthError::Format {
                path: dir.display().to_string(),
                msg: format!("mask of frame {} is {}×{}, camera is {}×{}", r.index, m.width(), m.height(), intrinsics.width, intrinsics.height),
            });
        }
    }
    let gt_masks = if dir.join("gt_masks").is_dir() && !gt_frames.is_empty() {
        gt_frames
            .iter()
            .map(|r| {
                let rel = r.mask.clone().unwrap_or_else(|| mask_name("gt_masks", r.index as usize));
                SilhouetteMask::read_pgm(&dir.join(&rel))
                    .map_err(|source| SynthError::MissingMask { frame: r.index, path: rel, source })
            })
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let vpath = dir.join("gt_vertices.f32");
    let gt_vertices = if vpath.exists() {
        let bytes = fs::read(&vpath).map_err(io_err(&vpath))?;
        Some(decode_vertices(&bytes, &vpath.display().to_string())?)
    } else {
        None
    };
    Ok(Bundle { spec, model, intrinsics, gt_frames, pred_frames, masks, gt_masks, gt_vertices, injection_log })
}
