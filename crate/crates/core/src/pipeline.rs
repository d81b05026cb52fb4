//! End-to-end correction presets and subject selection.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::bodymodel::BodyModel;
use crate::frames::FrameRecord;
use crate::geometry::{CameraIntrinsics, SilhouetteMask};
use crate::metrics::{mesh_mask_iou_series, MetricsError};
use crate::rigidfit::{build_pool, run_rigid_fallback, FallbackReport, FitMode, RigidFitConfig, RigidFitError};
use crate::stabilize::{lock_shape, StabilizeError, Stabilizer, StabilizerConfig, StabilizerMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty sequence")]
    EmptyInput,
    #[error("{0}")]
    Input(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Stabilize(#[from] StabilizeError),
    #[error(transparent)]
    RigidFit(#[from] RigidFitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Correction presets, from raw predictions to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Raw predictions.
    A,
    /// Outlier gating.
    B,
    /// Gating, median filter and adaptive smoothing.
    C,
    /// As C with pose anchoring and shape lock.
    D,
    /// D followed by rigid fitting of every frame.
    E,
    /// Gating, shape lock, pose anchoring and selective rigid fallback,
    /// without smoothing.
    F,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E, Preset::F];
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            "F" => Ok(Preset::F),
            other => Err(PipelineError::Input(format!("unknown preset {other:?}, expected one of A-F"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineConfig {
    pub stabilizer: StabilizerConfig,
    pub rigid: RigidFitConfig,
}

fn field_names<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

impl PipelineConfig {
    /// Parses a flat JSON object whose keys are stabilizer and rigid-fit
    /// field names. Missing keys keep their defaults; unknown keys are
    /// rejected.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(PipelineError::Config("expected a JSON object".into()));
        };
        let stab_keys = field_names(&StabilizerConfig::default());
        let rigid_keys = field_names(&RigidFitConfig::default());
        let (mut stab, mut rigid) = (Map::new(), Map::new());
        for (k, v) in obj {
            if stab_keys.contains(&k) {
                stab.insert(k, v);
            } else if rigid_keys.contains(&k) {
                rigid.insert(k, v);
            } else {
                return Err(PipelineError::Config(format!("unknown key {k:?}")));
            }
        }
        let cfg = Self {
            stabilizer: serde_json::from_value(Value::Object(stab)).map_err(|e| PipelineError::Config(e.to_string()))?,
            rigid: serde_json::from_value(Value::Object(rigid)).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        cfg.stabilizer.validate()?;
        cfg.rigid.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut obj = Map::new();
        for v in [serde_json::to_value(&self.stabilizer), serde_json::to_value(&self.rigid)] {
            if let Ok(Value::Object(m)) = v {
                obj.extend(m);
            }
        }
        serde_json::to_string_pretty(&Value::Object(obj)).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub preset: Preset,
    /// IoU of each frame against its mask just before rigid fitting (or of
    /// the final output when no fitting runs); `None` for empty masks.
    pub pre_fit_iou: Vec<Option<f64>>,
    /// IoU of each output frame against its mask.
    pub final_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pool_frames: Vec<u64>,
    /// Pool entry whose shape was imposed on every frame.
    pub shape_source: Option<u64>,
    pub fallback_frames: Vec<u64>,
    pub fallback: FallbackReport,
}

fn mean_of(series: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = series.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn stabilize(
    frames: &[FrameRecord],
    splits: &[usize],
    cfg: &StabilizerConfig,
    mode: StabilizerMode,
) -> Result<Vec<FrameRecord>, PipelineError> {
    let mut s = Stabilizer::new(cfg.clone(), mode)?;
    let mut out = Vec::with_capacity(frames.len());
    let mut start = 0;
    for &end in splits.iter().chain(std::iter::once(&frames.len())) {
        let end = end.clamp(start, frames.len());
        out.extend(s.process(&frames[start..end])?);
        start = end;
    }
    out.extend(s.finish()?);
    Ok(out)
}

/// Runs `preset` over a whole sequence. Masks are the observed
/// silhouettes, one per frame.
pub fn run_pipeline(
    frames: &[FrameRecord],
    masks: &[SilhouetteMask],
    model: &BodyModel,
    k: &CameraIntrinsics,
    preset: Preset,
    config: &PipelineConfig,
) -> Result<(Vec<FrameRecord>, Diagnostics), PipelineError> {
    run_pipeline_batched(frames, &[], masks, model, k, preset, config)
}

/// As [`run_pipeline`], feeding the stabilizer in batches that end at the
/// given frame positions. The result does not depend on the split.
pub fn run_pipeline_batched(
    frames: &[FrameRecord],
    splits: &[usize],
    masks: &[SilhouetteMask],
    model: &BodyModel,
    k: &CameraIntrinsics,
    preset: Preset,
    config: &PipelineConfig,
) -> Result<(Vec<FrameRecord>, Diagnostics), PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    if masks.len() != frames.len() {
        return Err(PipelineError::Input(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    let series = |f: &[FrameRecord]| mesh_mask_iou_series(f, masks, model, k);
    let mut diag = Diagnostics {
        preset,
        pre_fit_iou: Vec::new(),
        final_iou: Vec::new(),
        mean_iou: 0.0,
        pool_frames: Vec::new(),
        shape_source: None,
        fallback_frames: Vec::new(),
        fallback: FallbackReport::default(),
    };
    let mode = match preset {
        Preset::A => None,
        Preset::B => Some(StabilizerMode::OutlierOnly),
        Preset::C => Some(StabilizerMode::Smooth),
        Preset::D | Preset::E => Some(StabilizerMode::SmoothLock),
        Preset::F => Some(StabilizerMode::Lock),
    };
    let mut out = match mode {
        None => frames.to_vec(),
        Some(m) => stabilize(frames, splits, &config.stabilizer, m)?,
    };

    if matches!(preset, Preset::D | Preset::E | Preset::F) {
        let ious = flat(&series(&out)?);
        let pool = build_pool(&out, &ious, model, &config.rigid)?;
        if let Some(best) = pool.best() {
            diag.shape_source = Some(best.frame_index);
            out = lock_shape(&out, &best.params.shape);
        }
    }

    let fit_mode = match preset {
        Preset::E => Some(FitMode::Full),
        Preset::F => Some(config.rigid.mode),
        _ => None,
    };
    match fit_mode {
        Some(fit_mode) => {
            let pre = series(&out)?;
            let ious = flat(&pre);
            let rigid = RigidFitConfig { mode: fit_mode, ..config.rigid.clone() };
            let pool = build_pool(&out, &ious, model, &rigid)?;
            diag.pool_frames = pool.entries().iter().map(|e| e.frame_index).collect();
            let (fitted, report) = run_rigid_fallback(&out, masks, &ious, &pool, model, k, &rigid)?;
            out = fitted;
            diag.fallback_frames = report.fitted_frames();
            diag.fallback = report;
            diag.pre_fit_iou = pre;
            diag.final_iou = series(&out)?;
        }
        None => {
            diag.final_iou = series(&out)?;
            diag.pre_fit_iou = diag.final_iou.clone();
        }
    }
    diag.mean_iou = mean_of(&diag.final_iou);
    Ok((out, diag))
}

fn flat(series: &[Option<f64>]) -> Vec<f64> {
    series.iter().map(|v| v.unwrap_or(0.0)).collect()
}

/// Picks the candidate whose pelvis-to-neck axis is closest to horizontal
/// (up is +y). Ties go to the lowest index.
pub fn select_recumbent_subject(candidates: &[(Vector3<f64>, Vector3<f64>)]) -> Result<usize, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::Input("no candidate subjects".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (pelvis, neck)) in candidates.iter().enumerate() {
        let axis = neck - pelvis;
        let len = axis.norm();
        if !(len > 1e-12) {
            return Err(PipelineError::Input(format!("candidate {i} has coincident pelvis and neck")));
        }
        let elevation = (axis.y.abs() / len).clamp(0.0, 1.0).asin();
        if best.is_none_or(|(_, e)| elevation < e) {
            best = Some((i, elevation));
        }
    }
    Ok(best.expect("nonempty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::encode_jsonl;
    use crate::synthgen::{generate_scenario, make_procedural_body, NoiseSpec, OcclusionWindow, ScenarioSpec};

    #[test]
    fn subject_selection() {
        let o = Vector3::zeros();
        let upright = (o, Vector3::new(0.0, 0.5, 0.0));
        let supine = (o, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(select_recumbent_subject(&[upright, supine]).unwrap(), 1);
        assert_eq!(select_recumbent_subject(&[upright]).unwrap(), 0);
        let at = |deg: f64| (o, Vector3::new(deg.to_radians().cos(), deg.to_radians().sin(), 0.0));
        assert_eq!(select_recumbent_subject(&[at(60.0), at(30.0)]).unwrap(), 1);
        assert_eq!(select_recumbent_subject(&[at(30.0), at(-30.0)]).unwrap(), 0);
        assert!(select_recumbent_subject(&[]).is_err());
        assert!(select_recumbent_subject(&[supine, (o, o)]).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = PipelineConfig::from_json(r#"{"tau_theta": 0.5, "lambda_temp": 0.2, "mode": "full"}"#).unwrap();
        assert_eq!(cfg.stabilizer.tau_theta, 0.5);
        assert_eq!(cfg.rigid.lambda_temp, 0.2);
        assert_eq!(cfg.rigid.mode, FitMode::Full);
        assert_eq!(cfg.rigid.tau_q, 0.6);
        assert!(PipelineConfig::from_json(r#"{"lambda": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"tau_theta": -1}"#).is_err());
        assert!(PipelineConfig::from_json("[1]").is_err());
        let round = PipelineConfig::from_json(&PipelineConfig::default().to_json()).unwrap();
        assert_eq!(round, PipelineConfig::default());
        assert_eq!("f".parse::<Preset>().unwrap(), Preset::F);
        assert!("G".parse::<Preset>().is_err());
    }

    fn small_bundle(seed: u64, noise: NoiseSpec) -> crate::synthgen::Bundle {
        let model = make_procedural_body();
        let spec = ScenarioSpec { seed, n_frames: 60, orbit_degrees: 60.0, width: 380, height: 214, noise, ..ScenarioSpec::default() };
        generate_scenario(&spec, &model).unwrap()
    }

    fn flat_params(f: &FrameRecord) -> Vec<f64> {
        let p = f.params.as_ref().unwrap();
        let mut v = p.pose.0.clone();
        v.extend(&p.shape.beta);
        v.push(p.shape.scale);
        v.extend(p.placement.rotation.iter());
        v.extend(p.placement.translation.iter());
        v
    }

    fn max_param_change(a: &[FrameRecord], b: &[FrameRecord]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| flat_params(x).into_iter().zip(flat_params(y)).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn preset_a_is_pass_through() {
        let b = small_bundle(1, NoiseSpec { occlusion_windows: Vec::new(), ..NoiseSpec::default() });
        let (out, diag) = run_pipeline(&b.pred_frames, &b.masks, &b.model, &b.intrinsics, Preset::A, &PipelineConfig::default()).unwrap();
        assert_eq!(encode_jsonl(&out), encode_jsonl(&b.pred_frames));
        assert!(diag.pool_frames.is_empty() && diag.fallback_frames.is_empty());
    }

    #[test]
    fn clean_input_is_a_fixed_point_of_f() {
        let b = small_bundle(2, NoiseSpec::none());
        let (out, diag) = run_pipeline(&b.pred_frames, &b.masks, &b.model, &b.intrinsics, Preset::F, &PipelineConfig::default()).unwrap();
        assert!(diag.fallback_frames.is_empty());
        assert!(max_param_change(&out, &b.pred_frames) <= 1e-6, "{}", max_param_change(&out, &b.pred_frames));
    }

    #[test]
    fn fallback_audit_and_batch_invariance() {
        let noise = NoiseSpec {
            occlusion_windows: vec![OcclusionWindow { start: 20, end: 26, ..OcclusionWindow::default() }],
            ..NoiseSpec::default()
        };
        let b = small_bundle(3, noise);
        let cfg = PipelineConfig::default();
        let (out, diag) = run_pipeline(&b.pred_frames, &b.masks, &b.model, &b.intrinsics, Preset::F, &cfg).unwrap();
        let expected: Vec<u64> = diag
            .pre_fit_iou
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some_and(|v| v < cfg.rigid.tau_iou))
            .map(|(t, _)| t as u64)
            .collect();
        assert_eq!(diag.fallback_frames, expected);
        for t in 20..26 {
            assert!(diag.fallback_frames.contains(&t));
        }
        let (split, _) =
            run_pipeline_batched(&b.pred_frames, &[17], &b.masks, &b.model, &b.intrinsics, Preset::F, &cfg).unwrap();
        assert_eq!(encode_jsonl(&split), encode_jsonl(&out));
    }

    #[test]
    fn shape_is_locked_to_pool_best() {
        let b = small_bundle(4, NoiseSpec { occlusion_windows: Vec::new(), ..NoiseSpec::default() });
        let (out, diag) = run_pipeline(&b.pred_frames, &b.masks, &b.model, &b.intrinsics, Preset::D, &PipelineConfig::default()).unwrap();
        let src = diag.shape_source.unwrap();
        let shapes: Vec<_> = out.iter().filter_map(|f| f.params.as_ref().map(|p| p.shape.clone())).collect();
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
        assert!(src < 60);
        assert!(run_pipeline(&[], &[], &b.model, &b.intrinsics, Preset::B, &PipelineConfig::default()).is_err());
    }
}
