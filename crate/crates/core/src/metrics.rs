//! Evaluation of a corrected sequence: mesh-mask overlap, temporal
//! stability, cross-view consistency and aligned vertex error.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{pose_mesh, BodyModel, BodyModelError, GlobalPlacement, PoseParams};
use crate::frames::FrameRecord;
use crate::geometry::{iou, nn_vertex_error, rasterize_silhouette, CameraIntrinsics, GeometryError, SilhouetteMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sequence of {frames} frames is too short for lag {lag}")]
    TooShort { frames: usize, lag: usize },
    #[error(transparent)]
    Model(#[from] BodyModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub pct_above_0_6: f64,
    pub pct_below_0_3: f64,
    /// Meters.
    pub delta_mesh: f64,
    /// Radians.
    pub delta_pose: f64,
    pub cv_iou: f64,
    pub cv_lag: usize,
    /// Millimeters; present only with ground-truth vertices.
    pub pa_pve: Option<f64>,
    /// Frames left out of the IoU statistics because their mask is empty.
    pub skipped_frames: usize,
    /// `None` for skipped frames.
    pub per_frame_iou: Vec<Option<f64>>,
}

fn check_lengths(frames: &[FrameRecord], masks: &[SilhouetteMask]) -> Result<(), MetricsError> {
    if frames.len() != masks.len() {
        return Err(MetricsError::DimensionMismatch(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    Ok(())
}

/// Body-local mesh of each frame (placement not applied).
fn local_meshes(frames: &[FrameRecord], model: &BodyModel) -> Result<Vec<Option<Vec<Vector3<f64>>>>, MetricsError> {
    frames
        .par_iter()
        .map(|f| {
            f.params
                .as_ref()
                .map(|p| pose_mesh(model, &p.pose, &p.shape, &GlobalPlacement::identity()))
                .transpose()
                .map_err(MetricsError::from)
        })
        .collect()
}

fn placed_iou(
    local: Option<&Vec<Vector3<f64>>>,
    placement: Option<&GlobalPlacement>,
    mask: &SilhouetteMask,
    model: &BodyModel,
    k: &CameraIntrinsics,
) -> Result<f64, MetricsError> {
    match (local, placement) {
        (Some(v), Some(pl)) => {
            let sil = rasterize_silhouette(&pl.apply(v), model.faces(), k, 1)?;
            Ok(iou(&sil, mask)?)
        }
        _ => Ok(0.0),
    }
}

/// Per-frame full-resolution IoU of the rendered mesh against its mask.
/// Frames with an empty mask yield `None`; frames without parameters
/// score 0.
pub fn mesh_mask_iou_series(
    frames: &[FrameRecord],
    masks: &[SilhouetteMask],
    model: &BodyModel,
    k: &CameraIntrinsics,
) -> Result<Vec<Option<f64>>, MetricsError> {
    check_lengths(frames, masks)?;
    let local = local_meshes(frames, model)?;
    (0..frames.len())
        .into_par_iter()
        .map(|t| {
            if masks[t].is_empty() {
                return Ok(None);
            }
            let pl = frames[t].params.as_ref().map(|p| &p.placement);
            placed_iou(local[t].as_ref(), pl, &masks[t], model, k).map(Some)
        })
        .collect()
}

/// `(1/(T−1)) Σ_t ‖V_t − V_{t−1}‖_F / N_v`.
pub fn temporal_displacement(sequence: &[Vec<Vector3<f64>>]) -> f64 {
    if sequence.len() < 2 {
        return 0.0;
    }
    let sum: f64 = sequence
        .windows(2)
        .map(|w| {
            let sq: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).norm_squared()).sum();
            sq.sqrt() / w[0].len().max(1) as f64
        })
        .sum();
    sum / (sequence.len() - 1) as f64
}

/// Mean Euclidean distance between consecutive pose vectors.
pub fn pose_consistency(poses: &[PoseParams]) -> f64 {
    if poses.len() < 2 {
        return 0.0;
    }
    let sum: f64 = poses
        .windows(2)
        .map(|w| w[0].0.iter().zip(&w[1].0).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt())
        .sum();
    sum / (poses.len() - 1) as f64
}

/// Mean IoU of frame `t`'s body rendered under frame `t + lag`'s placement
/// against mask `t + lag`. Pairs whose target mask is empty are skipped.
pub fn cross_view_iou(
    frames: &[FrameRecord],
    masks: &[SilhouetteMask],
    model: &BodyModel,
    k: &CameraIntrinsics,
    lag: usize,
) -> Result<f64, MetricsError> {
    check_lengths(frames, masks)?;
    if frames.len() <= lag {
        return Err(MetricsError::TooShort { frames: frames.len(), lag });
    }
    let local = local_meshes(frames, model)?;
    let values: Vec<Option<f64>> = (0..frames.len() - lag)
        .into_par_iter()
        .map(|t| {
            let s = t + lag;
            if masks[s].is_empty() {
                return Ok(None);
            }
            let pl = frames[s].params.as_ref().map(|p| &p.placement);
            placed_iou(local[t].as_ref(), pl, &masks[s], model, k).map(Some)
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok(mean(values.iter().flatten().copied()))
}

/// Mean Procrustes-aligned nearest-neighbor vertex error, in millimeters.
pub fn pa_pve(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::DimensionMismatch(format!("{} predicted vs {} ground-truth frames", pred.len(), gt.len())));
    }
    let errors: Vec<f64> =
        pred.par_iter().zip(gt).map(|(p, g)| nn_vertex_error(p, g)).collect::<Result<_, GeometryError>>()?;
    Ok(1000.0 * mean(errors.into_iter()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-frame rows behind the report: IoU and the displacement from the
/// previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub frame: u64,
    pub iou: Option<f64>,
    pub delta_mesh: Option<f64>,
    pub delta_pose: Option<f64>,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<FrameRow>,
}

/// Computes every metric. Consecutive-frame terms skip pairs where either
/// frame lacks parameters.
pub fn evaluate(
    frames: &[FrameRecord],
    masks: &[SilhouetteMask],
    model: &BodyModel,
    k: &CameraIntrinsics,
    lag: usize,
    gt_vertices: Option<&[Vec<Vector3<f64>>]>,
) -> Result<Evaluation, MetricsError> {
    let series = mesh_mask_iou_series(frames, masks, model, k)?;
    let scored: Vec<f64> = series.iter().flatten().copied().collect();
    let pct = |pred: fn(f64) -> bool| {
        if scored.is_empty() {
            0.0
        } else {
            100.0 * scored.iter().filter(|v| pred(**v)).count() as f64 / scored.len() as f64
        }
    };
    let meshes: Vec<Option<Vec<Vector3<f64>>>> = frames
        .par_iter()
        .map(|f| f.params.as_ref().map(|p| pose_mesh(model, &p.pose, &p.shape, &p.placement)).transpose())
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<FrameRow> = Vec::with_capacity(frames.len());
    let (mut dm, mut dp) = (Vec::new(), Vec::new());
    for t in 0..frames.len() {
        let (mut delta_mesh, mut delta_pose) = (None, None);
        if t > 0 {
            if let (Some(a), Some(b)) = (&meshes[t - 1], &meshes[t]) {
                let d = temporal_displacement(&[a.clone(), b.clone()]);
                delta_mesh = Some(d);
                dm.push(d);
            }
            if let (Some(a), Some(b)) = (&frames[t - 1].params, &frames[t].params) {
                let d = pose_consistency(&[a.pose.clone(), b.pose.clone()]);
                delta_pose = Some(d);
                dp.push(d);
            }
        }
        rows.push(FrameRow { frame: frames[t].index, iou: series[t], delta_mesh, delta_pose });
    }

    let pa = match gt_vertices {
        Some(gt) => {
            let pred: Option<Vec<Vec<Vector3<f64>>>> = meshes.into_iter().collect();
            let pred = pred.ok_or_else(|| {
                MetricsError::DimensionMismatch("every frame needs parameters for vertex error".into())
            })?;
            Some(pa_pve(&pred, gt)?)
        }
        None => None,
    };
    let report = MetricsReport {
        mean_iou: mean(scored.iter().copied()),
        pct_above_0_6: pct(|v| v > 0.6),
        pct_below_0_3: pct(|v| v < 0.3),
        delta_mesh: mean(dm.into_iter()),
        delta_pose: mean(dp.into_iter()),
        cv_iou: cross_view_iou(frames, masks, model, k, lag)?,
        cv_lag: lag,
        pa_pve: pa,
        skipped_frames: series.iter().filter(|v| v.is_none()).count(),
        per_frame_iou: series,
    };
    Ok(Evaluation { report, rows })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// CSV with columns `frame,iou,delta_mesh,delta_pose`; missing values are
/// empty cells.
pub fn rows_to_csv(rows: &[FrameRow]) -> String {
    let mut out = String::from("frame,iou,delta_mesh,delta_pose\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.frame, cell(r.iou), cell(r.delta_mesh), cell(r.delta_pose)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::aa_to_matrix;
    use crate::synthgen::{generate_scenario, make_procedural_body, ScenarioSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn displacement_closed_forms() {
        let base: Vec<Vector3<f64>> = (0..9).map(|i| Vector3::new(i as f64, 0.5, -1.0)).collect();
        assert_eq!(temporal_displacement(&[base.clone(), base.clone(), base.clone()]), 0.0);
        let d = 0.3;
        let seq: Vec<Vec<Vector3<f64>>> =
            (0..4).map(|s| base.iter().map(|v| v + Vector3::new(d * s as f64, 0.0, 0.0)).collect()).collect();
        assert!((temporal_displacement(&seq) - d / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn displacement_matches_double_loop(seed in 0u64..1000, t in 2usize..6, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq: Vec<Vec<Vector3<f64>>> = (0..t)
                .map(|_| (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect())
                .collect();
            let mut total = 0.0;
            for s in 1..t {
                let mut sq = 0.0;
                for i in 0..n {
                    for c in 0..3 {
                        sq += (seq[s][i][c] - seq[s - 1][i][c]).powi(2);
                    }
                }
                total += sq.sqrt() / n as f64;
            }
            prop_assert!((temporal_displacement(&seq) - total / (t - 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_consistency_examples() {
        let v = PoseParams(vec![0.3, -0.4, 0.0]);
        assert_eq!(pose_consistency(&[v.clone(), v.clone()]), 0.0);
        let neg = PoseParams(v.0.iter().map(|x| -x).collect());
        let alt = vec![v.clone(), neg.clone(), v.clone(), neg];
        assert!((pose_consistency(&alt) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pa_pve_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<Vec<Vector3<f64>>> =
            (0..3).map(|_| (0..50).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect()).collect();
        assert!(pa_pve(&gt, &gt).unwrap() < 1e-9);
        let r = aa_to_matrix(&Vector3::new(0.3, -1.1, 0.4));
        let moved: Vec<Vec<Vector3<f64>>> =
            gt.iter().map(|f| f.iter().map(|v| r * v * 2.5 + Vector3::new(1.0, -3.0, 0.2)).collect()).collect();
        assert!(pa_pve(&moved, &gt).unwrap() < 1e-3);
        assert!(pa_pve(&gt[..2], &gt).is_err());
    }

    #[test]
    fn sequence_metrics_on_clean_scenario() {
        let model = make_procedural_body();
        let spec = ScenarioSpec { n_frames: 30, width: 380, height: 214, ..ScenarioSpec::clean(2) };
        let b = generate_scenario(&spec, &model).unwrap();
        let series = mesh_mask_iou_series(&b.gt_frames, &b.gt_masks, &model, &b.intrinsics).unwrap();
        assert!(series.iter().all(|v| v.unwrap() >= 0.95));
        let ev = evaluate(&b.gt_frames, &b.gt_masks, &model, &b.intrinsics, 0, b.gt_vertices.as_deref()).unwrap();
        assert_eq!(ev.report.cv_iou, ev.report.mean_iou);
        assert!(ev.report.pa_pve.unwrap() < 0.1);
        assert_eq!(ev.report.delta_pose, 0.0);
        assert!(ev.report.delta_mesh > 0.0);
        let ev = evaluate(&b.gt_frames, &b.gt_masks, &model, &b.intrinsics, 20, None).unwrap();
        assert!((ev.report.cv_iou - ev.report.mean_iou).abs() < 0.02);
        assert!(ev.report.pa_pve.is_none());
        let csv = rows_to_csv(&ev.rows);
        assert!(csv.starts_with("frame,iou,delta_mesh,delta_pose\n0,1,,\n1,"));
        assert_eq!(csv.lines().count(), 31);
        assert!(matches!(
            cross_view_iou(&b.gt_frames, &b.gt_masks, &model, &b.intrinsics, 30),
            Err(MetricsError::TooShort { .. })
        ));
    }

    #[test]
    fn flattened_bodies_lose_cross_view_consistency() {
        let model = make_procedural_body();
        let spec = ScenarioSpec { n_frames: 25, width: 380, height: 214, ..ScenarioSpec::clean(3) };
        let b = generate_scenario(&spec, &model).unwrap();
        // squash every body along its camera's viewing axis: same-view
        // silhouettes barely change, other views do
        let mut seq = Vec::new();
        for f in &b.gt_frames {
            let p = f.params.as_ref().unwrap();
            let v = pose_mesh(&model, &p.pose, &p.shape, &p.placement).unwrap();
            let zc = v.iter().map(|x| x.z).sum::<f64>() / v.len() as f64;
            let flat: Vec<Vector3<f64>> = v.iter().map(|x| Vector3::new(x.x * zc / x.z, x.y * zc / x.z, zc)).collect();
            seq.push(flat);
        }
        let same: Vec<f64> = seq
            .iter()
            .zip(&b.gt_masks)
            .map(|(v, m)| iou(&rasterize_silhouette(v, model.faces(), &b.intrinsics, 1).unwrap(), m).unwrap())
            .collect();
        let cross: Vec<f64> = (0..5)
            .map(|t| {
                let pl_t = b.gt_frames[t].params.as_ref().unwrap().placement;
                let pl_s = b.gt_frames[t + 20].params.as_ref().unwrap().placement;
                let v = pl_s.apply(&pl_t.strip(&seq[t]));
                iou(&rasterize_silhouette(&v, model.faces(), &b.intrinsics, 1).unwrap(), &b.gt_masks[t + 20]).unwrap()
            })
            .collect();
        let same_mean = same.iter().sum::<f64>() / same.len() as f64;
        let cross_mean = cross.iter().sum::<f64>() / cross.len() as f64;
        assert!(cross_mean < same_mean, "{cross_mean} vs {same_mean}");
    }

    #[test]
    fn empty_masks_are_skipped() {
        let model = make_procedural_body();
        let spec = ScenarioSpec { n_frames: 4, width: 190, height: 107, ..ScenarioSpec::clean(0) };
        let b = generate_scenario(&spec, &model).unwrap();
        let mut masks = b.gt_masks.clone();
        masks[2] = SilhouetteMask::empty(190, 107);
        let ev = evaluate(&b.gt_frames, &masks, &model, &b.intrinsics, 1, None).unwrap();
        assert_eq!(ev.report.skipped_frames, 1);
        assert_eq!(ev.report.per_frame_iou[2], None);
        assert_eq!(ev.report.pct_above_0_6 + ev.report.pct_below_0_3, 100.0);
    }
}
