//! Rigid fallback: a pool of good frames, reference selection by quality
//! and proximity, and silhouette-driven rigid alignment of a reference
//! mesh with forward and backward chaining.
//!
//! Rigid parameters are relative to the reference mesh `V` with centroid
//! `m`: the fitted mesh is `R(ω)(V − m) + m + c`.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{pose_mesh, BodyModel, BodyModelError, GlobalPlacement};
use crate::frames::{FrameParams, FrameRecord};
use crate::geometry::{
    aa_to_matrix, dice, iou, matrix_to_aa, rasterize_silhouette, rotation_log, CameraIntrinsics, GeometryError,
    SilhouetteMask, MIN_DEPTH,
};

#[derive(Debug, Error)]
pub enum RigidFitError {
    #[error("no usable reference: {0}")]
    NoReference(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective is not finite at the initial simplex")]
    NonFiniteObjective,
    #[error(transparent)]
    Model(#[from] BodyModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Refit only frames whose mesh-mask IoU is below `tau_iou`.
    Fallback,
    /// Refit every frame.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidFitConfig {
    pub tau_iou: f64,
    pub tau_q: f64,
    /// Temporal decay of reference scores, in frames.
    pub tau_d: f64,
    pub lambda_temp: f64,
    /// Weight of the squared depth deviation from the reference, per m².
    pub lambda_z: f64,
    pub max_iter: usize,
    pub downscale: u32,
    /// Largest frame gap over which the temporal prior applies.
    pub tau_g: u64,
    pub traj_window: usize,
    pub mode: FitMode,
    pub fit_tol: f64,
    /// Extra simplex runs restarted from the best point while they improve.
    pub restarts: usize,
    pub rotation_step: f64,
    pub translation_step: f64,
}

impl Default for RigidFitConfig {
    fn default() -> Self {
        Self {
            tau_iou: 0.6,
            tau_q: 0.6,
            tau_d: 50.0,
            lambda_temp: 0.1,
            lambda_z: 1.0,
            max_iter: 150,
            downscale: 2,
            tau_g: 25,
            traj_window: 5,
            mode: FitMode::Fallback,
            fit_tol: 1e-6,
            restarts: 3,
            rotation_step: 0.1,
            translation_step: 0.05,
        }
    }
}

impl RigidFitConfig {
    pub fn validate(&self) -> Result<(), RigidFitError> {
        let bad = |m: &str| Err(RigidFitError::InvalidConfig(m.into()));
        for (name, v) in [("tau_iou", self.tau_iou), ("tau_q", self.tau_q)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.tau_d > 0.0) {
            return bad("tau_d must be positive");
        }
        for (name, v) in [("lambda_temp", self.lambda_temp), ("lambda_z", self.lambda_z), ("fit_tol", self.fit_tol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        if !(self.rotation_step > 0.0 && self.translation_step > 0.0) {
            return bad("simplex steps must be positive");
        }
        if self.max_iter == 0 || self.downscale == 0 || self.traj_window == 0 {
            return bad("max_iter, downscale and traj_window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub omega: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidParams {
    pub fn identity() -> Self {
        Self { omega: Vector3::zeros(), translation: Vector3::zeros() }
    }

    fn to_vec(self) -> Vec<f64> {
        self.omega.iter().chain(self.translation.iter()).copied().collect()
    }

    fn from_slice(x: &[f64]) -> Self {
        Self { omega: Vector3::new(x[0], x[1], x[2]), translation: Vector3::new(x[3], x[4], x[5]) }
    }
}

/// A frame good enough to serve as a rigid-fit reference.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeEntry {
    pub frame_index: u64,
    pub iou: f64,
    pub params: FrameParams,
    /// Posed mesh in the camera frame.
    pub posed_vertices: Vec<Vector3<f64>>,
    pub centroid: Vector3<f64>,
}

impl KeyframeEntry {
    pub fn new(frame_index: u64, iou: f64, params: FrameParams, posed_vertices: Vec<Vector3<f64>>) -> Self {
        let n = posed_vertices.len().max(1) as f64;
        let centroid = posed_vertices.iter().fold(Vector3::zeros(), |a, v| a + v) / n;
        Self { frame_index, iou, params, posed_vertices, centroid }
    }

    /// The reference mesh moved by `p`.
    pub fn transformed(&self, p: &RigidParams) -> Vec<Vector3<f64>> {
        let r = aa_to_matrix(&p.omega);
        let shift = self.centroid + p.translation;
        self.posed_vertices.iter().map(|v| r * (v - self.centroid) + shift).collect()
    }

    /// Absolute placement of the reference body after applying `p`.
    pub fn placement_for(&self, p: &RigidParams) -> GlobalPlacement {
        let r = aa_to_matrix(&p.omega);
        let rk = self.params.placement.matrix();
        GlobalPlacement {
            rotation: matrix_to_aa(&(r * rk)).expect("product of rotations"),
            translation: r * (self.params.placement.translation - self.centroid) + self.centroid + p.translation,
        }
    }

    /// Rigid parameters that carry this reference onto `placement`.
    pub fn params_for(&self, placement: &GlobalPlacement) -> RigidParams {
        let rel: Matrix3<f64> = placement.matrix() * self.params.placement.matrix().transpose();
        RigidParams {
            omega: rotation_log(&rel),
            translation: rel * (self.centroid - self.params.placement.translation) + placement.translation
                - self.centroid,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyframePool {
    entries: Vec<KeyframeEntry>,
}

impl KeyframePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Admits `entry` when the pool is empty or its IoU exceeds `tau_q`.
    pub fn admit(&mut self, entry: KeyframeEntry, tau_q: f64) -> bool {
        if self.entries.is_empty() || entry.iou > tau_q {
            self.entries.push(entry);
            true
        } else {
            false
        }
    }

    pub fn entries(&self) -> &[KeyframeEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Highest-IoU entry; ties go to the earliest frame.
    pub fn best(&self) -> Option<&KeyframeEntry> {
        self.entries.iter().fold(None, |best: Option<&KeyframeEntry>, e| match best {
            Some(b) if b.iou >= e.iou => Some(b),
            _ => Some(e),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassDirection {
    /// Eligible references satisfy `k ≤ t`.
    Forward,
    /// Eligible references satisfy `k ≥ t`.
    Backward,
}

pub fn reference_score(entry: &KeyframeEntry, target: u64, tau_d: f64) -> f64 {
    entry.iou * (-(entry.frame_index.abs_diff(target) as f64) / tau_d).exp()
}

/// Eligible entry with the best `IoU_k · exp(−|k − t| / τ_d)`. Scores
/// within a relative 1e-12 count as tied; ties go to the nearer frame,
/// then the earlier one.
pub fn select_reference(
    pool: &KeyframePool,
    target: u64,
    direction: PassDirection,
    tau_d: f64,
) -> Result<&KeyframeEntry, RigidFitError> {
    let mut best: Option<(&KeyframeEntry, f64)> = None;
    for e in &pool.entries {
        let eligible = match direction {
            PassDirection::Forward => e.frame_index <= target,
            PassDirection::Backward => e.frame_index >= target,
        };
        if !eligible {
            continue;
        }
        let s = reference_score(e, target, tau_d);
        best = match best {
            None => Some((e, s)),
            Some((b, bs)) => {
                let tied = (s - bs).abs() <= 1e-12 * s.abs().max(bs.abs());
                let better = if tied {
                    let (de, db) = (e.frame_index.abs_diff(target), b.frame_index.abs_diff(target));
                    de < db || (de == db && e.frame_index < b.frame_index)
                } else {
                    s > bs
                };
                if better {
                    Some((e, s))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    best.map(|(e, _)| e).ok_or_else(|| RigidFitError::NoReference(format!("no pool entry eligible for frame {target}")))
}

/// Temporal prior from an already-fitted neighbor, in the current
/// reference's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborPrior {
    pub params: RigidParams,
    /// Frame distance to the neighbor.
    pub gap: u64,
}

/// Mask, camera and topology the objective renders against. `mask` must
/// be at the resolution of `intrinsics` downscaled by `downscale`.
#[derive(Debug, Clone, Copy)]
pub struct FitTarget<'a> {
    pub mask: &'a SilhouetteMask,
    pub intrinsics: &'a CameraIntrinsics,
    pub downscale: u32,
    pub faces: &'a [[u32; 3]],
}

/// `−Dice + λ_temp (‖ω − ω′‖ + ‖c − c′‖) + λ_z c_z²`. A mesh reaching
/// behind the camera scores 1.
pub fn rigid_objective(
    params: &RigidParams,
    reference: &KeyframeEntry,
    target: &FitTarget,
    neighbor: Option<&NeighborPrior>,
    config: &RigidFitConfig,
) -> f64 {
    let verts = reference.transformed(params);
    if verts.iter().any(|v| !(v.z > MIN_DEPTH)) {
        return 1.0;
    }
    let Ok(sil) = rasterize_silhouette(&verts, target.faces, target.intrinsics, target.downscale) else {
        return 1.0;
    };
    let Ok(d) = dice(&sil, target.mask) else {
        return 1.0;
    };
    let temporal = match neighbor {
        Some(n) if n.gap <= config.tau_g => {
            config.lambda_temp
                * ((params.omega - n.params.omega).norm() + (params.translation - n.params.translation).norm())
        }
        _ => 0.0,
    };
    -d + temporal + config.lambda_z * params.translation.z * params.translation.z
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

/// Nelder-Mead with reflection 1, expansion 2, contraction 0.5 and shrink
/// 0.5. The initial simplex is `x0` plus `x0 + step_i e_i`. Stops after
/// `max_iter` iterations or once the spread of simplex values is below
/// `tol`. Non-finite values after the first simplex count as +∞.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<SimplexResult, RigidFitError>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if step.len() != n {
        return Err(RigidFitError::DimensionMismatch(format!("{} steps for {} dimensions", step.len(), n)));
    }
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    let start = DVector::from_column_slice(x0);
    for i in 0..=n {
        let mut x = start.clone();
        if i > 0 {
            x[i - 1] += step[i - 1];
        }
        let fx = f(x.as_slice());
        if !fx.is_finite() {
            return Err(RigidFitError::NonFiniteObjective);
        }
        simplex.push((x, fx));
    }
    let mut eval = |x: &DVector<f64>| {
        let v = f(x.as_slice());
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut iterations = 0;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if iterations >= max_iter || simplex[n].1 - simplex[0].1 < tol || n == 0 {
            break;
        }
        iterations += 1;
        let centroid = simplex[..n].iter().fold(DVector::zeros(n), |a, (x, _)| a + x) / n as f64;
        let worst = simplex[n].clone();
        let xr = &centroid + (&centroid - &worst.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = &centroid + (&xr - &centroid) * 2.0;
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc, accept) = if fr < worst.1 {
                let xc = &centroid + (&xr - &centroid) * 0.5;
                let fc = eval(&xc);
                (xc, fc, fc <= fr)
            } else {
                let xc = &centroid + (&worst.0 - &centroid) * 0.5;
                let fc = eval(&xc);
                (xc, fc, fc < worst.1)
            };
            if accept {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x = &best + (&v.0 - &best) * 0.5;
                    let fx = eval(&x);
                    *v = (x, fx);
                }
            }
        }
    }
    let (x, fx) = simplex.swap_remove(0);
    Ok(SimplexResult { x: x.as_slice().to_vec(), f: fx, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub params: RigidParams,
    /// Full-resolution IoU of the initial placement.
    pub iou_before: f64,
    /// Full-resolution IoU of the returned placement.
    pub iou_after: f64,
    pub iterations: usize,
}

/// Full-resolution IoU of the reference moved by `p` against `mask`.
pub fn fit_iou(
    reference: &KeyframeEntry,
    p: &RigidParams,
    mask: &SilhouetteMask,
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
) -> Result<f64, RigidFitError> {
    let sil = rasterize_silhouette(&reference.transformed(p), faces, k, 1)?;
    Ok(iou(&sil, mask)?)
}

/// Aligns `reference` to `mask` by Nelder-Mead over `(ω, c)` on the
/// downscaled raster, restarting the simplex around the best point while
/// that still lowers the objective. An empty mask returns `init` unchanged.
pub fn fit_frame(
    reference: &KeyframeEntry,
    mask: &SilhouetteMask,
    init: &RigidParams,
    neighbor: Option<&NeighborPrior>,
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
    config: &RigidFitConfig,
) -> Result<FitOutcome, RigidFitError> {
    if mask.width() != k.width || mask.height() != k.height {
        return Err(RigidFitError::DimensionMismatch(format!(
            "mask is {}×{}, camera is {}×{}",
            mask.width(),
            mask.height(),
            k.width,
            k.height
        )));
    }
    let iou_before = fit_iou(reference, init, mask, faces, k)?;
    if mask.is_empty() {
        return Ok(FitOutcome { params: *init, iou_before, iou_after: iou_before, iterations: 0 });
    }
    let small = mask.downsample(config.downscale)?;
    let target = FitTarget { mask: &small, intrinsics: k, downscale: config.downscale, faces };
    let step = [
        config.rotation_step,
        config.rotation_step,
        config.rotation_step,
        config.translation_step,
        config.translation_step,
        config.translation_step,
    ];
    let objective = |x: &[f64]| rigid_objective(&RigidParams::from_slice(x), reference, &target, neighbor, config);
    let mut x = init.to_vec();
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..=config.restarts {
        let res = nelder_mead(objective, &x, &step, config.max_iter, config.fit_tol)?;
        iterations += res.iterations;
        let improved = res.f < best - config.fit_tol;
        x = res.x;
        best = res.f;
        if !improved {
            break;
        }
    }
    let params = RigidParams::from_slice(&x);
    let iou_after = fit_iou(reference, &params, mask, faces, k)?;
    Ok(FitOutcome { params, iou_before, iou_after, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFit {
    pub index: u64,
    pub pre_iou: f64,
    pub post_iou: f64,
    pub reference: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FallbackReport {
    pub fits: Vec<FrameFit>,
    /// Frames that would have triggered but have an empty mask.
    pub skipped_empty_mask: Vec<u64>,
}

impl FallbackReport {
    pub fn fitted_frames(&self) -> Vec<u64> {
        self.fits.iter().map(|f| f.index).collect()
    }
}

/// Builds the pool in frame order: the first valid frame always enters,
/// later valid frames when their IoU exceeds `tau_q`.
pub fn build_pool(
    frames: &[FrameRecord],
    ious: &[f64],
    model: &BodyModel,
    config: &RigidFitConfig,
) -> Result<KeyframePool, RigidFitError> {
    let mut pool = KeyframePool::new();
    for (f, &q) in frames.iter().zip(ious) {
        let (true, Some(p)) = (f.valid, f.params.as_ref()) else { continue };
        if !pool.is_empty() && q <= config.tau_q {
            continue;
        }
        let verts = pose_mesh(model, &p.pose, &p.shape, &p.placement)?;
        pool.admit(KeyframeEntry::new(f.index, q, p.clone(), verts), config.tau_q);
    }
    Ok(pool)
}

/// Replaces low-IoU frames (or every frame in full mode) by rigid fits of
/// the selected reference. `ious` holds each frame's pre-fit IoU against
/// its mask. Frames at or after the first pool entry are processed
/// forward, earlier ones backward; each fit starts from the nearest
/// already-processed neighbor. Fitted placements are then smoothed by a
/// centered moving average over fitted frames only.
pub fn run_rigid_fallback(
    frames: &[FrameRecord],
    masks: &[SilhouetteMask],
    ious: &[f64],
    pool: &KeyframePool,
    model: &BodyModel,
    k: &CameraIntrinsics,
    config: &RigidFitConfig,
) -> Result<(Vec<FrameRecord>, FallbackReport), RigidFitError> {
    config.validate()?;
    if masks.len() != frames.len() || ious.len() != frames.len() {
        return Err(RigidFitError::DimensionMismatch(format!(
            "{} frames, {} masks, {} IoU values",
            frames.len(),
            masks.len(),
            ious.len()
        )));
    }
    let triggers: Vec<bool> = frames
        .iter()
        .zip(ious)
        .map(|(f, &q)| config.mode == FitMode::Full || f.params.is_none() || q < config.tau_iou)
        .collect();
    let mut out = frames.to_vec();
    let mut report = FallbackReport::default();
    if !triggers.iter().zip(masks).any(|(&t, m)| t && !m.is_empty()) {
        report.skipped_empty_mask =
            frames.iter().zip(&triggers).filter(|(_, t)| **t).map(|(f, _)| f.index).collect();
        return Ok((out, report));
    }
    let Some(first) = pool.entries().first() else {
        return Err(RigidFitError::NoReference("keyframe pool is empty".into()));
    };
    let start = frames.iter().position(|f| f.index == first.frame_index).ok_or_else(|| {
        RigidFitError::NoReference(format!("pool entry {} is not in the sequence", first.frame_index))
    })?;

    let mut fitted = vec![false; frames.len()];
    let mut fits: Vec<Option<FrameFit>> = vec![None; frames.len()];
    let order = (start..frames.len())
        .map(|i| (i, PassDirection::Forward))
        .chain((0..start).rev().map(|i| (i, PassDirection::Backward)));
    for (i, dir) in order {
        if !triggers[i] {
            continue;
        }
        if masks[i].is_empty() {
            report.skipped_empty_mask.push(frames[i].index);
            continue;
        }
        let t = frames[i].index;
        let reference = select_reference(pool, t, dir, config.tau_d)?;
        let neighbor = nearest_processed(&out, i, dir, start).map(|(j, placement)| NeighborPrior {
            params: reference.params_for(&placement),
            gap: frames[j].index.abs_diff(t),
        });
        let init = neighbor.map_or_else(RigidParams::identity, |n| n.params);
        let outcome = fit_frame(reference, &masks[i], &init, neighbor.as_ref(), model.faces(), k, config)?;
        out[i].params = Some(FrameParams { placement: reference.placement_for(&outcome.params), ..reference.params.clone() });
        fitted[i] = true;
        fits[i] = Some(FrameFit {
            index: t,
            pre_iou: ious[i],
            post_iou: outcome.iou_after,
            reference: reference.frame_index,
            iterations: outcome.iterations,
        });
    }

    smooth_fitted(&mut out, &fitted, config.traj_window);
    for (i, fit) in fits.iter_mut().enumerate() {
        if let Some(fit) = fit {
            let p = out[i].params.as_ref().expect("fitted frames carry params");
            let verts = pose_mesh(model, &p.pose, &p.shape, &p.placement)?;
            fit.post_iou = iou(&rasterize_silhouette(&verts, model.faces(), k, 1)?, &masks[i])?;
        }
    }
    report.fits = fits.into_iter().flatten().collect();
    report.skipped_empty_mask.sort_unstable();
    Ok((out, report))
}

/// Placement of the nearest frame already final in the current pass.
fn nearest_processed(
    out: &[FrameRecord],
    i: usize,
    dir: PassDirection,
    start: usize,
) -> Option<(usize, GlobalPlacement)> {
    let pick = |j: usize| out[j].params.as_ref().map(|p| (j, p.placement));
    match dir {
        PassDirection::Forward => (start..i).rev().find_map(pick),
        PassDirection::Backward => (i + 1..out.len()).find_map(pick),
    }
}

fn smooth_fitted(frames: &mut [FrameRecord], fitted: &[bool], window: usize) {
    if window <= 1 {
        return;
    }
    let half = window / 2;
    let original: Vec<Option<GlobalPlacement>> =
        frames.iter().map(|f| f.params.as_ref().map(|p| p.placement)).collect();
    for i in 0..frames.len() {
        if !fitted[i] {
            continue;
        }
        let center = original[i].expect("fitted frames carry params");
        let rc = center.matrix();
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(frames.len() - 1);
        let (mut w, mut t, mut n) = (Vector3::zeros(), Vector3::zeros(), 0.0);
        for j in lo..=hi {
            if let (true, Some(p)) = (fitted[j], original[j]) {
                w += rotation_log(&(p.matrix() * rc.transpose()));
                t += p.translation;
                n += 1.0;
            }
        }
        let placement = GlobalPlacement {
            rotation: matrix_to_aa(&(aa_to_matrix(&(w / n)) * rc)).expect("product of rotations"),
            translation: t / n,
        };
        if let Some(p) = frames[i].params.as_mut() {
            p.placement = placement;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{PoseParams, ShapeParams};
    use crate::geometry::geodesic_distance;
    use crate::synthgen::{generate_scenario, make_procedural_body, ScenarioSpec};
    use proptest::prelude::*;

    fn entry(k: u64, q: f64) -> KeyframeEntry {
        let params = FrameParams {
            pose: PoseParams::zeros(1),
            shape: ShapeParams::neutral(0),
            placement: GlobalPlacement::identity(),
        };
        KeyframeEntry::new(k, q, params, vec![Vector3::zeros()])
    }

    fn pool_of(items: &[(u64, f64)]) -> KeyframePool {
        KeyframePool { entries: items.iter().map(|&(k, q)| entry(k, q)).collect() }
    }

    #[test]
    fn pool_admission() {
        let mut pool = KeyframePool::new();
        assert!(pool.admit(entry(0, 0.4), 0.6));
        assert!(!pool.admit(entry(1, 0.59), 0.6));
        assert!(!pool.admit(entry(2, 0.6), 0.6));
        assert!(pool.admit(entry(3, 0.61), 0.6));
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.best().unwrap().frame_index, 3);
    }

    #[test]
    fn reference_selection_examples() {
        let pool = pool_of(&[(10, 0.9), (40, 0.9)]);
        assert_eq!(select_reference(&pool, 42, PassDirection::Forward, 50.0).unwrap().frame_index, 40);
        let pool = pool_of(&[(0, 0.95), (50, 0.95 * (-1f64).exp())]);
        assert_eq!(select_reference(&pool, 50, PassDirection::Forward, 50.0).unwrap().frame_index, 50);
        let pool = pool_of(&[(7, 0.3)]);
        assert_eq!(select_reference(&pool, 100, PassDirection::Forward, 50.0).unwrap().frame_index, 7);
        assert!(select_reference(&pool, 3, PassDirection::Forward, 50.0).is_err());
        assert_eq!(select_reference(&pool, 3, PassDirection::Backward, 50.0).unwrap().frame_index, 7);
    }

    proptest! {
        #[test]
        fn selection_matches_exhaustive_scoring(
            items in prop::collection::btree_map(0u64..300, 0.0f64..1.0, 1..100),
            t in 0u64..300,
        ) {
            let pool = pool_of(&items.into_iter().collect::<Vec<_>>());
            for dir in [PassDirection::Forward, PassDirection::Backward] {
                let eligible: Vec<&KeyframeEntry> = pool.entries.iter().filter(|e| match dir {
                    PassDirection::Forward => e.frame_index <= t,
                    PassDirection::Backward => e.frame_index >= t,
                }).collect();
                match select_reference(&pool, t, dir, 50.0) {
                    Ok(chosen) => {
                        let s = reference_score(chosen, t, 50.0);
                        for e in &eligible {
                            prop_assert!(reference_score(e, t, 50.0) <= s * (1.0 + 1e-12));
                        }
                    }
                    Err(_) => prop_assert!(eligible.is_empty()),
                }
            }
        }
    }

    #[test]
    fn simplex_oracles() {
        let quad = nelder_mead(|x| x[0] * x[0] + x[1] * x[1], &[1.0, 1.0], &[0.1, 0.1], 200, 0.0).unwrap();
        assert!((quad.x[0].powi(2) + quad.x[1].powi(2)).sqrt() < 1e-4);
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(rosen, &[-1.2, 1.0], &[0.1, 0.1], 500, 0.0).unwrap();
        assert!(r.f < 1e-3, "{r:?}");
        let flat = nelder_mead(|_| 4.0, &[0.3, -0.2], &[0.1, 0.1], 100, 1e-9).unwrap();
        assert_eq!((flat.x, flat.f, flat.iterations), (vec![0.3, -0.2], 4.0, 0));
        assert!(matches!(nelder_mead(|_| f64::NAN, &[0.0], &[1.0], 10, 0.0), Err(RigidFitError::NonFiniteObjective)));
    }

    proptest! {
        #[test]
        fn simplex_never_worse_than_start(a in -3.0f64..3.0, b in -3.0f64..3.0, iters in 0usize..50) {
            let f = |x: &[f64]| (x[0] - 0.5).abs() + (x[1] * 3.0).sin() + x[1] * x[1];
            let r = nelder_mead(f, &[a, b], &[0.2, 0.2], iters, 0.0).unwrap();
            prop_assert!(r.f <= f(&[a, b]));
            prop_assert!(r.iterations <= iters);
        }
    }

    struct Scene {
        model: BodyModel,
        k: CameraIntrinsics,
        reference: KeyframeEntry,
        mask: SilhouetteMask,
    }

    fn scene() -> Scene {
        let model = make_procedural_body();
        let spec = ScenarioSpec { n_frames: 2, ..ScenarioSpec::clean(0) };
        let b = generate_scenario(&spec, &model).unwrap();
        let p = b.gt_frames[0].params.clone().unwrap();
        let verts = pose_mesh(&model, &p.pose, &p.shape, &p.placement).unwrap();
        Scene { reference: KeyframeEntry::new(0, 1.0, p, verts), mask: b.gt_masks[0].clone(), k: b.intrinsics, model }
    }

    #[test]
    fn objective_examples() {
        let s = scene();
        let cfg = RigidFitConfig::default();
        let target = FitTarget { mask: &s.mask, intrinsics: &s.k, downscale: 1, faces: s.model.faces() };
        let id = RigidParams::identity();
        assert_eq!(rigid_objective(&id, &s.reference, &target, None, &cfg), -1.0);
        let n = NeighborPrior { params: RigidParams { omega: Vector3::new(0.2, 0.0, 0.0), ..id }, gap: 1 };
        assert!((rigid_objective(&id, &s.reference, &target, Some(&n), &cfg) - (-1.0 + 0.02)).abs() < 1e-12);
        let far = NeighborPrior { gap: 26, ..n };
        assert_eq!(rigid_objective(&id, &s.reference, &target, Some(&far), &cfg), -1.0);
        let off = RigidParams { translation: Vector3::new(50.0, 0.0, 0.0), ..id };
        assert!(rigid_objective(&off, &s.reference, &target, None, &cfg) >= 0.0);
        let behind = RigidParams { translation: Vector3::new(0.0, 0.0, -10.0), ..id };
        assert_eq!(rigid_objective(&behind, &s.reference, &target, None, &cfg), 1.0);
    }

    #[test]
    fn placement_conversions_agree() {
        let s = scene();
        let p = RigidParams { omega: Vector3::new(0.1, -0.3, 0.2), translation: Vector3::new(0.05, 0.1, -0.2) };
        let placement = s.reference.placement_for(&p);
        let fp = &s.reference.params;
        let verts = pose_mesh(&s.model, &fp.pose, &fp.shape, &placement).unwrap();
        for (a, b) in verts.iter().zip(s.reference.transformed(&p)) {
            assert!((a - b).norm() < 1e-9);
        }
        let back = s.reference.params_for(&placement);
        assert!((back.omega - p.omega).norm() < 1e-9 && (back.translation - p.translation).norm() < 1e-9);
    }

    #[test]
    fn fit_fixed_point_and_recovery() {
        let s = scene();
        let cfg = RigidFitConfig::default();
        let id = RigidParams::identity();
        let fixed = fit_frame(&s.reference, &s.mask, &id, None, s.model.faces(), &s.k, &cfg).unwrap();
        assert!(fixed.params.omega.norm() < 0.02 && fixed.params.translation.norm() < 0.01, "{fixed:?}");
        assert!(fixed.iou_after >= 0.98);

        // 10° about world up, expressed in the camera frame, plus a lateral shift
        let up_cam = s.reference.params.placement.matrix() * Vector3::new(0.0, 0.0, 1.0);
        let truth = RigidParams { omega: -up_cam * 10f64.to_radians(), translation: Vector3::new(0.05, 0.0, 0.0) };
        let moved = rasterize_silhouette(&s.reference.transformed(&truth), s.model.faces(), &s.k, 1).unwrap();
        let fit = fit_frame(&s.reference, &moved, &id, None, s.model.faces(), &s.k, &cfg).unwrap();
        assert!(geodesic_distance(&fit.params.omega, &truth.omega) < 0.05, "{fit:?}");
        assert!((fit.params.translation - truth.translation).norm() < 0.02, "{fit:?}");
        assert!(fit.iou_after >= 0.9);
        assert!(fit.iou_after >= fit.iou_before - 0.02);
    }

    #[test]
    fn empty_mask_returns_init() {
        let s = scene();
        let init = RigidParams { omega: Vector3::new(0.0, 0.1, 0.0), ..RigidParams::identity() };
        let empty = SilhouetteMask::empty(s.k.width, s.k.height);
        let out = fit_frame(&s.reference, &empty, &init, None, s.model.faces(), &s.k, &RigidFitConfig::default()).unwrap();
        assert_eq!(out.params, init);
        assert_eq!((out.iou_after, out.iterations), (0.0, 0));
    }

    #[test]
    fn depth_stays_near_reference_on_small_mask() {
        let s = scene();
        // keep only a small blob of the silhouette
        let (cx, cy) = s.mask.centroid().unwrap();
        let mut small = SilhouetteMask::empty(s.k.width, s.k.height);
        for (x, y) in s.mask.pixels() {
            if (x as f64 - cx).abs() < 12.0 && (y as f64 - cy).abs() < 12.0 {
                small.set(x, y, true);
            }
        }
        let fit = fit_frame(&s.reference, &small, &RigidParams::identity(), None, s.model.faces(), &s.k, &RigidFitConfig::default())
            .unwrap();
        let z_ref = s.reference.centroid.z;
        assert!(fit.params.translation.z.abs() < 0.15 * z_ref, "{fit:?}");
    }

    #[test]
    fn fitted_mesh_is_rigid() {
        let s = scene();
        let p = RigidParams { omega: Vector3::new(0.4, -0.1, 0.7), translation: Vector3::new(0.3, -0.2, 0.5) };
        let moved = s.reference.transformed(&p);
        let v = &s.reference.posed_vertices;
        for (i, j) in [(0usize, 100usize), (5, 2000), (17, 3000), (1500, 1501)] {
            let d0 = (v[i] - v[j]).norm();
            assert!(((moved[i] - moved[j]).norm() - d0).abs() <= 1e-7 * d0);
        }
    }

    #[test]
    fn fallback_leaves_good_frames_untouched() {
        let model = make_procedural_body();
        let spec = ScenarioSpec { n_frames: 12, orbit_degrees: 11.5, width: 380, height: 214, ..ScenarioSpec::clean(1) };
        let b = generate_scenario(&spec, &model).unwrap();
        let cfg = RigidFitConfig::default();
        let mut frames = b.gt_frames.clone();
        // corrupt two frames so they trigger
        for i in [4usize, 9] {
            let p = frames[i].params.as_mut().unwrap();
            p.placement.translation.x += 0.8;
        }
        let ious: Vec<f64> = frames
            .iter()
            .zip(&b.masks)
            .map(|(f, m)| {
                let p = f.params.as_ref().unwrap();
                let v = pose_mesh(&model, &p.pose, &p.shape, &p.placement).unwrap();
                iou(&rasterize_silhouette(&v, model.faces(), &b.intrinsics, 1).unwrap(), m).unwrap()
            })
            .collect();
        let pool = build_pool(&frames, &ious, &model, &cfg).unwrap();
        assert_eq!(pool.len(), 10);
        let (out, report) = run_rigid_fallback(&frames, &b.masks, &ious, &pool, &model, &b.intrinsics, &cfg).unwrap();
        assert_eq!(report.fitted_frames(), vec![4, 9]);
        for i in 0..12 {
            if i != 4 && i != 9 {
                assert_eq!(out[i], frames[i]);
            }
        }
        for f in &report.fits {
            assert!(f.post_iou > 0.9, "{f:?}");
        }
        // a sequence with nothing below threshold is returned unchanged
        let (same, r) = run_rigid_fallback(&b.gt_frames, &b.masks, &vec![1.0; 12], &pool, &model, &b.intrinsics, &cfg).unwrap();
        assert_eq!(same, b.gt_frames);
        assert!(r.fits.is_empty());
        assert!(matches!(
            run_rigid_fallback(&frames, &b.masks, &ious, &KeyframePool::new(), &model, &b.intrinsics, &cfg),
            Err(RigidFitError::NoReference(_))
        ));
    }
}
