//! Orbiting-camera scenario around a static supine body, with corrupted
//! per-frame predictions.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::body::default_base_pose;
use super::SynthError;
use crate::bodymodel::{pose_mesh, BodyModel, GlobalPlacement, PoseParams, ShapeParams};
use crate::frames::{FrameParams, FrameRecord};
use crate::geometry::{aa_to_matrix, matrix_to_aa, rasterize_silhouette, CameraIntrinsics, SilhouetteMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionWindow {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub visible_fraction: f64,
    pub style: OcclusionStyle,
}

impl Default for OcclusionWindow {
    fn default() -> Self {
        Self { start: 100, end: 120, visible_fraction: 0.2, style: OcclusionStyle::Crop }
    }
}

/// How an occluded mask is reduced to its visible fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionStyle {
    /// Keep the pixels deepest inside the silhouette.
    Erode,
    /// Keep one end of the silhouette along its principal axis.
    Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// RMS rotation angle added to each non-root joint.
    pub pose_jitter_sigma: f64,
    /// RMS rotation angle added to the global rotation.
    pub rotation_jitter_sigma: f64,
    /// Per-axis standard deviation of the translation noise.
    pub translation_jitter_sigma: f64,
    pub shape_jitter_sigma: f64,
    /// Standard deviation of the log scale.
    pub scale_jitter_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub outlier_translation: f64,
    pub dropout_rate: f64,
    pub occlusion_windows: Vec<OcclusionWindow>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pose_jitter_sigma: 0.05,
            rotation_jitter_sigma: 0.02,
            translation_jitter_sigma: 0.02,
            shape_jitter_sigma: 0.3,
            scale_jitter_sigma: 0.02,
            outlier_rate: 0.05,
            outlier_magnitude: 0.9,
            outlier_translation: 0.3,
            dropout_rate: 0.01,
            occlusion_windows: vec![OcclusionWindow::default()],
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            pose_jitter_sigma: 0.0,
            rotation_jitter_sigma: 0.0,
            translation_jitter_sigma: 0.0,
            shape_jitter_sigma: 0.0,
            scale_jitter_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            outlier_translation: 0.0,
            dropout_rate: 0.0,
            occlusion_windows: Vec::new(),
        }
    }

    fn has_jitter(&self) -> bool {
        [
            self.pose_jitter_sigma,
            self.rotation_jitter_sigma,
            self.translation_jitter_sigma,
            self.shape_jitter_sigma,
            self.scale_jitter_sigma,
        ]
        .iter()
        .any(|s| *s > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub fps: f64,
    pub orbit_degrees: f64,
    pub start_degrees: f64,
    /// Horizontal distance from the body center to the camera path.
    pub orbit_radius: f64,
    pub camera_height: f64,
    pub width: u32,
    pub height: u32,
    pub base_pose: PoseParams,
    pub base_shape: ShapeParams,
    pub noise: NoiseSpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 375,
            fps: 25.0,
            orbit_degrees: 360.0,
            start_degrees: 0.0,
            orbit_radius: 3.0,
            camera_height: 1.5,
            width: 760,
            height: 428,
            base_pose: default_base_pose(),
            base_shape: ShapeParams::neutral(super::body::BETA_COUNT),
            noise: NoiseSpec::default(),
        }
    }
}

impl ScenarioSpec {
    /// Default geometry with no corruption at all.
    pub fn clean(seed: u64) -> Self {
        Self { seed, noise: NoiseSpec::none(), ..Self::default() }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = 0.9 * self.width as f64;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_frames < 2 {
            return bad(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        if !(self.fps > 0.0) || !self.orbit_degrees.is_finite() || !self.start_degrees.is_finite() {
            return bad("fps must be positive and orbit angles finite".into());
        }
        if !(self.orbit_radius > 0.0) || !self.camera_height.is_finite() {
            return bad("orbit_radius must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("raster must be at least 1×1".into());
        }
        if !(self.base_shape.scale > 0.0) || !self.base_pose.is_finite() {
            return bad("base shape scale must be positive and base pose finite".into());
        }
        let n = &self.noise;
        for (name, r) in [("outlier_rate", n.outlier_rate), ("dropout_rate", n.dropout_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, s) in [
            ("pose_jitter_sigma", n.pose_jitter_sigma),
            ("rotation_jitter_sigma", n.rotation_jitter_sigma),
            ("translation_jitter_sigma", n.translation_jitter_sigma),
            ("shape_jitter_sigma", n.shape_jitter_sigma),
            ("scale_jitter_sigma", n.scale_jitter_sigma),
            ("outlier_magnitude", n.outlier_magnitude),
            ("outlier_translation", n.outlier_translation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        for w in &n.occlusion_windows {
            if w.start >= w.end || w.end > self.n_frames {
                return bad(format!("occlusion window [{}, {}) outside [0, {})", w.start, w.end, self.n_frames));
            }
            if !(0.0..=1.0).contains(&w.visible_fraction) {
                return bad("visible_fraction must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedFrame {
    pub index: u64,
    pub kinds: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionLog {
    pub frames: Vec<InjectedFrame>,
}

impl InjectionLog {
    pub fn frames_of_kind(&self, kind: &str) -> Vec<u64> {
        self.frames.iter().filter(|f| f.kinds.iter().any(|k| k == kind)).map(|f| f.index).collect()
    }
}

/// Everything a scenario produces, in memory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub spec: ScenarioSpec,
    pub model: BodyModel,
    pub intrinsics: CameraIntrinsics,
    pub gt_frames: Vec<FrameRecord>,
    pub pred_frames: Vec<FrameRecord>,
    /// Observed masks, one per frame (empty on dropout frames).
    pub masks: Vec<SilhouetteMask>,
    pub gt_masks: Vec<SilhouetteMask>,
    pub gt_vertices: Option<Vec<Vec<Vector3<f64>>>>,
    pub injection_log: InjectionLog,
}

pub fn mask_name(dir: &str, index: usize) -> String {
    format!("{dir}/{index:06}.pgm")
}

/// Body-to-world rotation for a supine subject: head along +x, face up (+y).
fn supine_rotation() -> Matrix3<f64> {
    Matrix3::from_columns(&[Vector3::z(), Vector3::x(), Vector3::y()])
}

/// World-to-camera rotation for a camera at `p` aimed at the origin
/// (camera x right, y down, z forward).
fn look_at_origin(p: &Vector3<f64>) -> Matrix3<f64> {
    let forward = (-p).normalize();
    let right = forward.cross(&Vector3::y()).normalize();
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

/// Ground-truth placement of the body for each frame of the orbit, plus
/// the body's horizontal bounding radius.
pub fn orbit_placements(spec: &ScenarioSpec, model: &BodyModel) -> Result<(Vec<GlobalPlacement>, f64), SynthError> {
    let local = pose_mesh(model, &spec.base_pose, &spec.base_shape, &GlobalPlacement::identity())?;
    let r_bw = supine_rotation();
    let world: Vec<Vector3<f64>> = local.iter().map(|v| r_bw * v).collect();
    let lo = world.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = world.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let t_bw = -(lo + hi) / 2.0;
    let reach = world.iter().map(|v| (v + t_bw).xz().norm()).fold(0.0, f64::max);
    if spec.orbit_radius <= reach + 0.1 {
        return Err(SynthError::RadiusTooSmall { radius: spec.orbit_radius, body: reach });
    }
    let placements = (0..spec.n_frames)
        .map(|t| {
            let phi = (spec.start_degrees + spec.orbit_degrees * t as f64 / spec.n_frames as f64).to_radians();
            let p = Vector3::new(spec.orbit_radius * phi.cos(), spec.camera_height, spec.orbit_radius * phi.sin());
            let r_wc = look_at_origin(&p);
            GlobalPlacement {
                rotation: matrix_to_aa(&(r_wc * r_bw)).expect("product of rotations"),
                translation: r_wc * (t_bw - p),
            }
        })
        .collect();
    Ok((placements, reach))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Outlier,
    Dropout,
    Occlusion,
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn rotate_aa(aa: &Vector3<f64>, delta: &Vector3<f64>) -> Vector3<f64> {
    matrix_to_aa(&(aa_to_matrix(delta) * aa_to_matrix(aa))).expect("product of rotations")
}

fn corrupt(truth: &FrameParams, noise: &NoiseSpec, perturb: bool, rng: &mut ChaCha8Rng) -> FrameParams {
    let mut p = truth.clone();
    let joints = p.pose.joint_count();
    if noise.pose_jitter_sigma > 0.0 {
        let s = noise.pose_jitter_sigma / 3f64.sqrt();
        for v in p.pose.0.iter_mut().skip(3) {
            *v += gaussian(rng, s);
        }
    }
    if noise.rotation_jitter_sigma > 0.0 {
        let s = noise.rotation_jitter_sigma / 3f64.sqrt();
        let delta = Vector3::from_fn(|_, _| gaussian(rng, s));
        p.placement.rotation = rotate_aa(&p.placement.rotation, &delta);
    }
    if noise.translation_jitter_sigma > 0.0 {
        p.placement.translation += Vector3::from_fn(|_, _| gaussian(rng, noise.translation_jitter_sigma));
    }
    if noise.shape_jitter_sigma > 0.0 {
        for b in p.shape.beta.iter_mut() {
            *b += gaussian(rng, noise.shape_jitter_sigma);
        }
    }
    if noise.scale_jitter_sigma > 0.0 {
        p.shape.scale *= gaussian(rng, noise.scale_jitter_sigma).exp();
    }
    if perturb && joints > 1 {
        let u = unit_vector(rng, 3 * (joints - 1));
        for (v, d) in p.pose.0.iter_mut().skip(3).zip(u) {
            *v += noise.outlier_magnitude * d;
        }
        let axis = unit_vector(rng, 3);
        let delta = Vector3::new(axis[0], axis[1], axis[2]) * noise.outlier_magnitude;
        p.placement.rotation = rotate_aa(&p.placement.rotation, &delta);
        let dir = unit_vector(rng, 3);
        p.placement.translation += Vector3::new(dir[0], dir[1], dir[2]) * noise.outlier_translation;
    }
    p
}

/// Chamfer (3-4) distance from each pixel to the nearest background pixel
/// or the raster border.
fn inner_distance(mask: &SilhouetteMask) -> Vec<u32> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut d: Vec<u32> =
        (0..w * h).map(|i| if mask.get((i % w) as u32, (i / w) as u32) { u32::MAX / 2 } else { 0 }).collect();
    let at = |d: &[u32], x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [(-1, 0, 3), (0, -1, 3), (-1, -1, 4), (1, -1, 4)]
                .iter()
                .map(|&(dx, dy, c)| at(&d, x + dx, y + dy) + c)
                .min()
                .unwrap();
            d[i] = d[i].min(best);
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [(1, 0, 3), (0, 1, 3), (1, 1, 4), (-1, 1, 4)]
                .iter()
                .map(|&(dx, dy, c)| at(&d, x + dx, y + dy) + c)
                .min()
                .unwrap();
            d[i] = d[i].min(best);
        }
    }
    d
}

/// Keeps the `round(fraction · area)` pixels deepest inside the
/// silhouette; ties go to raster order.
pub fn erode_to_fraction(mask: &SilhouetteMask, fraction: f64) -> SilhouetteMask {
    let keep = (fraction * mask.area() as f64).round() as usize;
    let w = mask.width() as usize;
    let d = inner_distance(mask);
    let mut order: Vec<(u32, usize)> = d.iter().enumerate().filter(|(_, v)| **v > 0).map(|(i, v)| (*v, i)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = SilhouetteMask::empty(mask.width(), mask.height());
    for &(_, i) in order.iter().take(keep) {
        out.set((i % w) as u32, (i / w) as u32, true);
    }
    out
}

/// Keeps the `round(fraction · area)` pixels lying furthest along the
/// silhouette's principal axis.
pub fn crop_to_fraction(mask: &SilhouetteMask, fraction: f64) -> SilhouetteMask {
    let pixels: Vec<(u32, u32)> = mask.pixels().collect();
    let keep = (fraction * pixels.len() as f64).round() as usize;
    let mut out = SilhouetteMask::empty(mask.width(), mask.height());
    if keep == 0 {
        return out;
    }
    let n = pixels.len() as f64;
    let (mx, my) = pixels.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pixels {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // major eigenvector of the 2×2 covariance
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (mut ax, mut ay) = (angle.cos(), angle.sin());
    if ax < 0.0 || (ax == 0.0 && ay < 0.0) {
        ax = -ax;
        ay = -ay;
    }
    let mut order: Vec<(f64, usize)> =
        pixels.iter().enumerate().map(|(i, &(x, y))| (x as f64 * ax + y as f64 * ay, i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in order.iter().take(keep) {
        let (x, y) = pixels[i];
        out.set(x, y, true);
    }
    out
}

/// Generates a complete scenario. Deterministic for a given `(spec, model)`.
pub fn generate_scenario(spec: &ScenarioSpec, model: &BodyModel) -> Result<Bundle, SynthError> {
    spec.validate()?;
    if spec.base_pose.0.len() != 3 * model.joint_count() || spec.base_shape.beta.len() != model.beta_count() {
        return Err(SynthError::InvalidSpec(format!(
            "base pose/shape sized {}/{} but model needs {}/{}",
            spec.base_pose.0.len(),
            spec.base_shape.beta.len(),
            3 * model.joint_count(),
            model.beta_count()
        )));
    }
    let k = spec.intrinsics();
    let (placements, _) = orbit_placements(spec, model)?;
    let n = spec.n_frames;
    let noise = &spec.noise;

    // corruption schedule
    let mut schedule: Vec<BTreeSet<Kind>> = vec![BTreeSet::new(); n];
    let mut occlusion = vec![None; n];
    for w in &noise.occlusion_windows {
        for t in w.start..w.end {
            schedule[t].insert(Kind::Occlusion);
            occlusion[t] = Some((w.visible_fraction, w.style));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut free: Vec<usize> = (1..n).filter(|t| schedule[*t].is_empty()).collect();
    for (kind, rate) in [(Kind::Dropout, noise.dropout_rate), (Kind::Outlier, noise.outlier_rate)] {
        let count = ((rate * n as f64).round() as usize).min(free.len());
        let mut picked: Vec<usize> = sample(&mut rng, free.len(), count).into_iter().collect();
        picked.sort_unstable();
        for &i in &picked {
            schedule[free[i]].insert(kind);
        }
        let taken: BTreeSet<usize> = picked.into_iter().map(|i| free[i]).collect();
        free.retain(|t| !taken.contains(t));
    }

    let truth: Vec<FrameParams> = placements
        .iter()
        .map(|pl| FrameParams { pose: spec.base_pose.clone(), shape: spec.base_shape.clone(), placement: *pl })
        .collect();

    struct Out {
        gt_vertices: Vec<Vector3<f64>>,
        gt_mask: SilhouetteMask,
        mask: SilhouetteMask,
        pred: Option<FrameParams>,
    }
    let frames: Vec<Out> = (0..n)
        .into_par_iter()
        .map(|t| -> Result<Out, SynthError> {
            let gt = &truth[t];
            let gt_vertices = pose_mesh(model, &gt.pose, &gt.shape, &gt.placement)?;
            let gt_mask = rasterize_silhouette(&gt_vertices, model.faces(), &k, 1)?;
            let kinds = &schedule[t];
            let mut frng = frame_rng(spec.seed, t);
            let perturb = kinds.contains(&Kind::Outlier) || kinds.contains(&Kind::Occlusion);
            let corrupted = corrupt(gt, noise, perturb, &mut frng);
            let (mask, pred) = if kinds.contains(&Kind::Dropout) {
                (SilhouetteMask::empty(k.width, k.height), None)
            } else if let Some((f, style)) = occlusion[t] {
                let visible = match style {
                    OcclusionStyle::Erode => erode_to_fraction(&gt_mask, f),
                    OcclusionStyle::Crop => crop_to_fraction(&gt_mask, f),
                };
                (visible, Some(corrupted))
            } else {
                (gt_mask.clone(), Some(corrupted))
            };
            Ok(Out { gt_vertices, gt_mask, mask, pred })
        })
        .collect::<Result<_, _>>()?;

    let mut log = InjectionLog::default();
    for (t, kinds) in schedule.iter().enumerate() {
        let mut names: Vec<String> = Vec::new();
        if noise.has_jitter() && !kinds.contains(&Kind::Dropout) {
            names.push("jitter".into());
        }
        for kind in kinds {
            names.push(
                match kind {
                    Kind::Outlier => "outlier",
                    Kind::Dropout => "dropout",
                    Kind::Occlusion => "occlusion",
                }
                .into(),
            );
        }
        if !names.is_empty() {
            log.frames.push(InjectedFrame { index: t as u64, kinds: names });
        }
    }

    let mut bundle = Bundle {
        spec: spec.clone(),
        model: model.clone(),
        intrinsics: k,
        gt_frames: Vec::with_capacity(n),
        pred_frames: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        gt_masks: Vec::with_capacity(n),
        gt_vertices: Some(Vec::with_capacity(n)),
        injection_log: log,
    };
    for (t, out) in frames.into_iter().enumerate() {
        bundle.gt_frames.push(FrameRecord {
            index: t as u64,
            valid: true,
            params: Some(truth[t].clone()),
            mask: Some(mask_name("gt_masks", t)),
        });
        bundle.pred_frames.push(FrameRecord {
            index: t as u64,
            valid: out.pred.is_some(),
            params: out.pred,
            mask: Some(mask_name("masks", t)),
        });
        bundle.masks.push(out.mask);
        bundle.gt_masks.push(out.gt_mask);
        if let Some(v) = bundle.gt_vertices.as_mut() {
            v.push(out.gt_vertices);
        }
    }
    Ok(bundle)
}
