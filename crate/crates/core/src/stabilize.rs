//! Streaming parameter stabilization for a static subject.
//!
//! Frames flow through four stages, each of which may hold frames back
//! until it has enough context:
//!
//! 1. per-group outlier gating of pose θ, global rotation r and camera
//!    translation c against the last accepted value;
//! 2. gap filling for frames without a prediction;
//! 3. a centered median filter (smoothing modes only);
//! 4. exponential smoothing, optionally pulled toward a median pose anchor.
//!
//! All state lives in [`Stabilizer`], so a sequence fed in several batches
//! produces exactly the output of a single batch.

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodymodel::{GlobalPlacement, PoseParams, ShapeParams};
use crate::frames::{FrameParams, FrameRecord};
use crate::geometry::{
    aa_to_matrix, geodesic_distance, nearest_representative, rotation_log, so3_geodesic_blend,
};

#[derive(Debug, Error, PartialEq)]
pub enum StabilizeError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("no valid frame in sequence")]
    NoValidFrame,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame index {0} does not increase")]
    OutOfOrder(u64),
    #[error("invalid stabilizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizerConfig {
    pub tau_theta: f64,
    pub tau_r: f64,
    pub tau_c: f64,
    pub median_window: usize,
    pub warmup: usize,
    pub anchor_pull: f64,
    pub ema_static: f64,
    pub ema_dynamic: f64,
    pub n_max: u32,
    pub force_blend: f64,
    pub motion_reset: f64,
    /// Mean consecutive ‖Δθ‖ below which a segment counts as static.
    pub static_motion: f64,
    /// Gate rotations on geodesic instead of axis-angle distance.
    pub geodesic_rotation_gate: bool,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            tau_theta: 0.6,
            tau_r: 0.6,
            tau_c: 0.2,
            median_window: 7,
            warmup: 48,
            anchor_pull: 0.005,
            ema_static: 0.01,
            ema_dynamic: 0.3,
            n_max: 10,
            force_blend: 0.5,
            motion_reset: 0.3,
            static_motion: 0.45,
            geodesic_rotation_gate: false,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), StabilizeError> {
        let bad = |m: &str| Err(StabilizeError::InvalidConfig(m.into()));
        for (name, v) in [
            ("tau_theta", self.tau_theta),
            ("tau_r", self.tau_r),
            ("tau_c", self.tau_c),
            ("motion_reset", self.motion_reset),
            ("static_motion", self.static_motion),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("anchor_pull", self.anchor_pull),
            ("ema_static", self.ema_static),
            ("ema_dynamic", self.ema_dynamic),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(&format!("{name} must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.force_blend) {
            return bad("force_blend must lie in [0, 1]");
        }
        if self.median_window % 2 == 0 {
            return bad("median_window must be odd");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        Ok(())
    }
}

/// Which stages run after outlier gating and gap filling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilizerMode {
    /// Gating only.
    OutlierOnly,
    /// Median filter and adaptive EMA on every parameter group.
    Smooth,
    /// As `Smooth`, with pose pulled toward the anchor and placement
    /// tracked at the dynamic rate.
    SmoothLock,
    /// Anchor-pulled EMA on pose only; no median, no placement smoothing.
    Lock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentClass {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accepted,
    Rejected,
    /// Accepted as a blend after too many consecutive rejections.
    Forced,
}

/// Outlier gate state for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierGate {
    pub tau: f64,
    last: Option<Vec<f64>>,
    reject_count: u32,
}

impl OutlierGate {
    pub fn new(tau: f64) -> Self {
        Self { tau, last: None, reject_count: 0 }
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.last.as_deref()
    }

    pub fn reject_count(&self) -> u32 {
        self.reject_count
    }

    fn step_with(
        &mut self,
        pred: &[f64],
        n_max: u32,
        distance: impl Fn(&[f64], &[f64]) -> f64,
        blend: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, GateDecision), StabilizeError> {
        let Some(last) = &self.last else {
            self.last = Some(pred.to_vec());
            return Ok((pred.to_vec(), GateDecision::Accepted));
        };
        if last.len() != pred.len() {
            return Err(StabilizeError::DimensionMismatch(format!(
                "prediction of length {} for a group of length {}",
                pred.len(),
                last.len()
            )));
        }
        if distance(pred, last) <= self.tau {
            self.reject_count = 0;
            self.last = Some(pred.to_vec());
            return Ok((pred.to_vec(), GateDecision::Accepted));
        }
        if self.reject_count >= n_max {
            let out = blend(pred, last);
            self.reject_count = 0;
            self.last = Some(out.clone());
            return Ok((out, GateDecision::Forced));
        }
        self.reject_count += 1;
        Ok((last.clone(), GateDecision::Rejected))
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

/// Euclidean gate step; the forced blend is `blend·pred + (1−blend)·last`.
pub fn reject_outlier(
    gate: &mut OutlierGate,
    pred: &[f64],
    n_max: u32,
    force_blend: f64,
) -> Result<(Vec<f64>, GateDecision), StabilizeError> {
    gate.step_with(pred, n_max, euclidean, |p, l| lerp(l, p, force_blend))
}

/// Gate step for an axis-angle rotation. The prediction is compared with
/// the representative of its rotation nearest the last accepted vector,
/// so the 2π wrap at angle π does not read as a jump.
pub fn reject_rotation_outlier(
    gate: &mut OutlierGate,
    pred: &Vector3<f64>,
    n_max: u32,
    force_blend: f64,
    geodesic: bool,
) -> Result<(Vector3<f64>, GateDecision), StabilizeError> {
    let v = |s: &[f64]| Vector3::new(s[0], s[1], s[2]);
    let (out, d) = gate.step_with(
        pred.as_slice(),
        n_max,
        |p, l| {
            if geodesic {
                geodesic_distance(&v(p), &v(l))
            } else {
                (nearest_representative(&v(p), &v(l)) - v(l)).norm()
            }
        },
        |p, l| so3_geodesic_blend(&v(l), &v(p), force_blend).as_slice().to_vec(),
    )?;
    Ok((v(&out), d))
}

/// Lower-middle order statistic.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

fn columnwise_median<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Vec<f64> {
    let mut col = Vec::new();
    (0..dim)
        .map(|d| {
            col.clear();
            col.extend(rows.clone().map(|r| r[d]));
            lower_median(&mut col)
        })
        .collect()
}

/// Per-dimension sliding median over a `T × D` series. Windows are
/// clipped at the sequence ends; even-sized windows take the lower middle.
pub fn median_filter(series: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let h = w / 2;
    (0..series.len())
        .map(|t| {
            let lo = t.saturating_sub(h);
            let hi = (t + h).min(series.len() - 1);
            columnwise_median(series[lo..=hi].iter().map(|r| r.as_slice()), series[t].len())
        })
        .collect()
}

/// Static iff mean consecutive ‖Δθ‖ over the window is strictly below
/// `threshold`. Fewer than two poses count as static.
pub fn classify_segment(recent: &[Vec<f64>], threshold: f64) -> SegmentClass {
    if recent.len() < 2 {
        return SegmentClass::Static;
    }
    let motion = recent.windows(2).map(|p| euclidean(&p[1], &p[0])).sum::<f64>() / (recent.len() - 1) as f64;
    if motion < threshold {
        SegmentClass::Static
    } else {
        SegmentClass::Dynamic
    }
}

/// Element-wise (lower) median of the warm-up buffer.
pub fn compute_anchor(buffer: &[Vec<f64>]) -> Vec<f64> {
    columnwise_median(buffer.iter().map(|r| r.as_slice()), buffer[0].len())
}

/// `α·p + (1−α)·[(1−α_a)·prev + α_a·anchor]`
pub fn pose_lock_step(prev: &[f64], pred: &[f64], anchor: &[f64], alpha: f64, alpha_a: f64) -> Vec<f64> {
    prev.iter()
        .zip(pred)
        .zip(anchor)
        .map(|((s, p), a)| alpha * p + (1.0 - alpha) * ((1.0 - alpha_a) * s + alpha_a * a))
        .collect()
}

/// Replaces shape and scale of every frame that carries parameters.
pub fn lock_shape(frames: &[FrameRecord], shape: &ShapeParams) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            if let Some(p) = f.params.as_mut() {
                p.shape = shape.clone();
            }
            f
        })
        .collect()
}

fn interpolate_params(a: &FrameParams, b: &FrameParams, w: f64) -> FrameParams {
    FrameParams {
        pose: PoseParams(lerp(&a.pose.0, &b.pose.0, w)),
        shape: ShapeParams {
            beta: lerp(&a.shape.beta, &b.shape.beta, w),
            scale: (1.0 - w) * a.shape.scale + w * b.shape.scale,
        },
        placement: GlobalPlacement {
            rotation: so3_geodesic_blend(&a.placement.rotation, &b.placement.rotation, w),
            translation: a.placement.translation.lerp(&b.placement.translation, w),
        },
    }
}

/// Frame travelling between stages, tagged with the segment state seen when
/// it passed the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Item {
    record: FrameRecord,
    class: SegmentClass,
    anchor: Option<Vec<f64>>,
}

impl Item {
    fn params(&self) -> &FrameParams {
        self.record.params.as_ref().expect("frames past gap filling carry parameters")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct GapFiller {
    pending: Vec<Item>,
    last_valid: Option<Item>,
}

impl GapFiller {
    fn push(&mut self, item: Item, out: &mut Vec<Item>) {
        if item.record.params.is_none() {
            self.pending.push(item);
            return;
        }
        let next = item.params().clone();
        for mut gap in self.pending.drain(..) {
            gap.record.params = Some(match &self.last_valid {
                Some(prev) => {
                    let (a, b) = (prev.record.index as f64, item.record.index as f64);
                    interpolate_params(prev.params(), &next, (gap.record.index as f64 - a) / (b - a))
                }
                None => next.clone(),
            });
            out.push(gap);
        }
        self.last_valid = Some(item.clone());
        out.push(item);
    }

    fn finish(&mut self, out: &mut Vec<Item>) -> Result<(), StabilizeError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let last = self.last_valid.as_ref().ok_or(StabilizeError::NoValidFrame)?;
        for mut gap in self.pending.drain(..) {
            gap.record.params = Some(last.params().clone());
            out.push(gap);
        }
        Ok(())
    }
}

/// Fills frames without parameters: linear in θ, β, scale and c, geodesic in
/// r, holding the nearest valid frame at the ends.
pub fn interpolate_gaps(frames: &[FrameRecord]) -> Result<Vec<FrameRecord>, StabilizeError> {
    let mut filler = GapFiller::default();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let mut record = f.clone();
        if !record.valid {
            record.params = None;
        }
        filler.push(Item { record, class: SegmentClass::Static, anchor: None }, &mut out);
    }
    filler.finish(&mut out)?;
    Ok(out.into_iter().map(|i| i.record).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct MedianStage {
    buf: VecDeque<Item>,
    cursor: usize,
}

impl MedianStage {
    fn emit(&self, half: usize) -> Item {
        let lo = self.cursor.saturating_sub(half);
        let hi = (self.cursor + half).min(self.buf.len() - 1);
        let window: Vec<&FrameParams> = (lo..=hi).map(|i| self.buf[i].params()).collect();
        let center = &self.buf[self.cursor];
        let c = center.params();

        let pose = columnwise_median(window.iter().map(|p| p.pose.0.as_slice()), c.pose.0.len());
        let beta = columnwise_median(window.iter().map(|p| p.shape.beta.as_slice()), c.shape.beta.len());
        let mut scales: Vec<f64> = window.iter().map(|p| p.shape.scale).collect();
        let scale = lower_median(&mut scales);
        let t = columnwise_median(window.iter().map(|p| p.placement.translation.as_slice()), 3);
        // rotations: median in the tangent space at the center frame
        let rc = aa_to_matrix(&c.placement.rotation);
        let logs: Vec<Vector3<f64>> =
            window.iter().map(|p| rotation_log(&(rc.transpose() * aa_to_matrix(&p.placement.rotation)))).collect();
        let m = columnwise_median(logs.iter().map(|l| l.as_slice()), 3);
        let rotation = rotation_log(&(rc * aa_to_matrix(&Vector3::new(m[0], m[1], m[2]))));

        let mut item = center.clone();
        item.record.params = Some(FrameParams {
            pose: PoseParams(pose),
            shape: ShapeParams { beta, scale },
            placement: GlobalPlacement { rotation, translation: Vector3::new(t[0], t[1], t[2]) },
        });
        item
    }

    fn push(&mut self, item: Item, half: usize, out: &mut Vec<Item>) {
        self.buf.push_back(item);
        while self.buf.len() - 1 - self.cursor >= half {
            out.push(self.emit(half));
            self.cursor += 1;
        }
        while self.cursor > half {
            self.buf.pop_front();
            self.cursor -= 1;
        }
    }

    fn finish(&mut self, half: usize, out: &mut Vec<Item>) {
        while self.cursor < self.buf.len() {
            out.push(self.emit(half));
            self.cursor += 1;
        }
        self.buf.clear();
        self.cursor = 0;
    }
}

/// Streaming stabilizer; see the module docs for the stage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stabilizer {
    config: StabilizerConfig,
    mode: StabilizerMode,
    theta_gate: OutlierGate,
    rotation_gate: OutlierGate,
    translation_gate: OutlierGate,
    recent: VecDeque<Vec<f64>>,
    warmup: Vec<Vec<f64>>,
    anchor: Option<Vec<f64>>,
    class: SegmentClass,
    last_index: Option<u64>,
    dims: Option<(usize, usize)>,
    gaps: GapFiller,
    median: MedianStage,
    smoothed: Option<FrameParams>,
}

impl Stabilizer {
    pub fn new(config: StabilizerConfig, mode: StabilizerMode) -> Result<Self, StabilizeError> {
        config.validate()?;
        Ok(Self {
            theta_gate: OutlierGate::new(config.tau_theta),
            rotation_gate: OutlierGate::new(config.tau_r),
            translation_gate: OutlierGate::new(config.tau_c),
            config,
            mode,
            recent: VecDeque::new(),
            warmup: Vec::new(),
            anchor: None,
            class: SegmentClass::Static,
            last_index: None,
            dims: None,
            gaps: GapFiller::default(),
            median: MedianStage::default(),
            smoothed: None,
        })
    }

    pub fn anchor(&self) -> Option<&[f64]> {
        self.anchor.as_deref()
    }

    pub fn segment_class(&self) -> SegmentClass {
        self.class
    }

    /// Feeds a batch and returns every frame whose output is final.
    pub fn process(&mut self, batch: &[FrameRecord]) -> Result<Vec<FrameRecord>, StabilizeError> {
        let mut out = Vec::new();
        for record in batch {
            let item = self.gate(record)?;
            let mut filled = Vec::new();
            self.gaps.push(item, &mut filled);
            self.after_gap_fill(filled, &mut out);
        }
        Ok(out)
    }

    /// Flushes frames held back for lookahead.
    pub fn finish(&mut self) -> Result<Vec<FrameRecord>, StabilizeError> {
        if self.last_index.is_none() {
            return Err(StabilizeError::EmptyInput);
        }
        let mut filled = Vec::new();
        self.gaps.finish(&mut filled)?;
        let mut out = Vec::new();
        self.after_gap_fill(filled, &mut out);
        if self.uses_median() {
            let mut medians = Vec::new();
            self.median.finish(self.config.median_window / 2, &mut medians);
            for item in medians {
                out.push(self.smooth(item));
            }
        }
        Ok(out)
    }

    fn uses_median(&self) -> bool {
        matches!(self.mode, StabilizerMode::Smooth | StabilizerMode::SmoothLock)
    }

    fn after_gap_fill(&mut self, filled: Vec<Item>, out: &mut Vec<FrameRecord>) {
        for item in filled {
            if self.uses_median() {
                let mut medians = Vec::new();
                self.median.push(item, self.config.median_window / 2, &mut medians);
                for m in medians {
                    out.push(self.smooth(m));
                }
            } else {
                out.push(self.smooth(item));
            }
        }
    }

    fn gate(&mut self, record: &FrameRecord) -> Result<Item, StabilizeError> {
        if self.last_index.is_some_and(|l| record.index <= l) {
            return Err(StabilizeError::OutOfOrder(record.index));
        }
        self.last_index = Some(record.index);
        let mut record = record.clone();
        let params = match (record.valid, record.params.take()) {
            (true, Some(p)) => p,
            _ => return Ok(Item { record, class: self.class, anchor: self.anchor.clone() }),
        };
        let dims = (params.pose.0.len(), params.shape.beta.len());
        if *self.dims.get_or_insert(dims) != dims {
            return Err(StabilizeError::DimensionMismatch(format!(
                "frame {} has pose/beta lengths {:?}, sequence uses {:?}",
                record.index, dims, self.dims
            )));
        }
        let cfg = &self.config;
        let (theta, _) = reject_outlier(&mut self.theta_gate, &params.pose.0, cfg.n_max, cfg.force_blend)?;
        let (rotation, _) = reject_rotation_outlier(
            &mut self.rotation_gate,
            &params.placement.rotation,
            cfg.n_max,
            cfg.force_blend,
            cfg.geodesic_rotation_gate,
        )?;
        let (t, _) = reject_outlier(
            &mut self.translation_gate,
            params.placement.translation.as_slice(),
            cfg.n_max,
            cfg.force_blend,
        )?;
        self.update_anchor(&theta);
        record.params = Some(FrameParams {
            pose: PoseParams(theta),
            shape: params.shape,
            placement: GlobalPlacement { rotation, translation: Vector3::new(t[0], t[1], t[2]) },
        });
        Ok(Item { record, class: self.class, anchor: self.anchor.clone() })
    }

    fn update_anchor(&mut self, theta: &[f64]) {
        let w = self.config.median_window;
        self.recent.push_back(theta.to_vec());
        if self.recent.len() > w {
            self.recent.pop_front();
        }
        let recent: Vec<Vec<f64>> = self.recent.iter().cloned().collect();
        self.class = classify_segment(&recent, self.config.static_motion);
        match &self.anchor {
            None => {
                self.warmup.push(theta.to_vec());
                if self.warmup.len() >= self.config.warmup {
                    self.anchor = Some(compute_anchor(&self.warmup));
                }
            }
            Some(anchor) => {
                if recent.len() == w && euclidean(&compute_anchor(&recent), anchor) > self.config.motion_reset {
                    self.anchor = None;
                    self.warmup.clear();
                    self.warmup.push(theta.to_vec());
                }
            }
        }
    }

    fn smooth(&mut self, item: Item) -> FrameRecord {
        let p = item.params().clone();
        let cfg = &self.config;
        let alpha = match item.class {
            SegmentClass::Static => cfg.ema_static,
            SegmentClass::Dynamic => cfg.ema_dynamic,
        };
        let out = match (&self.smoothed, self.mode) {
            (None, _) | (_, StabilizerMode::OutlierOnly) => p,
            (Some(prev), mode) => {
                let (anchor, alpha_a) = match (&item.anchor, mode) {
                    (Some(a), StabilizerMode::SmoothLock | StabilizerMode::Lock) => (a.as_slice(), cfg.anchor_pull),
                    _ => (prev.pose.0.as_slice(), 0.0),
                };
                let pose = PoseParams(pose_lock_step(&prev.pose.0, &p.pose.0, anchor, alpha, alpha_a));
                match mode {
                    StabilizerMode::Lock => FrameParams { pose, ..p },
                    _ => {
                        let track = if mode == StabilizerMode::SmoothLock { cfg.ema_dynamic } else { alpha };
                        FrameParams {
                            pose,
                            shape: ShapeParams {
                                beta: lerp(&prev.shape.beta, &p.shape.beta, alpha),
                                scale: (1.0 - alpha) * prev.shape.scale + alpha * p.shape.scale,
                            },
                            placement: GlobalPlacement {
                                rotation: so3_geodesic_blend(&prev.placement.rotation, &p.placement.rotation, track),
                                translation: prev.placement.translation.lerp(&p.placement.translation, track),
                            },
                        }
                    }
                }
            }
        };
        self.smoothed = Some(out.clone());
        let mut record = item.record;
        record.params = Some(out);
        record
    }
}

/// Single-batch convenience wrapper around [`Stabilizer`].
pub fn run_stabilizer(
    frames: &[FrameRecord],
    config: &StabilizerConfig,
    mode: StabilizerMode,
) -> Result<Vec<FrameRecord>, StabilizeError> {
    if frames.is_empty() {
        return Err(StabilizeError::EmptyInput);
    }
    let mut s = Stabilizer::new(config.clone(), mode)?;
    let mut out = s.process(frames)?;
    out.extend(s.finish()?);
    Ok(out)
}
