//! Articulated body model and linear blend skinning.
//!
//! A model is a rest-pose template with a kinematic tree, per-vertex skin
//! weights and linear shape blendshapes. [`pose_mesh`] maps
//! `(pose, shape, placement)` to camera-frame vertices:
//!
//! ```text
//! v = R_place · (scale · LBS(template + shape_dirs·β, pose)) + t_place
//! ```
//!
//! The root joint is part of `pose`; the placement rotation is applied on
//! top of it after skinning.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::aa_to_matrix;

const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BodyModelError {
    #[error("cannot read model file {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("model file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("weights not normalized: vertex {vertex} sums to {sum}")]
    WeightsNotNormalized { vertex: usize, sum: f64 },
    #[error("negative skin weight at vertex {vertex}, joint {joint}")]
    NegativeWeight { vertex: usize, joint: usize },
    #[error("cyclic parent array: joint {0} is its own ancestor")]
    CyclicParent(usize),
    #[error("parent array not topologically sorted: parent[{joint}] = {parent}")]
    NotTopological { joint: usize, parent: usize },
    #[error("kinematic tree must have exactly one root at index 0: {0}")]
    BadRoot(String),
    #[error("face {face} references vertex {vertex} but the template has {n} vertices")]
    FaceOutOfRange { face: usize, vertex: u32, n: usize },
}

/// On-disk JSON layout of a body model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyModelFile {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub rest_joints: Vec<[f64; 3]>,
    /// `-1` marks the root.
    pub parent: Vec<i64>,
    /// `N_v × J`
    pub skin_weights: Vec<Vec<f64>>,
    /// `N_v × 3 × N_β`
    pub shape_dirs: Vec<[Vec<f64>; 3]>,
    /// `J × N_v`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_regressor: Option<Vec<Vec<f64>>>,
}

/// Validated body model with skinning caches.
#[derive(Debug, Clone)]
pub struct BodyModel {
    data: BodyModelFile,
    template: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    parent: Vec<Option<usize>>,
    /// Nonzero skin weights per vertex.
    weights: Vec<Vec<(usize, f64)>>,
    /// Nonzero regressor weights per joint.
    regressor: Option<Vec<Vec<(usize, f64)>>>,
    /// Template vertex nearest each rest joint, used without a regressor.
    nearest_vertex: Vec<usize>,
    n_betas: usize,
}

impl PartialEq for BodyModel {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

/// Per-joint axis-angle rotations, flattened to length `3J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseParams(pub Vec<f64>);

impl PoseParams {
    pub fn zeros(joints: usize) -> Self {
        Self(vec![0.0; 3 * joints])
    }

    pub fn joint_count(&self) -> usize {
        self.0.len() / 3
    }

    #[inline]
    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2])
    }

    pub fn set_joint(&mut self, j: usize, aa: &Vector3<f64>) {
        self.0[3 * j..3 * j + 3].copy_from_slice(aa.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
    pub scale: f64,
}

impl ShapeParams {
    pub fn neutral(n_betas: usize) -> Self {
        Self { beta: vec![0.0; n_betas], scale: 1.0 }
    }
}

/// World rotation (axis-angle) and camera-frame translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlacement {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl GlobalPlacement {
    pub fn identity() -> Self {
        Self { rotation: Vector3::zeros(), translation: Vector3::zeros() }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        aa_to_matrix(&self.rotation)
    }

    /// Applies the placement to model-frame points.
    pub fn apply(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let r = self.matrix();
        points.iter().map(|p| r * p + self.translation).collect()
    }

    /// Inverse of [`GlobalPlacement::apply`].
    pub fn strip(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let rt = self.matrix().transpose();
        points.iter().map(|p| rt * (p - self.translation)).collect()
    }
}

fn to_vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn sparse_rows(rows: &[Vec<f64>]) -> Vec<Vec<(usize, f64)>> {
    rows.iter()
        .map(|r| r.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i, *w)).collect())
        .collect()
}

impl BodyModel {
    pub fn load(path: &Path) -> Result<Self, BodyModelError> {
        let text = fs::read_to_string(path).map_err(|e| BodyModelError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, BodyModelError> {
        let data: BodyModelFile = serde_json::from_str(text)?;
        Self::from_file(data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.data).expect("model data is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<(), BodyModelError> {
        fs::write(path, self.to_json()).map_err(|e| BodyModelError::Io(path.display().to_string(), e))
    }

    pub fn file(&self) -> &BodyModelFile {
        &self.data
    }

    /// Validates every invariant and builds the skinning caches.
    pub fn from_file(data: BodyModelFile) -> Result<Self, BodyModelError> {
        use BodyModelError::*;
        let nv = data.template_vertices.len();
        let nj = data.rest_joints.len();
        if nv == 0 || nj == 0 {
            return Err(DimensionMismatch("model needs at least one vertex and one joint".into()));
        }
        if data.parent.len() != nj {
            return Err(DimensionMismatch(format!("parent has {} entries for {nj} joints", data.parent.len())));
        }
        if data.skin_weights.len() != nv {
            return Err(DimensionMismatch(format!("skin_weights has {} rows for {nv} vertices", data.skin_weights.len())));
        }
        if data.shape_dirs.len() != nv {
            return Err(DimensionMismatch(format!("shape_dirs has {} rows for {nv} vertices", data.shape_dirs.len())));
        }
        let n_betas = data.shape_dirs[0][0].len();
        for (v, row) in data.shape_dirs.iter().enumerate() {
            if row.iter().any(|c| c.len() != n_betas) {
                return Err(DimensionMismatch(format!("shape_dirs[{v}] is not 3 × {n_betas}")));
            }
            if row.iter().flatten().any(|x| !x.is_finite()) {
                return Err(NonFinite("shape_dirs"));
            }
        }
        if data.template_vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(NonFinite("template_vertices"));
        }
        if data.rest_joints.iter().flatten().any(|x| !x.is_finite()) {
            return Err(NonFinite("rest_joints"));
        }

        // kinematic tree
        if data.parent[0] != -1 {
            return Err(BadRoot(format!("parent[0] = {}", data.parent[0])));
        }
        let mut parent = vec![None; nj];
        for j in 1..nj {
            let p = data.parent[j];
            if p < 0 {
                return Err(BadRoot(format!("joint {j} is a second root")));
            }
            if p as usize >= nj {
                return Err(DimensionMismatch(format!("parent[{j}] = {p} is out of range")));
            }
            parent[j] = Some(p as usize);
        }
        for start in 1..nj {
            let mut j = start;
            for _ in 0..=nj {
                match parent[j] {
                    None => break,
                    Some(p) if p == start => return Err(CyclicParent(start)),
                    Some(p) => j = p,
                }
            }
            if parent[j].is_some() {
                return Err(CyclicParent(start));
            }
        }
        for j in 1..nj {
            let p = parent[j].unwrap_or(0);
            if p >= j {
                return Err(NotTopological { joint: j, parent: p });
            }
        }

        for (fi, f) in data.faces.iter().enumerate() {
            for &v in f {
                if v as usize >= nv {
                    return Err(FaceOutOfRange { face: fi, vertex: v, n: nv });
                }
            }
        }

        for (v, row) in data.skin_weights.iter().enumerate() {
            if row.len() != nj {
                return Err(DimensionMismatch(format!("skin_weights[{v}] has {} entries for {nj} joints", row.len())));
            }
            if let Some(j) = row.iter().position(|w| *w < 0.0 || !w.is_finite()) {
                if !row[j].is_finite() {
                    return Err(NonFinite("skin_weights"));
                }
                return Err(NegativeWeight { vertex: v, joint: j });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(WeightsNotNormalized { vertex: v, sum });
            }
        }

        if let Some(reg) = &data.joint_regressor {
            if reg.len() != nj || reg.iter().any(|r| r.len() != nv) {
                return Err(DimensionMismatch(format!("joint_regressor must be {nj} × {nv}")));
            }
            if reg.iter().flatten().any(|x| !x.is_finite()) {
                return Err(NonFinite("joint_regressor"));
            }
        }

        let template: Vec<_> = data.template_vertices.iter().map(to_vec3).collect();
        let rest_joints: Vec<_> = data.rest_joints.iter().map(to_vec3).collect();
        let nearest_vertex = rest_joints
            .iter()
            .map(|j| {
                template
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - j).norm_squared().total_cmp(&(b.1 - j).norm_squared()))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect();

        Ok(Self {
            weights: sparse_rows(&data.skin_weights),
            regressor: data.joint_regressor.as_deref().map(sparse_rows),
            template,
            rest_joints,
            parent,
            nearest_vertex,
            n_betas,
            data,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn joint_count(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn beta_count(&self) -> usize {
        self.n_betas
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.data.faces
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn rest_joints(&self) -> &[Vector3<f64>] {
        &self.rest_joints
    }

    fn check_dims(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<(), BodyModelError> {
        if pose.0.len() != 3 * self.joint_count() {
            return Err(BodyModelError::DimensionMismatch(format!(
                "pose has {} values, model needs {}",
                pose.0.len(),
                3 * self.joint_count()
            )));
        }
        if shape.beta.len() != self.n_betas {
            return Err(BodyModelError::DimensionMismatch(format!(
                "beta has {} values, model has {} blendshapes",
                shape.beta.len(),
                self.n_betas
            )));
        }
        Ok(())
    }

    fn shaped(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        self.template
            .iter()
            .zip(&self.data.shape_dirs)
            .map(|(v, dirs)| {
                let mut out = *v;
                for (axis, coeffs) in dirs.iter().enumerate() {
                    out[axis] += coeffs.iter().zip(beta).map(|(d, b)| d * b).sum::<f64>();
                }
                out
            })
            .collect()
    }

    fn shaped_joints(&self, shaped: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        match &self.regressor {
            Some(reg) => reg
                .iter()
                .map(|row| row.iter().map(|(v, w)| shaped[*v] * *w).sum())
                .collect(),
            None => self
                .rest_joints
                .iter()
                .zip(&self.nearest_vertex)
                .map(|(j, &v)| j + (shaped[v] - self.template[v]))
                .collect(),
        }
    }

    /// Global joint transforms `(rotation, posed joint position)`.
    fn chain(&self, pose: &PoseParams, joints: &[Vector3<f64>]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
        let mut g: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(joints.len());
        for j in 0..joints.len() {
            let local = aa_to_matrix(&pose.joint(j));
            let entry = match self.parent[j] {
                None => (local, joints[j]),
                Some(p) => {
                    let (rp, tp) = g[p];
                    (rp * local, rp * (joints[j] - joints[p]) + tp)
                }
            };
            g.push(entry);
        }
        g
    }

    /// Posed joint positions after scale and placement.
    pub fn posed_joints(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
        placement: &GlobalPlacement,
    ) -> Result<Vec<Vector3<f64>>, BodyModelError> {
        self.check_dims(pose, shape)?;
        let joints = self.shaped_joints(&self.shaped(&shape.beta));
        let r = placement.matrix();
        Ok(self
            .chain(pose, &joints)
            .iter()
            .map(|(_, t)| r * (shape.scale * t) + placement.translation)
            .collect())
    }
}

/// Skins the model and places it in the camera frame.
pub fn pose_mesh(
    model: &BodyModel,
    pose: &PoseParams,
    shape: &ShapeParams,
    placement: &GlobalPlacement,
) -> Result<Vec<Vector3<f64>>, BodyModelError> {
    model.check_dims(pose, shape)?;
    let shaped = model.shaped(&shape.beta);
    let joints = model.shaped_joints(&shaped);
    let g = model.chain(pose, &joints);
    let r = placement.matrix();
    Ok(shaped
        .iter()
        .zip(&model.weights)
        .map(|(v, ws)| {
            let mut skinned = Vector3::zeros();
            for &(j, w) in ws {
                let (rj, tj) = &g[j];
                skinned += w * (rj * (v - joints[j]) + tj);
            }
            r * (shape.scale * skinned) + placement.translation
        })
        .collect())
}
