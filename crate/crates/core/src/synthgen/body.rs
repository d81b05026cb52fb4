//! Procedural 24-joint tube body.
//!
//! Every joint owns one tube segment (the pelvis owns the lower torso),
//! built from rings of vertices with a cone cap at each end. The left side
//! is built once and mirrored across the sagittal plane, so the rest mesh
//! is exactly symmetric. Skin weights blend half-and-half with the
//! neighboring joint over the outer quarter of each segment.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use crate::bodymodel::{BodyModel, BodyModelFile, PoseParams};

pub const JOINT_COUNT: usize = 24;
pub const BETA_COUNT: usize = 10;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
];

pub const PARENTS: [i64; JOINT_COUNT] =
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

pub const PELVIS: usize = 0;
pub const NECK: usize = 12;

const RINGS: usize = 8;
const SIDES: usize = 16;
const PER_SEGMENT: usize = RINGS * SIDES + 2;

#[derive(Clone, Copy, PartialEq)]
enum Group {
    Torso,
    Neck,
    Head,
    Collar,
    Arm,
    Leg,
}

struct Segment {
    owner: usize,
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
    /// Depth-to-width ratio of the cross-section.
    flatten: f64,
    parent: Option<usize>,
    child: Option<usize>,
    group: Group,
}

fn seg(
    owner: usize,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    parent: Option<usize>,
    child: Option<usize>,
    group: Group,
) -> Segment {
    let flatten = if group == Group::Torso { 0.65 } else { 1.0 };
    Segment { owner, a: Vector3::from(a), b: Vector3::from(b), radius, flatten, parent, child, group }
}

fn central_segments() -> Vec<Segment> {
    use Group::*;
    vec![
        seg(0, [0.0, -0.12, 0.0], [0.0, 0.11, 0.0], 0.14, None, Some(3), Torso),
        seg(3, [0.0, 0.11, 0.0], [0.0, 0.24, 0.0], 0.13, Some(0), Some(6), Torso),
        seg(6, [0.0, 0.24, 0.0], [0.0, 0.30, 0.0], 0.14, Some(3), Some(9), Torso),
        seg(9, [0.0, 0.30, 0.0], [0.0, 0.47, 0.0], 0.15, Some(6), Some(12), Torso),
        seg(12, [0.0, 0.47, 0.0], [0.0, 0.60, 0.0], 0.05, Some(9), Some(15), Neck),
        seg(15, [0.0, 0.60, 0.0], [0.0, 0.80, 0.0], 0.09, Some(12), None, Head),
    ]
}

fn left_segments() -> Vec<Segment> {
    use Group::*;
    vec![
        seg(1, [0.09, -0.08, 0.0], [0.10, -0.48, 0.0], 0.075, Some(0), Some(4), Leg),
        seg(4, [0.10, -0.48, 0.0], [0.10, -0.88, -0.02], 0.05, Some(1), Some(7), Leg),
        seg(7, [0.10, -0.88, -0.02], [0.10, -0.94, 0.12], 0.04, Some(4), Some(10), Leg),
        seg(10, [0.10, -0.94, 0.12], [0.10, -0.95, 0.20], 0.035, Some(7), None, Leg),
        seg(13, [0.02, 0.42, 0.0], [0.18, 0.44, 0.0], 0.05, Some(9), Some(16), Collar),
        seg(16, [0.18, 0.44, 0.0], [0.45, 0.44, 0.0], 0.045, Some(13), Some(18), Arm),
        seg(18, [0.45, 0.44, 0.0], [0.70, 0.44, 0.0], 0.035, Some(16), Some(20), Arm),
        seg(20, [0.70, 0.44, 0.0], [0.79, 0.44, 0.0], 0.03, Some(18), Some(22), Arm),
        seg(22, [0.79, 0.44, 0.0], [0.88, 0.44, 0.0], 0.025, Some(20), None, Arm),
    ]
}

/// Intended rest location of each joint.
const JOINT_SITES: [[f64; 3]; JOINT_COUNT] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, 0.0],
    [0.10, -0.48, 0.0],
    [-0.10, -0.48, 0.0],
    [0.0, 0.24, 0.0],
    [0.10, -0.88, -0.02],
    [-0.10, -0.88, -0.02],
    [0.0, 0.30, 0.0],
    [0.10, -0.94, 0.12],
    [-0.10, -0.94, 0.12],
    [0.0, 0.50, 0.0],
    [0.07, 0.42, 0.0],
    [-0.07, 0.42, 0.0],
    [0.0, 0.60, 0.0],
    [0.18, 0.44, 0.0],
    [-0.18, 0.44, 0.0],
    [0.45, 0.44, 0.0],
    [-0.45, 0.44, 0.0],
    [0.70, 0.44, 0.0],
    [-0.70, 0.44, 0.0],
    [0.79, 0.44, 0.0],
    [-0.79, 0.44, 0.0],
];

/// Left-side joint to its right-side twin; central joints map to themselves.
pub fn mirror_joint(j: usize) -> usize {
    match j {
        1 | 4 | 7 | 10 | 13 | 16 | 18 | 20 | 22 => j + 1,
        2 | 5 | 8 | 11 | 14 | 17 | 19 | 21 | 23 => j - 1,
        _ => j,
    }
}

/// Mirrors an axis-angle across the x = 0 plane.
pub fn mirror_rotation(aa: [f64; 3]) -> [f64; 3] {
    [aa[0], -aa[1], -aa[2]]
}

struct Vertex {
    pos: Vector3<f64>,
    /// Axis point the vertex hangs off; radial blendshapes move away from it.
    hub: Vector3<f64>,
    weights: Vec<(usize, f64)>,
}

fn ring_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut u = d.cross(&Vector3::z());
    if u.norm() < 1e-6 {
        u = d.cross(&Vector3::x());
    }
    let u = u.normalize();
    (u, d.cross(&u))
}

fn segment_weights(s: &Segment, t: f64) -> Vec<(usize, f64)> {
    let wp = match s.parent {
        Some(_) if t < 0.25 => 0.5 * (1.0 - t / 0.25),
        _ => 0.0,
    };
    let wc = match s.child {
        Some(_) if t > 0.75 => 0.5 * (t - 0.75) / 0.25,
        _ => 0.0,
    };
    let mut w = vec![(s.owner, 1.0 - wp - wc)];
    if wp > 0.0 {
        w.push((s.parent.unwrap(), wp));
    }
    if wc > 0.0 {
        w.push((s.child.unwrap(), wc));
    }
    w
}

fn build_segment(s: &Segment) -> (Vec<Vertex>, Vec<[u32; 3]>) {
    let axis = s.b - s.a;
    let d = axis.normalize();
    let (u, v) = ring_basis(&d);
    let mut verts = Vec::with_capacity(PER_SEGMENT);
    for i in 0..RINGS {
        let t = i as f64 / (RINGS - 1) as f64;
        let hub = s.a + axis * t;
        let r = s.radius * (0.85 + 0.15 * (PI * t).sin());
        for k in 0..SIDES {
            let phi = TAU * k as f64 / SIDES as f64;
            let pos = hub + r * (phi.cos() * u + s.flatten * phi.sin() * v);
            verts.push(Vertex { pos, hub, weights: segment_weights(s, t) });
        }
    }
    verts.push(Vertex { pos: s.a - 0.6 * s.radius * d, hub: s.a, weights: segment_weights(s, 0.0) });
    verts.push(Vertex { pos: s.b + 0.6 * s.radius * d, hub: s.b, weights: segment_weights(s, 1.0) });

    let mut faces = Vec::with_capacity(2 * SIDES * RINGS);
    let idx = |i: usize, k: usize| (i * SIDES + k % SIDES) as u32;
    for i in 0..RINGS - 1 {
        for k in 0..SIDES {
            faces.push([idx(i, k), idx(i, k + 1), idx(i + 1, k)]);
            faces.push([idx(i, k + 1), idx(i + 1, k + 1), idx(i + 1, k)]);
        }
    }
    let (start, end) = ((RINGS * SIDES) as u32, (RINGS * SIDES + 1) as u32);
    for k in 0..SIDES {
        faces.push([start, idx(0, k + 1), idx(0, k)]);
        faces.push([end, idx(RINGS - 1, k), idx(RINGS - 1, k + 1)]);
    }
    (verts, faces)
}

fn mirror(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, p.z)
}

fn shape_row(pos: &Vector3<f64>, hub: &Vector3<f64>, group: Group, head_center: &Vector3<f64>) -> [Vec<f64>; 3] {
    let mut d = [Vector3::zeros(); BETA_COUNT];
    let radial = pos - hub;
    let side = if pos.x > 0.0 { 1.0 } else if pos.x < 0.0 { -1.0 } else { 0.0 };
    d[0] = 0.15 * radial;
    match group {
        Group::Torso => d[1] = 0.15 * radial,
        Group::Arm => {
            d[2] = 0.2 * radial;
            d[5] = Vector3::new(0.1 * (pos.x - side * 0.18), 0.0, 0.0);
            d[8] = Vector3::new(0.03 * side, 0.0, 0.0);
        }
        Group::Leg => {
            d[3] = 0.2 * radial;
            d[4] = Vector3::new(0.0, 0.1 * (pos.y + 0.08), 0.0);
            d[9] = Vector3::new(0.02 * side, 0.0, 0.0);
        }
        Group::Head => d[7] = 0.1 * (pos - head_center),
        Group::Neck | Group::Collar => {}
    }
    d[6] = Vector3::new(0.0, 0.03 * pos.y, 0.0);
    [0, 1, 2].map(|axis| d.iter().map(|v| v[axis]).collect())
}

/// Builds the deterministic procedural body model.
pub fn make_procedural_body() -> BodyModel {
    let central = central_segments();
    let left = left_segments();
    let head_center = central.iter().find(|s| s.group == Group::Head).map(|s| (s.a + s.b) / 2.0).unwrap();

    let mut template = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut weights = Vec::new();
    let mut shape_dirs = Vec::new();
    // (owner, a, b, first vertex) per segment, for the joint regressor
    let mut spans: Vec<(usize, Vector3<f64>, Vector3<f64>, usize)> = Vec::new();

    let mut emit = |verts: Vec<Vertex>, fs: Vec<[u32; 3]>, s: &Segment, mirrored: bool| {
        let base = template.len();
        let remap = |j: usize| if mirrored { mirror_joint(j) } else { j };
        let (a, b) = if mirrored { (mirror(&s.a), mirror(&s.b)) } else { (s.a, s.b) };
        spans.push((remap(s.owner), a, b, base));
        for v in verts {
            let (pos, hub) = if mirrored { (mirror(&v.pos), mirror(&v.hub)) } else { (v.pos, v.hub) };
            let mut row = vec![0.0; JOINT_COUNT];
            for (j, w) in v.weights {
                row[remap(j)] += w;
            }
            template.push([pos.x, pos.y, pos.z]);
            weights.push(row);
            shape_dirs.push(shape_row(&pos, &hub, s.group, &head_center));
        }
        for f in fs {
            let f = if mirrored { [f[0], f[2], f[1]] } else { f };
            faces.push(f.map(|i| i + base as u32));
        }
    };

    for s in &central {
        let (v, f) = build_segment(s);
        emit(v, f, s, false);
    }
    for s in &left {
        let (v, f) = build_segment(s);
        emit(v, f, s, false);
    }
    for s in &left {
        let (v, f) = build_segment(s);
        emit(v, f, s, true);
    }

    // each joint sits on its segment axis between two rings; regress it as
    // the matching blend of the two ring centroids
    let nv = template.len();
    let mut regressor = vec![vec![0.0; nv]; JOINT_COUNT];
    for (j, row) in regressor.iter_mut().enumerate() {
        let site = Vector3::from(JOINT_SITES[j]);
        let &(_, a, b, base) = spans.iter().find(|sp| sp.0 == j).expect("every joint owns a segment");
        let axis = b - a;
        let t = ((site - a).dot(&axis) / axis.norm_squared()).clamp(0.0, 1.0) * (RINGS - 1) as f64;
        let i0 = (t.floor() as usize).min(RINGS - 2);
        let frac = t - i0 as f64;
        for k in 0..SIDES {
            row[base + i0 * SIDES + k] += (1.0 - frac) / SIDES as f64;
            row[base + (i0 + 1) * SIDES + k] += frac / SIDES as f64;
        }
    }
    let rest_joints = regressor
        .iter()
        .map(|row| {
            let mut j = [0.0; 3];
            for (w, v) in row.iter().zip(&template) {
                if *w != 0.0 {
                    for a in 0..3 {
                        j[a] += w * v[a];
                    }
                }
            }
            j
        })
        .collect();

    let file = BodyModelFile {
        template_vertices: template,
        faces,
        rest_joints,
        parent: PARENTS.to_vec(),
        skin_weights: weights,
        shape_dirs,
        joint_regressor: Some(regressor),
    };
    BodyModel::from_file(file).expect("procedural body satisfies model invariants")
}

/// Relaxed supine pose: arms angled away from the torso, elbows and knees
/// slightly bent. Root rotation is identity.
pub fn default_base_pose() -> PoseParams {
    let mut pose = PoseParams::zeros(JOINT_COUNT);
    let left: [(usize, [f64; 3]); 3] = [(16, [0.0, 0.0, -0.9]), (18, [0.0, -0.3, 0.0]), (4, [0.15, 0.0, 0.0])];
    for (j, aa) in left {
        pose.set_joint(j, &Vector3::from(aa));
        pose.set_joint(mirror_joint(j), &Vector3::from(mirror_rotation(aa)));
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{pose_mesh, GlobalPlacement, ShapeParams};
    use crate::geometry::PointIndex;

    #[test]
    fn model_shape_and_round_trip() {
        let m = make_procedural_body();
        assert_eq!(m.joint_count(), 24);
        assert_eq!(m.beta_count(), 10);
        assert!((2000..=6000).contains(&m.vertex_count()));
        assert_eq!(BodyModel::from_json(&m.to_json()).unwrap(), m);
        for (j, site) in JOINT_SITES.iter().enumerate() {
            assert!((m.rest_joints()[j] - Vector3::from(*site)).norm() < 0.02, "joint {}", JOINT_NAMES[j]);
        }
    }

    #[test]
    fn rest_mesh_is_mirror_symmetric() {
        let m = make_procedural_body();
        let v = pose_mesh(&m, &PoseParams::zeros(24), &ShapeParams::neutral(10), &GlobalPlacement::identity()).unwrap();
        let index = PointIndex::new(&v);
        for p in &v {
            assert!(index.nearest(&mirror(p)).1 < 1e-9);
        }
    }

    #[test]
    fn posed_mesh_mirrors_with_mirrored_pose() {
        let m = make_procedural_body();
        let v = pose_mesh(&m, &default_base_pose(), &ShapeParams::neutral(10), &GlobalPlacement::identity()).unwrap();
        let index = PointIndex::new(&v);
        for p in &v {
            assert!(index.nearest(&mirror(p)).1 < 1e-9);
        }
    }

    #[test]
    fn girth_grows_bounding_volume_monotonically() {
        let m = make_procedural_body();
        let mut last = 0.0;
        for i in 0..=40 {
            let mut shape = ShapeParams::neutral(10);
            shape.beta[0] = -2.0 + 0.1 * i as f64;
            let v = pose_mesh(&m, &PoseParams::zeros(24), &shape, &GlobalPlacement::identity()).unwrap();
            let lo = v.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
            let hi = v.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
            let vol = (hi - lo).product();
            assert!(vol > last, "β0 = {}", shape.beta[0]);
            last = vol;
        }
    }
}
