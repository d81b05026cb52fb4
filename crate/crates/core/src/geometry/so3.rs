//! Rotations in axis-angle form.
//!
//! Axis-angle vectors are the storage format for every rotation in the
//! crate (per-joint pose, global rotation, rigid-fit rotation). Conversions
//! go through 3×3 matrices; logarithms are canonical, i.e. the returned
//! angle lies in `[0, π]`.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::PI;

use super::GeometryError;

const SMALL_ANGLE: f64 = 1e-8;
const ORTHONORMAL_TOL: f64 = 1e-6;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn aa_to_matrix(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta = aa.norm();
    let k = skew(aa);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + (s / theta) * k + ((1.0 - c) / (theta * theta)) * (k * k)
}

/// Inverse of [`aa_to_matrix`]. Rejects matrices that are not proper
/// rotations within 1e-6.
pub fn matrix_to_aa(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::NotARotation(f64::NAN));
    }
    let err = (r.transpose() * r - Matrix3::identity()).amax();
    let det = r.determinant();
    if err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(GeometryError::NotARotation(err.max((det - 1.0).abs())));
    }
    Ok(rotation_log(r))
}

/// Logarithm of a matrix already known to be a rotation.
pub(crate) fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let w = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = w.norm();
    let theta = sin_theta.atan2(cos_theta.clamp(-1.0, 1.0));

    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > 1e-6 {
        return w * (theta / sin_theta);
    }

    // Near π the skew part vanishes; the axis comes from the symmetric part.
    let b = 0.5 * (r + r.transpose()) - cos_theta * Matrix3::identity();
    let i = (0..3).max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)])).unwrap_or(0);
    let mut axis: Vector3<f64> = b.column(i).into_owned();
    let n = axis.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    axis /= n;
    if sin_theta > 1e-10 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else {
        axis = antipodal_tie_break(axis);
    }
    axis * theta
}

/// At exactly π both `k` and `-k` are valid; keep the one whose first
/// nonzero component is nonnegative.
fn antipodal_tie_break(axis: Vector3<f64>) -> Vector3<f64> {
    for c in axis.iter() {
        if c.abs() > 1e-12 {
            return if *c < 0.0 { -axis } else { axis };
        }
    }
    axis
}

/// Geodesic interpolation from `a` (w = 0) to `b` (w = 1).
pub fn so3_geodesic_blend(a: &Vector3<f64>, b: &Vector3<f64>, w: f64) -> Vector3<f64> {
    if w <= 0.0 {
        return *a;
    }
    if w >= 1.0 {
        return *b;
    }
    let ra = aa_to_matrix(a);
    let rb = aa_to_matrix(b);
    let delta = rotation_log(&(ra.transpose() * rb));
    rotation_log(&(ra * aa_to_matrix(&(delta * w))))
}

/// Angle of the relative rotation between `a` and `b`, in `[0, π]`.
pub fn geodesic_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let rel = aa_to_matrix(a).transpose() * aa_to_matrix(b);
    rotation_log(&rel).norm()
}

/// Among the axis-angle vectors that encode the same rotation as `aa`
/// (`aa + 2πn·k̂`), the one closest in L2 to `reference`.
pub fn nearest_representative(aa: &Vector3<f64>, reference: &Vector3<f64>) -> Vector3<f64> {
    let theta = aa.norm();
    if theta < SMALL_ANGLE {
        return *aa;
    }
    let axis = aa / theta;
    let mut best = *aa;
    let mut best_d = (aa - reference).norm_squared();
    for n in [-1.0, 1.0] {
        let cand = aa + axis * (2.0 * PI * n);
        let d = (cand - reference).norm_squared();
        if d < best_d {
            best = cand;
            best_d = d;
        }
    }
    best
}

/// Canonical form with angle in `[0, π]`.
pub fn canonical_aa(aa: &Vector3<f64>) -> Vector3<f64> {
    if aa.norm() <= PI {
        *aa
    } else {
        rotation_log(&aa_to_matrix(aa))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_is_identity() {
        assert_eq!(aa_to_matrix(&Vector3::zeros()), Matrix3::identity());
        assert_eq!(matrix_to_aa(&Matrix3::identity()).unwrap(), Vector3::zeros());
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = aa_to_matrix(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let y = r * Vector3::y();
        assert_relative_eq!(y, Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if dir.norm() < 1e-3 {
                continue;
            }
            let aa = dir.normalize() * rng.random_range(1e-6..PI - 1e-3);
            let back = matrix_to_aa(&aa_to_matrix(&aa)).unwrap();
            assert_relative_eq!(back, aa, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(matrix_to_aa(&m), Err(GeometryError::NotARotation(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(matrix_to_aa(&reflect).is_err());
    }

    #[test]
    fn exact_pi_uses_tie_break() {
        let r = aa_to_matrix(&Vector3::new(0.0, 0.0, -PI));
        let aa = matrix_to_aa(&r).unwrap();
        assert_relative_eq!(aa, Vector3::new(0.0, 0.0, PI), epsilon = 1e-9);
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = Vector3::new(0.3, -0.2, 0.1);
        let b = Vector3::new(-0.5, 0.4, 0.9);
        assert_eq!(so3_geodesic_blend(&a, &b, 0.0), a);
        assert_eq!(so3_geodesic_blend(&a, &b, 1.0), b);
        assert_relative_eq!(so3_geodesic_blend(&a, &a, 0.5), a, epsilon = 1e-12);

        let mid = so3_geodesic_blend(&Vector3::zeros(), &Vector3::new(0.0, 0.0, PI), 0.5);
        assert_relative_eq!(mid, Vector3::new(0.0, 0.0, PI / 2.0), epsilon = 1e-9);
    }

    #[test]
    fn blend_chain_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let b = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let direct = so3_geodesic_blend(&a, &b, 0.25);
            let chained = so3_geodesic_blend(&a, &so3_geodesic_blend(&a, &b, 0.5), 0.5);
            assert!(geodesic_distance(&direct, &chained) < 1e-7);
        }
    }

    #[test]
    fn representative_unwraps_across_pi() {
        let reference = Vector3::new(0.0, 0.0, PI - 0.01);
        let flipped = Vector3::new(0.0, 0.0, -(PI - 0.01));
        let rep = nearest_representative(&flipped, &reference);
        assert_relative_eq!(rep, Vector3::new(0.0, 0.0, PI + 0.01), epsilon = 1e-12);
        assert!(geodesic_distance(&rep, &flipped) < 1e-12);
    }
}
