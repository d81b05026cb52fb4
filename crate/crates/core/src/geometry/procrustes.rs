//! Similarity alignment and nearest-neighbor vertex error.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

/// `target ≈ scale · rotation · source + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Frobenius norm of the aligned residual.
    pub residual: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros(), residual: 0.0 }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Closed-form least-squares similarity (Umeyama) with a proper rotation.
pub fn procrustes_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::Degenerate(format!("need at least 3 points, got {n}")));
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::Degenerate("SVD did not converge".into())),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if var_s <= 0.0 || sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(GeometryError::Degenerate("rank-deficient covariance (collinear points)".into()));
    }

    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_s;
    let translation = mu_t - scale * rotation * mu_s;

    let mut sim = Similarity { scale, rotation, translation, residual: 0.0 };
    sim.residual = source
        .iter()
        .zip(target)
        .map(|(s, t)| (sim.apply(s) - t).norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(sim)
}

fn as_array(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Static nearest-neighbor index over a point cloud.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(as_array).collect();
        Self { tree: ImmutableKdTree::new_from_slice(&pts) }
    }

    /// (index, distance) of the nearest indexed point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&as_array(q));
        (nn.item as usize, nn.distance.sqrt())
    }
}

/// Similarity that maps `pred` onto `gt` for vertex-error evaluation.
///
/// With equal vertex counts the clouds are taken to share topology and the
/// alignment uses index correspondence. Otherwise both clouds are
/// centered and scaled to unit RMS radius, mutual nearest neighbors in that
/// normalized space become correspondences, and Procrustes runs on those
/// pairs in the original coordinates.
pub fn nn_alignment(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity, GeometryError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if pred.len() == gt.len() {
        return procrustes_align(pred, gt);
    }

    let normalize = |pts: &[Vector3<f64>]| -> (Vec<Vector3<f64>>, Vector3<f64>, f64) {
        let c = centroid(pts);
        let rms = (pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
        let s = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        (pts.iter().map(|p| (p - c) * s).collect(), c, s)
    };
    let (np, cp, sp) = normalize(pred);
    let (ng, cg, sg) = normalize(gt);
    let idx_g = PointIndex::new(&ng);
    let idx_p = PointIndex::new(&np);

    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, p) in np.iter().enumerate() {
        let (j, _) = idx_g.nearest(p);
        if idx_p.nearest(&ng[j]).0 == i {
            src.push(pred[i]);
            dst.push(gt[j]);
        }
    }
    match procrustes_align(&src, &dst) {
        Ok(sim) => Ok(sim),
        Err(GeometryError::Degenerate(_)) => {
            // too few usable pairs: fall back to centroid + scale normalization
            let scale = sp / sg;
            Ok(Similarity { scale, rotation: Matrix3::identity(), translation: cg - scale * cp, residual: f64::NAN })
        }
        Err(e) => Err(e),
    }
}

/// Mean over `gt` of the distance to the nearest `pred` point, no alignment.
pub fn nn_mean_distance(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, GeometryError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let index = PointIndex::new(pred);
    Ok(gt.iter().map(|g| index.nearest(g).1).sum::<f64>() / gt.len() as f64)
}

/// Procrustes-aligned nearest-neighbor vertex error in the units of the
/// input (meters for meshes).
pub fn nn_vertex_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, GeometryError> {
    let sim = nn_alignment(pred, gt)?;
    let aligned: Vec<Vector3<f64>> = pred.iter().map(|p| sim.apply(p)).collect();
    nn_mean_distance(&aligned, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::aa_to_matrix;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3)))
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let a = cloud(50, 1);
        let s = procrustes_align(&a, &a).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(s.translation, Vector3::zeros(), epsilon = 1e-12);
        assert!(s.residual < 1e-12);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let a = cloud(80, 2);
        let r0 = aa_to_matrix(&Vector3::new(0.3, -1.1, 0.7));
        let t0 = Vector3::new(0.5, -2.0, 3.0);
        let b: Vec<_> = a.iter().map(|p| 2.0 * r0 * p + t0).collect();
        let s = procrustes_align(&a, &b).unwrap();
        assert_relative_eq!(s.scale, 2.0, epsilon = 1e-7);
        assert_relative_eq!(s.rotation, r0, epsilon = 1e-7);
        assert_relative_eq!(s.translation, t0, epsilon = 1e-7);
        assert!(s.residual < 1e-9);
    }

    #[test]
    fn reflection_yields_proper_rotation() {
        let a = cloud(40, 3);
        let b: Vec<_> = a.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let s = procrustes_align(&a, &b).unwrap();
        assert_relative_eq!(s.rotation.determinant(), 1.0, epsilon = 1e-12);
        assert!(s.residual > 1e-3);
    }

    #[test]
    fn collinear_is_rejected() {
        let a: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(procrustes_align(&a, &a), Err(GeometryError::Degenerate(_))));
    }

    #[test]
    fn residual_invariant_under_source_similarity() {
        let a = cloud(60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<_> = a.iter().map(|p| p + Vector3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05))).collect();
        let base = procrustes_align(&a, &b).unwrap().residual;
        let r = aa_to_matrix(&Vector3::new(-0.4, 0.2, 1.3));
        let moved: Vec<_> = a.iter().map(|p| 0.7 * r * p + Vector3::new(4.0, 1.0, -2.0)).collect();
        let again = procrustes_align(&moved, &b).unwrap().residual;
        assert!((base - again).abs() < 1e-7);
    }

    #[test]
    fn nn_error_identity_and_shift() {
        let a = cloud(100, 5);
        assert!(nn_vertex_error(&a, &a).unwrap() < 1e-12);
        let shifted: Vec<_> = a.iter().map(|p| p + Vector3::new(0.01, 0.0, 0.0)).collect();
        assert!(nn_vertex_error(&shifted, &a).unwrap() < 1e-6);
    }

    #[test]
    fn nn_error_matches_brute_force_on_decimated_cloud() {
        let gt = cloud(301, 6);
        let pred: Vec<_> = gt.iter().step_by(2).copied().collect();
        let sim = nn_alignment(&pred, &gt).unwrap();
        let aligned: Vec<_> = pred.iter().map(|p| sim.apply(p)).collect();
        let brute = gt
            .iter()
            .map(|g| aligned.iter().map(|p| (p - g).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / gt.len() as f64;
        let fast = nn_vertex_error(&pred, &gt).unwrap();
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(nn_vertex_error(&[], &cloud(3, 1)), Err(GeometryError::EmptyCloud)));
    }
}
