//! Similarity alignment between corresponding point sets (Procrustes analysis).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Relative tolerance on singular values below which a rotation is not unique.
pub const SINGULAR_GAP_TOL: f64 = 1e-12;

/// `y = scale * R x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            ..Self::identity()
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }
}

/// What [`procrustes`] is allowed to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// Scale, rotation and translation.
    Similarity,
    /// Rotation about the root joint (index 0); scale 1, no translation.
    RotationOnly,
    /// Rotation and translation, scale 1.
    RigidBody,
}

/// Applies `t` to every point.
pub fn apply(t: &SimilarityTransform, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| t.transform_point(p)).collect()
}

pub fn invert(t: &SimilarityTransform) -> SimilarityTransform {
    let rt = t.rotation.transpose();
    SimilarityTransform {
        scale: 1.0 / t.scale,
        rotation: rt,
        translation: -(rt * t.translation) / t.scale,
    }
}

/// `sum_j |T(source_j) - target_j|^2`.
pub fn residual(t: &SimilarityTransform, source: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, g)| (t.transform_point(s) - g).norm_squared())
        .sum()
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares transform taking `source` onto `target`. Reflections are
/// excluded through the determinant correction.
pub fn procrustes(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    mode: AlignMode,
) -> Result<SimilarityTransform> {
    if source.len() != target.len() || source.len() < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs >= 3 corresponding points, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let (mu_s, mu_t) = match mode {
        AlignMode::RotationOnly => (source[0], target[0]),
        _ => (centroid(source), centroid(target)),
    };
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    if !(var_s > 0.0) || !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("source points are coincident".into()));
    }
    let rotation = kabsch_rotation(&cov)?;
    let (scale, translation) = match mode {
        AlignMode::Similarity => {
            let scale = (rotation.transpose() * cov).trace() / var_s;
            if !(scale > 0.0) {
                return Err(Error::Degenerate("non-positive optimal scale".into()));
            }
            (scale, mu_t - scale * (rotation * mu_s))
        }
        AlignMode::RigidBody => (1.0, mu_t - rotation * mu_s),
        AlignMode::RotationOnly => (1.0, Vector3::zeros()),
    };
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Proper rotation maximizing `tr(R^T cov)` for `cov = sum target * source^T`.
fn kabsch_rotation(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = order.map(|i| svd.singular_values[i]);
    let tol = SINGULAR_GAP_TOL * sv[0].max(f64::MIN_POSITIVE);
    if sv[0] <= 0.0 || sv[1] <= tol {
        return Err(Error::Degenerate(
            "cross-covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }
    let d = (u * v_t).determinant().signum();
    if d < 0.0 && sv[1] - sv[2] <= tol {
        return Err(Error::Degenerate(
            "reflection correction is ambiguous (repeated smallest singular values)".into(),
        ));
    }
    let mut diag = Matrix3::identity();
    diag[(order[2], order[2])] = d;
    Ok(u * diag * v_t)
}

/// Closed-form scale and translation (no rotation) taking `pred` onto `gt`.
pub fn align_translation_scale(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<SimilarityTransform> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Degenerate("point count mismatch".into()));
    }
    let (mu_p, mu_g) = (centroid(pred), centroid(gt));
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mu_p, g - mu_g);
        num += dp.dot(&dg);
        den += dp.norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate("prediction has zero variance".into()));
    }
    if gt.iter().all(|g| (g - mu_g).norm_squared() == 0.0) {
        return Err(Error::Degenerate("ground truth points are coincident".into()));
    }
    let scale = num / den;
    Ok(SimilarityTransform {
        scale,
        rotation: Matrix3::identity(),
        translation: mu_g - scale * mu_p,
    })
}
