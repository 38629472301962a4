//! Multi-view point triangulation: linear DLT, RANSAC over view pairs, and
//! placement of a root-relative pose in absolute space ("Opt-Center").

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::PinholeCam;
use crate::error::{Error, Result};

/// Smallest-to-largest singular value ratio below which the DLT system is
/// treated as rank deficient.
pub const DLT_RANK_TOL: f64 = 1e-10;

/// Linear triangulation from two or more calibrated views.
///
/// Image points are first normalized by `K^-1`, then the homogeneous system
/// built from `x p3 - p1 = 0`, `y p3 - p2 = 0` is solved by SVD.
pub fn dlt(points2d: &[Vector2<f64>], cams: &[PinholeCam]) -> Result<Vector3<f64>> {
    if points2d.len() != cams.len() || cams.len() < 2 {
        return Err(Error::Degenerate(format!(
            "dlt needs >= 2 views with one point each, got {} points / {} cameras",
            points2d.len(),
            cams.len()
        )));
    }
    let mut a = DMatrix::zeros(2 * cams.len(), 4);
    for (i, (p, cam)) in points2d.iter().zip(cams).enumerate() {
        let k_inv = cam
            .k
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular intrinsics".into()))?;
        let n = k_inv * Vector3::new(p.x, p.y, 1.0);
        let (x, y) = (n.x / n.z, n.y / n.z);
        for c in 0..3 {
            a[(2 * i, c)] = x * cam.r[(2, c)] - cam.r[(0, c)];
            a[(2 * i + 1, c)] = y * cam.r[(2, c)] - cam.r[(1, c)];
        }
        a[(2 * i, 3)] = x * cam.tvec.z - cam.tvec.x;
        a[(2 * i + 1, 3)] = y * cam.tvec.z - cam.tvec.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let (mut imin, mut imax) = (0, 0);
    for i in 0..sv.len() {
        if sv[i] < sv[imin] {
            imin = i;
        }
        if sv[i] > sv[imax] {
            imax = i;
        }
    }
    // The second-smallest singular value measures how well the rays constrain the point.
    let second = (0..sv.len())
        .filter(|&i| i != imin)
        .map(|i| sv[i])
        .fold(f64::INFINITY, f64::min);
    if !(second > DLT_RANK_TOL * sv[imax]) {
        return Err(Error::Degenerate(
            "dlt system is rank deficient (parallel rays)".into(),
        ));
    }
    let h = v_t.row(imin);
    if h[3].abs() < 1e-14 * h.norm() {
        return Err(Error::Degenerate("triangulated point is at infinity".into()));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Pixel reprojection error of `point` in `cam`, or `None` behind the camera.
pub fn reprojection_error(point: &Vector3<f64>, observed: &Vector2<f64>, cam: &PinholeCam) -> Option<f64> {
    cam.project_point(point).map(|p| (p - observed).norm())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 2.0,
            iterations: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutput {
    pub point: Vector3<f64>,
    /// Inlier flag per input view, in the caller's order.
    pub inliers: Vec<bool>,
}

/// RANSAC triangulation with views identified by their position.
pub fn ransac_triangulate(
    points2d: &[Vector2<f64>],
    cams: &[PinholeCam],
    cfg: &RansacConfig,
) -> Result<RansacOutput> {
    let ids: Vec<usize> = (0..cams.len()).collect();
    ransac_triangulate_with_ids(points2d, cams, &ids, cfg)
}

/// RANSAC triangulation. Minimal samples are view pairs drawn from the
/// canonical (id-sorted) pair list, so the result does not depend on the order
/// in which views are passed.
pub fn ransac_triangulate_with_ids(
    points2d: &[Vector2<f64>],
    cams: &[PinholeCam],
    view_ids: &[usize],
    cfg: &RansacConfig,
) -> Result<RansacOutput> {
    let n = cams.len();
    if points2d.len() != n || view_ids.len() != n || n < 2 {
        return Err(Error::Degenerate(format!(
            "ransac needs >= 2 views, got {n} cameras / {} points / {} ids",
            points2d.len(),
            view_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| view_ids[i]);
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((order[a], order[b]));
        }
    }

    let score = |point: &Vector3<f64>| -> (Vec<bool>, f64) {
        let mut mask = vec![false; n];
        let mut total = 0.0;
        for &i in &order {
            if let Some(e) = reprojection_error(point, &points2d[i], &cams[i]) {
                if e <= cfg.threshold_px {
                    mask[i] = true;
                    total += e;
                }
            }
        }
        (mask, total)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let (a, b) = pairs[rng.random_range(0..pairs.len())];
        let Ok(candidate) = dlt(&[points2d[a], points2d[b]], &[cams[a].clone(), cams[b].clone()])
        else {
            continue;
        };
        let (mask, err) = score(&candidate);
        let count = mask.iter().filter(|&&m| m).count();
        let better = match &best {
            None => true,
            Some((c, e, _)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((count, err, mask));
        }
    }
    let (count, _, mask) = best.unwrap_or((0, 0.0, vec![false; n]));
    if count < 2 {
        return Err(Error::NoConsensus { inliers: count });
    }
    let (pts, cs): (Vec<_>, Vec<_>) = order
        .iter()
        .filter(|&&i| mask[i])
        .map(|&i| (points2d[i], cams[i].clone()))
        .unzip();
    let point = dlt(&pts, &cs)?;
    Ok(RansacOutput {
        point,
        inliers: mask,
    })
}

/// Result of [`opt_center`].
#[derive(Clone, Debug, PartialEq)]
pub struct CenterFit {
    pub center: Vector3<f64>,
    /// Sum of squared reprojection residuals at the DLT initialization.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was reached before the step fell below 1e-9.
    pub converged: bool,
}

const GN_MAX_ITERATIONS: usize = 20;
const GN_STEP_TOL: f64 = 1e-9;
const GN_MAX_HALVINGS: usize = 10;

fn center_cost(
    center: &Vector3<f64>,
    offsets: &[Vector3<f64>],
    pred2d: &[Vec<Vector2<f64>>],
    cams: &[PinholeCam],
) -> f64 {
    let mut cost = 0.0;
    for (cam, obs) in cams.iter().zip(pred2d) {
        for (off, o) in offsets.iter().zip(obs) {
            match cam.project_point(&(center + off)) {
                Some(p) => cost += (p - o).norm_squared(),
                None => return f64::INFINITY,
            }
        }
    }
    cost
}

/// Places a root-relative pose in absolute space.
///
/// The center is initialized by DLT on the root joint's per-view 2D points and
/// refined by damped Gauss-Newton over all joints with the pose held fixed.
pub fn opt_center(
    pose: &[Vector3<f64>],
    pred2d: &[Vec<Vector2<f64>>],
    cams: &[PinholeCam],
) -> Result<CenterFit> {
    if pred2d.len() != cams.len() || pred2d.iter().any(|v| v.len() != pose.len()) {
        return Err(Error::Degenerate("opt_center: inconsistent view / joint counts".into()));
    }
    let offsets: Vec<Vector3<f64>> = pose.iter().map(|p| p - pose[0]).collect();
    let roots: Vec<Vector2<f64>> = pred2d.iter().map(|v| v[0]).collect();
    let mut center = dlt(&roots, cams)?;
    let initial_cost = center_cost(&center, &offsets, pred2d, cams);
    let mut cost = initial_cost;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < GN_MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (cam, obs) in cams.iter().zip(pred2d) {
            for (off, o) in offsets.iter().zip(obs) {
                let xc = cam.to_camera(&(center + off));
                let (x, y, z) = (xc.x, xc.y, xc.z);
                let r = Vector2::new(
                    cam.fx() * x / z + cam.cx() - o.x,
                    cam.fy() * y / z + cam.cy() - o.y,
                );
                let dproj = nalgebra::Matrix2x3::new(
                    cam.fx() / z,
                    0.0,
                    -cam.fx() * x / (z * z),
                    0.0,
                    cam.fy() / z,
                    -cam.fy() * y / (z * z),
                );
                let j = dproj * cam.r;
                jtj += j.transpose() * j;
                jtr += j.transpose() * r;
            }
        }
        let Some(step) = jtj.try_inverse().map(|inv| -(inv * jtr)) else {
            break;
        };
        let mut step = step;
        let mut accepted = false;
        for _ in 0..=GN_MAX_HALVINGS {
            let trial = center + step;
            let c = center_cost(&trial, &offsets, pred2d, cams);
            if c <= cost {
                center = trial;
                cost = c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < GN_STEP_TOL {
            converged = true;
            break;
        }
    }
    Ok(CenterFit {
        center,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn ring(n: usize) -> Vec<PinholeCam> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let eye = Vector3::new(0.5 * a.sin(), 0.1 * (i % 2) as f64, 0.5 * a.cos());
                PinholeCam::look_at(Intrinsics::default(), eye, Vector3::zeros(), Vector3::y()).unwrap()
            })
            .collect()
    }

    #[test]
    fn two_view_exact_recovery() {
        let cams = ring(2);
        let cams = vec![cams[0].clone(), ring(8)[2].clone()];
        let x = Vector3::new(0.02, -0.03, 0.01);
        let pts: Vec<_> = cams.iter().map(|c| c.project_point(&x).unwrap()).collect();
        let y = dlt(&pts, &cams).unwrap();
        assert!((x - y).norm() < 1e-6);
    }

    #[test]
    fn duplicated_camera_is_degenerate() {
        let c = ring(1)[0].clone();
        let x = Vector3::new(0.01, 0.0, 0.0);
        let p = c.project_point(&x).unwrap();
        assert!(matches!(dlt(&[p, p], &[c.clone(), c]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ransac_noise_free_equals_dlt() {
        let cams = ring(8);
        let x = Vector3::new(-0.01, 0.04, 0.02);
        let pts: Vec<_> = cams.iter().map(|c| c.project_point(&x).unwrap()).collect();
        let out = ransac_triangulate(&pts, &cams, &RansacConfig::default()).unwrap();
        assert!(out.inliers.iter().all(|&b| b));
        assert_eq!(out.point, dlt(&pts, &cams).unwrap());
    }

    #[test]
    fn ransac_zero_threshold_with_noise_fails() {
        let cams = ring(8);
        let x = Vector3::new(0.0, 0.0, 0.0);
        let pts: Vec<_> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| c.project_point(&x).unwrap() + Vector2::new(0.3 * (i as f64).sin(), 0.4))
            .collect();
        let cfg = RansacConfig {
            threshold_px: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            ransac_triangulate(&pts, &cams, &cfg),
            Err(Error::NoConsensus { .. })
        ));
    }

    #[test]
    fn opt_center_exact_recovery() {
        let cams = ring(8);
        let pose: Vec<Vector3<f64>> = crate::handmodel::KinematicTree::standard()
            .rest_skeleton()
            .to_vec();
        let center = Vector3::new(0.01, -0.06, 0.02);
        let pred: Vec<Vec<_>> = cams
            .iter()
            .map(|c| pose.iter().map(|p| c.project_point(&(p + center)).unwrap()).collect())
            .collect();
        let fit = opt_center(&pose, &pred, &cams).unwrap();
        assert!((fit.center - center).norm() < 1e-6);
        assert!(fit.final_cost <= fit.initial_cost);
    }
}
