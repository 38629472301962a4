//! Joint-error metrics: MPJPE and its normalized / Procrustes-aligned variants,
//! F-score, PCK-AUC and 2D pixel error.
//!
//! 3D inputs are in meters, 3D outputs in millimeters.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::align::{align_translation_scale, apply, procrustes, AlignMode};
use crate::error::Result;

/// Default 3D PCK range: 0..50 mm in 100 samples.
pub const PCK3D_MAX_MM: f64 = 50.0;
/// Default 2D PCK range: 0..30 px in 100 samples.
pub const PCK2D_MAX_PX: f64 = 30.0;
pub const PCK_STEPS: usize = 100;

fn per_joint_mm(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Vec<f64> {
    pred.iter().zip(gt).map(|(p, g)| (p - g).norm() * 1000.0).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean per-joint Euclidean distance in millimeters.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    mean(&per_joint_mm(pred, gt))
}

/// MPJPE after optimal translation and scale alignment of `pred` onto `gt`.
pub fn nmpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let t = align_translation_scale(pred, gt)?;
    Ok(mpjpe(&apply(&t, pred), gt))
}

/// MPJPE after full similarity Procrustes alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let t = procrustes(pred, gt, AlignMode::Similarity)?;
    Ok(mpjpe(&apply(&t, pred), gt))
}

/// Harmonic mean of precision and recall at `threshold_mm`, with joints
/// corresponded by index.
pub fn f_score(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold_mm: f64) -> f64 {
    let d = per_joint_mm(pred, gt);
    let hits = d.iter().filter(|&&e| e <= threshold_mm).count() as f64;
    // Index correspondence makes both directions identical.
    let precision = hits / pred.len() as f64;
    let recall = hits / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(threshold, fraction of errors <= threshold)` at `steps` evenly spaced
/// thresholds over `[0, max]`.
pub fn pck_curve(errors: &[f64], max: f64, steps: usize) -> Vec<(f64, f64)> {
    let steps = steps.max(2);
    (0..steps)
        .map(|i| {
            let tau = max * i as f64 / (steps - 1) as f64;
            let frac = if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= tau).count() as f64 / errors.len() as f64
            };
            (tau, frac)
        })
        .collect()
}

/// Trapezoid area under a PCK curve, normalized by its threshold range.
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    let range = curve.last().map(|c| c.0).unwrap_or(0.0) - curve.first().map(|c| c.0).unwrap_or(0.0);
    if range <= 0.0 {
        return 0.0;
    }
    curve
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum::<f64>()
        / range
}

/// PCK-AUC over every joint of every sample pair.
pub fn pck_auc<P: AsRef<[Vector3<f64>]>>(preds: &[P], gts: &[P], max_mm: f64, steps: usize) -> f64 {
    let errors: Vec<f64> = preds
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| per_joint_mm(p.as_ref(), g.as_ref()))
        .collect();
    auc(&pck_curve(&errors, max_mm, steps))
}

/// Mean 2D Euclidean distance in pixels.
pub fn pixel_error(pred: &[Vector2<f64>], gt: &[Vector2<f64>]) -> f64 {
    mean(
        &pred
            .iter()
            .zip(gt)
            .map(|(p, g)| (p - g).norm())
            .collect::<Vec<_>>(),
    )
}

/// Aggregate 3D metrics over a set of samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub mpjpe_mm: f64,
    pub nmpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub f_score_5mm: f64,
    pub f_score_15mm: f64,
    pub auc_0_50mm: f64,
    /// Mean 2D error in pixels, when 2D predictions were evaluated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_error: Option<f64>,
}

/// Averages every metric over corresponding `(pred, gt)` pairs.
pub fn summarize<P: AsRef<[Vector3<f64>]>>(preds: &[P], gts: &[P]) -> Result<MetricSummary> {
    let n = preds.len();
    if n == 0 {
        return Ok(MetricSummary::default());
    }
    let mut s = MetricSummary {
        samples: n,
        ..Default::default()
    };
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = (p.as_ref(), g.as_ref());
        s.mpjpe_mm += mpjpe(p, g);
        s.nmpjpe_mm += nmpjpe(p, g)?;
        s.pa_mpjpe_mm += pa_mpjpe(p, g)?;
        s.f_score_5mm += f_score(p, g, 5.0);
        s.f_score_15mm += f_score(p, g, 15.0);
    }
    let k = n as f64;
    s.mpjpe_mm /= k;
    s.nmpjpe_mm /= k;
    s.pa_mpjpe_mm /= k;
    s.f_score_5mm /= k;
    s.f_score_15mm /= k;
    s.auc_0_50mm = pck_auc(preds, gts, PCK3D_MAX_MM, PCK_STEPS);
    Ok(s)
}
