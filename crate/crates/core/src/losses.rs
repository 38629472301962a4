//! Training objectives over graph nodes.
//!
//! L1 terms sum over coordinates and average over joints and views. 2D
//! terms are in pixels, 3D terms in centimeters.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::project_weak_graph;
use crate::config::{Ablation, LossWeights};
use crate::error::{Error, Result};
use crate::handmodel::{NUM_JOINTS, POSE_DIM};
use crate::tensor::Tensor;

/// Unit of the 3D terms. In millimeters the fusion term dominates the 2D
/// terms and pulls every view onto a shrunken consensus.
pub const LOSS_UNITS_PER_M: f64 = 100.0;

/// Training phase: the warmup phase trains on pseudo labels and the prior only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Full,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        }
    }
}

fn views_of(g: &Graph, x: Var, op: &'static str, tail: &[usize]) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 1 + tail.len() || &s[1..] != tail {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: tail.to_vec(),
        });
    }
    Ok(s[0])
}

/// Confidence-weighted L1 between `pred2d [v, 21, 2]` and `labels [v, 21, 2]`;
/// `conf` is `[v, 21]`.
pub fn l_2d(g: &mut Graph, pred2d: Var, labels: &Tensor, conf: &Tensor) -> Result<Var> {
    let v = views_of(g, pred2d, "l_2d", &[NUM_JOINTS, 2])?;
    if labels.shape() != [v, NUM_JOINTS, 2] || conf.shape() != [v, NUM_JOINTS] {
        return Err(Error::ShapeMismatch {
            op: "l_2d",
            lhs: labels.shape().to_vec(),
            rhs: conf.shape().to_vec(),
        });
    }
    let labels = g.input(labels.clone());
    let w: Vec<f64> = conf.data().iter().flat_map(|&c| [c, c]).collect();
    let w = g.input(Tensor::from_parts(vec![v, NUM_JOINTS, 2], w));
    let d = g.sub(pred2d, labels)?;
    let d = g.abs(d);
    let d = g.mul(d, w)?;
    let s = g.sum_all(d);
    Ok(g.scale(s, 1.0 / (v * NUM_JOINTS) as f64))
}

/// 2D consistency: every view's projection against the projections, with
/// that view's camera, of every other view's skeleton rotated into its frame.
///
/// `rel[i][j]` maps directions of view `j` into view `i`.
pub fn l_c2d(
    g: &mut Graph,
    joints: Var,
    cams: Var,
    joints2d: Var,
    rel: &[Vec<Matrix3<f64>>],
) -> Result<Var> {
    let v = views_of(g, joints, "l_c2d", &[NUM_JOINTS, 3])?;
    views_of(g, joints2d, "l_c2d", &[NUM_JOINTS, 2])?;
    if rel.len() != v || rel.iter().any(|r| r.len() != v) {
        return Err(Error::ShapeMismatch {
            op: "l_c2d",
            lhs: vec![rel.len()],
            rhs: vec![v],
        });
    }
    let mut total: Option<Var> = None;
    for (i, row) in rel.iter().enumerate() {
        // Row-vector joints: p_i^T = p_j^T R_ij^T, and the column-major
        // storage of R is the row-major layout of R^T.
        let rot_t: Vec<f64> = row.iter().flat_map(|r| r.as_slice().to_vec()).collect();
        let rot_t = g.input(Tensor::from_parts(vec![v, 3, 3], rot_t));
        let aligned = g.bmm(joints, rot_t)?;
        let cam_i = g.index_select(cams, 0, &[i])?;
        let cam_i = g.repeat(cam_i, 0, v)?;
        let proj = project_weak_graph(g, aligned, cam_i)?;
        let own = g.index_select(joints2d, 0, &[i])?;
        let own = g.repeat(own, 0, v)?;
        let d = g.l1_distance(own, proj)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    let total = total.expect("at least one view");
    Ok(g.scale(total, 1.0 / (v * v * NUM_JOINTS) as f64))
}

/// Mean per-joint L1 in centimeters between `joints [v, 21, 3]` (meters) and
/// a constant target of the same shape.
fn l1_to_target(g: &mut Graph, joints: Var, target: &Tensor, op: &'static str) -> Result<Var> {
    let v = views_of(g, joints, op, &[NUM_JOINTS, 3])?;
    if target.shape() != g.shape(joints) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(joints).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = g.input(target.clone());
    let d = g.l1_distance(joints, t)?;
    Ok(g.scale(d, LOSS_UNITS_PER_M / (v * NUM_JOINTS) as f64))
}

/// Fusion consistency: refined skeletons against the fused skeleton mapped back to each view.
pub fn l_cf(g: &mut Graph, refined: Var, targets: &Tensor) -> Result<Var> {
    l1_to_target(g, refined, targets, "l_cf")
}

/// Distillation: single-view skeletons against the fused skeleton mapped back to each view.
pub fn l_d(g: &mut Graph, single: Var, targets: &Tensor) -> Result<Var> {
    l1_to_target(g, single, targets, "l_d")
}

/// `alpha / v * (|theta|_1 + |theta*|_1 + gamma |beta|_1)`, root rows excluded.
pub fn l_prior(
    g: &mut Graph,
    theta: Var,
    theta_refined: Var,
    beta: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let v = views_of(g, theta, "l_prior", &[POSE_DIM])?;
    views_of(g, theta_refined, "l_prior", &[POSE_DIM])?;
    let rows: Vec<usize> = (3..POSE_DIM).collect();
    let norm = |g: &mut Graph, x: Var, select: bool| -> Result<Var> {
        let x = if select { g.index_select(x, 1, &rows)? } else { x };
        let a = g.abs(x);
        Ok(g.sum_all(a))
    };
    let a = norm(g, theta, true)?;
    let b = norm(g, theta_refined, true)?;
    let c = norm(g, beta, false)?;
    let c = g.scale(c, weights.gamma);
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    Ok(g.scale(s, weights.alpha / v as f64))
}

/// Loss terms of one timestep; consistency terms are only built when needed.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_2d: Var,
    pub l_prior: Var,
    pub l_c2d: Option<Var>,
    pub l_cf: Option<Var>,
    pub l_d: Option<Var>,
}

/// Which optional terms [`total_loss`] will use at `step`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Needed {
    pub l_c2d: bool,
    pub l_cf: bool,
    pub l_d: bool,
}

pub fn needed_terms(phase: Phase, step: usize, ablation: &Ablation) -> Needed {
    match phase {
        Phase::Warmup => Needed::default(),
        Phase::Full => Needed {
            l_c2d: step % 2 == 0 && !ablation.no_l_c2d,
            l_cf: step % 2 == 1 && !ablation.no_l_cf,
            l_d: !ablation.no_l_d,
        },
    }
}

/// Weighted total: warmup uses `L_2D + L_p`; the full phase adds `L_d` and
/// `L_c2D` on even optimizer steps or `L_cf` on odd ones. Disabled terms
/// contribute nothing.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossVars,
    phase: Phase,
    step: usize,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<Var> {
    let a = g.scale(terms.l_2d, weights.w_2d);
    let b = g.scale(terms.l_prior, weights.w_prior);
    let mut total = g.add(a, b)?;
    let need = needed_terms(phase, step, ablation);
    let missing = |name: &str| Error::config("loss", format!("term {name} required but not built"));
    for (want, term, w, name) in [
        (need.l_c2d, terms.l_c2d, weights.w_c2d, "l_c2d"),
        (need.l_cf, terms.l_cf, weights.w_cf, "l_cf"),
        (need.l_d, terms.l_d, weights.w_d, "l_d"),
    ] {
        if want {
            let t = term.ok_or_else(|| missing(name))?;
            let t = g.scale(t, w);
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}
