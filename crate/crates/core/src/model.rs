//! The full network (single-view estimator followed by cross-view
//! interaction), input preparation and the per-timestep loss.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::PinholeCam;
use crate::config::{Ablation, ExperimentConfig, ModelConfig};
use crate::cvi::{self, RefinedOutput, ViewMask};
use crate::error::{Error, Result};
use crate::estimator::{self, SingleViewOutput};
use crate::fusion::{fuse, to_view, Fusion};
use crate::handmodel::{Skeleton, NUM_JOINTS};
use crate::losses::{self, needed_terms, LossVars, Phase};
use crate::params::{Bound, Init, ParamStore};
use crate::synthdata::{render_heatmaps_into, Sample};
use crate::tensor::Tensor;

/// Fresh parameters for `cfg`, drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    estimator::init_params(&mut store, &mut init, cfg)?;
    cvi::init_params(&mut store, &mut init, cfg)?;
    Ok(store)
}

/// Network inputs and supervision of one timestep over a set of views.
#[derive(Clone, Debug)]
pub struct TimestepInput {
    /// Dataset view index of each row.
    pub views: Vec<usize>,
    /// `[v, 21, grid, grid]`, rendered from the detections.
    pub heatmaps: Tensor,
    /// `[v, 21, 2]` supervision labels, pixels.
    pub labels: Tensor,
    /// `[v, 21]` label weights.
    pub conf: Tensor,
}

pub fn prepare_input(
    sample: &Sample,
    views: &[usize],
    image: (usize, usize),
    cfg: &ModelConfig,
    use_confidence: bool,
) -> TimestepInput {
    let v = views.len();
    let plane = NUM_JOINTS * cfg.grid * cfg.grid;
    let mut heat = vec![0.0; v * plane];
    let mut labels = Vec::with_capacity(v * NUM_JOINTS * 2);
    let mut conf = Vec::with_capacity(v * NUM_JOINTS);
    for (k, &i) in views.iter().enumerate() {
        let view = &sample.views[i];
        render_heatmaps_into(
            &view.detections,
            image.0,
            image.1,
            cfg.grid,
            cfg.heatmap_sigma,
            &mut heat[k * plane..(k + 1) * plane],
        );
        let sup = view.supervision();
        labels.extend(sup.points.iter().flatten());
        if use_confidence {
            conf.extend(&sup.conf);
        } else {
            // Unweighted, but dropped joints still carry no position.
            conf.extend(sup.conf.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }));
        }
    }
    TimestepInput {
        views: views.to_vec(),
        heatmaps: Tensor::from_parts(vec![v, NUM_JOINTS, cfg.grid, cfg.grid], heat),
        labels: Tensor::from_parts(vec![v, NUM_JOINTS, 2], labels),
        conf: Tensor::from_parts(vec![v, NUM_JOINTS], conf),
    }
}

/// Graph handles of both stages.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub single: SingleViewOutput,
    pub refined: RefinedOutput,
}

pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    heatmaps: Var,
    image: (usize, usize),
    mask: &ViewMask,
    ablation: &Ablation,
) -> Result<Outputs> {
    let single = estimator::estimate(g, p, cfg, heatmaps, image)?;
    let refined = cvi::refine(g, p, cfg, &single, image, mask, ablation)?;
    Ok(Outputs { single, refined })
}

/// Numeric outputs of one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub views: Vec<usize>,
    pub single: Vec<Skeleton>,
    pub refined: Vec<Skeleton>,
    pub single2d: Vec<Vec<[f64; 2]>>,
    pub refined2d: Vec<Vec<[f64; 2]>>,
    /// Refined pixel cameras `(s, tx, ty)`.
    pub refined_cams: Vec<[f64; 3]>,
}

fn skeletons(t: &Tensor) -> Vec<Skeleton> {
    t.data()
        .chunks(NUM_JOINTS * 3)
        .map(|c| Skeleton::from_flat(c).expect("21 joints"))
        .collect()
}

fn points2d(t: &Tensor) -> Vec<Vec<[f64; 2]>> {
    t.data()
        .chunks(NUM_JOINTS * 2)
        .map(|c| c.chunks(2).map(|p| [p[0], p[1]]).collect())
        .collect()
}

impl Prediction {
    pub fn read(g: &Graph, out: &Outputs, views: &[usize]) -> Self {
        Self {
            views: views.to_vec(),
            single: skeletons(g.value(out.single.joints)),
            refined: skeletons(g.value(out.refined.joints)),
            single2d: points2d(g.value(out.single.joints2d)),
            refined2d: points2d(g.value(out.refined.joints2d)),
            refined_cams: g
                .value(out.refined.cam)
                .data()
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        }
    }

    pub fn refined2d_vectors(&self, k: usize) -> Vec<Vector2<f64>> {
        self.refined2d[k].iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }

    pub fn single2d_vectors(&self, k: usize) -> Vec<Vector2<f64>> {
        self.single2d[k].iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }
}

/// Inference without gradient tracking.
pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    input: &TimestepInput,
    image: (usize, usize),
    ablation: &Ablation,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.input(input.heatmaps.clone());
    let mask = ViewMask::all(input.views.len());
    let out = forward(&mut g, &p, cfg, x, image, &mask, ablation)?;
    Ok(Prediction::read(&g, &out, &input.views))
}

/// Fuses refined skeletons; aligns with `cams` when given.
pub fn fuse_prediction(
    refined: &[Skeleton],
    cams: Option<&[PinholeCam]>,
    reference: usize,
) -> Result<Fusion> {
    fuse(refined, cams, reference)
}

/// `rel[i][j]` = rotation from view `j` to view `i` implied by the fusion transforms.
pub fn relative_rotations(f: &Fusion) -> Vec<Vec<Matrix3<f64>>> {
    f.transforms
        .iter()
        .map(|ti| {
            f.transforms
                .iter()
                .map(|tj| ti.rotation.transpose() * tj.rotation)
                .collect()
        })
        .collect()
}

/// Fused skeleton mapped back to every view, `[v, 21, 3]`.
pub fn fused_targets(f: &Fusion) -> Tensor {
    let data: Vec<f64> = f
        .transforms
        .iter()
        .flat_map(|t| to_view(&f.fused, t).to_flat())
        .collect();
    Tensor::from_parts(vec![f.transforms.len(), NUM_JOINTS, 3], data)
}

/// Loss values of one timestep; terms that were not built are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_2d: f64,
    pub l_prior: f64,
    pub l_c2d: Option<f64>,
    pub l_cf: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
}

fn select_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
    g.index_select(x, 0, rows)
}

fn select_tensor(t: &Tensor, rows: &[usize]) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let data = rows
        .iter()
        .flat_map(|&r| t.data()[r * inner..(r + 1) * inner].iter().copied())
        .collect();
    Tensor::from_parts(shape, data)
}

/// Builds the forward pass and total loss of one timestep. Only the views
/// active in `mask` enter the losses and the fusion. Returns the total loss
/// node and the term values.
#[allow(clippy::too_many_arguments)]
pub fn timestep_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ExperimentConfig,
    input: &TimestepInput,
    cams: &[PinholeCam],
    image: (usize, usize),
    phase: Phase,
    step: usize,
    mask: &ViewMask,
) -> Result<(Var, LossValues)> {
    let ablation = cfg.ablation();
    if cams.len() != input.views.len() || mask.len() != input.views.len() {
        return Err(Error::config("views", "cameras, mask and inputs disagree"));
    }
    let x = g.input(input.heatmaps.clone());
    let out = forward(g, p, &cfg.model, x, image, mask, &ablation)?;
    let (s, r) = (out.single, out.refined);

    let active = mask.active_views();
    let all = mask.all_active();
    let pick = |g: &mut Graph, v: Var| if all { Ok(v) } else { select_rows(g, v, &active) };
    let s_theta = pick(g, s.theta)?;
    let s_beta = pick(g, s.beta)?;
    let s_joints = pick(g, s.joints)?;
    let s_2d = pick(g, s.joints2d)?;
    let r_theta = pick(g, r.theta)?;
    let r_cam = pick(g, r.cam)?;
    let r_joints = pick(g, r.joints)?;
    let r_2d = pick(g, r.joints2d)?;
    let (labels, conf) = if all {
        (input.labels.clone(), input.conf.clone())
    } else {
        (select_tensor(&input.labels, &active), select_tensor(&input.conf, &active))
    };

    let a = losses::l_2d(g, s_2d, &labels, &conf)?;
    let b = losses::l_2d(g, r_2d, &labels, &conf)?;
    let l_2d = g.add(a, b)?;
    let l_prior = losses::l_prior(g, s_theta, r_theta, s_beta, &cfg.loss)?;
    let need = needed_terms(phase, step, &ablation);
    let mut terms = LossVars {
        l_2d,
        l_prior,
        l_c2d: None,
        l_cf: None,
        l_d: None,
    };
    if need.l_c2d || need.l_cf || need.l_d {
        let refined = skeletons(g.value(r_joints));
        let active_cams: Vec<PinholeCam> = active.iter().map(|&i| cams[i].clone()).collect();
        let reference = active
            .iter()
            .position(|&i| i == cfg.train.reference_view)
            .unwrap_or(0);
        let extr = cfg.train.use_extrinsics.then_some(active_cams.as_slice());
        let fusion = fuse(&refined, extr, reference)?;
        if need.l_c2d {
            let rel = relative_rotations(&fusion);
            terms.l_c2d = Some(losses::l_c2d(g, r_joints, r_cam, r_2d, &rel)?);
        }
        if need.l_cf || need.l_d {
            let targets = fused_targets(&fusion);
            if need.l_cf {
                terms.l_cf = Some(losses::l_cf(g, r_joints, &targets)?);
            }
            if need.l_d {
                terms.l_d = Some(losses::l_d(g, s_joints, &targets)?);
            }
        }
    }
    let total = losses::total_loss(g, &terms, phase, step, &cfg.loss, &ablation)?;
    let val = |v: Var| g.value(v).item();
    let values = LossValues {
        l_2d: val(terms.l_2d),
        l_prior: val(terms.l_prior),
        l_c2d: terms.l_c2d.map(val),
        l_cf: terms.l_cf.map(val),
        l_d: terms.l_d.map(val),
        total: val(total),
    };
    Ok((total, values))
}
