//! Single-view estimator: a patch-linear pyramid encoder over 21-channel
//! joint heatmaps and MLP heads regressing pose, shape and a weak-perspective
//! camera.
//!
//! The camera head works in normalized units: with `(a, b, c)` the raw head
//! output and `W x H` the image, `s = softplus(a) * W/2`, `tx = b * W/2 + W/2`
//! and `ty = c * H/2 + H/2`, all in pixels.

use crate::autodiff::{Graph, Var};
use crate::camera::project_weak_graph;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::handmodel::{forward_kinematics_graph, KinematicTree, NUM_JOINTS, POSE_DIM, SHAPE_DIM};
use crate::params::{add_linear, linear, Bound, Init, ParamStore};
use crate::tensor::Tensor;

const HEADS: [(&str, usize); 3] = [("theta", POSE_DIM), ("beta", SHAPE_DIM), ("cam", 3)];

/// Adds the estimator parameters (`est.*`).
pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    add_linear(store, init, "est.enc0", 16 * NUM_JOINTS, c[0])?;
    for l in 1..4 {
        add_linear(store, init, &format!("est.enc{l}"), 4 * c[l - 1], c[l])?;
    }
    for (head, out) in HEADS {
        add_linear(store, init, &format!("est.{head}.0"), c[3], cfg.head_hidden)?;
        add_linear(store, init, &format!("est.{head}.1"), cfg.head_hidden, out)?;
    }
    let s_logit = softplus_inv(cfg.cam_scale_init);
    store.set(
        "est.cam.1.b",
        Tensor::from_parts(vec![1, 3], vec![s_logit, 0.0, 0.0]),
    )
}

fn softplus_inv(y: f64) -> f64 {
    // log(exp(y) - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

/// Four feature maps `[v, side, side, c]` at strides 4, 8, 16 and 32 of the grid.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, heatmaps: Var) -> Result<[Var; 4]> {
    let shape = g.shape(heatmaps).to_vec();
    let n = cfg.grid;
    if shape.len() != 4 || shape[1] != NUM_JOINTS || shape[2] != n || shape[3] != n {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![0, NUM_JOINTS, n, n],
        });
    }
    let v = shape[0];
    let s = n / 4;
    let x = g.reshape(heatmaps, &[v, NUM_JOINTS, s, 4, s, 4])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = g.reshape(x, &[v * s * s, 16 * NUM_JOINTS])?;
    let x = linear(g, p, "est.enc0", x)?;
    let x = g.leaky_relu(x, cfg.leaky_slope);
    let mut levels = [g.reshape(x, &[v, s, s, cfg.channels[0]])?; 4];
    for l in 1..4 {
        let (side, c) = (cfg.level_side(l), cfg.channels[l - 1]);
        let x = g.reshape(levels[l - 1], &[v, side, 2, side, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[v * side * side, 4 * c])?;
        let x = linear(g, p, &format!("est.enc{l}"), x)?;
        let x = g.leaky_relu(x, cfg.leaky_slope);
        levels[l] = g.reshape(x, &[v, side, side, cfg.channels[l]])?;
    }
    Ok(levels)
}

/// Raw head outputs.
#[derive(Clone, Copy, Debug)]
pub struct Regressed {
    /// `[v, 48]`
    pub theta: Var,
    /// `[v, 10]`
    pub beta: Var,
    /// `[v, 3]`, normalized camera before the softplus.
    pub cam_raw: Var,
}

pub fn regress(g: &mut Graph, p: &Bound, cfg: &ModelConfig, h4: Var) -> Result<Regressed> {
    let shape = g.shape(h4).to_vec();
    let (v, cells, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let x = g.reshape(h4, &[v, cells, c])?;
    let pooled = g.reduce_mean(x, 1)?;
    let mut out = [pooled; 3];
    for (k, (head, _)) in HEADS.iter().enumerate() {
        let h = linear(g, p, &format!("est.{head}.0"), pooled)?;
        let h = g.leaky_relu(h, cfg.leaky_slope);
        out[k] = linear(g, p, &format!("est.{head}.1"), h)?;
    }
    Ok(Regressed {
        theta: out[0],
        beta: out[1],
        cam_raw: out[2],
    })
}

/// Pixel-unit camera `[v, 3]` = `(s, tx, ty)` from the normalized head output.
pub fn cam_from_raw(g: &mut Graph, raw: Var, width: usize, height: usize) -> Result<Var> {
    let v = g.shape(raw)[0];
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    let s = g.index_select(raw, 1, &[0])?;
    let s = g.softplus(s);
    let s = g.scale(s, hw);
    let t = g.index_select(raw, 1, &[1, 2])?;
    let half: Vec<f64> = (0..v).flat_map(|_| [hw, hh]).collect();
    let half = g.input(Tensor::from_parts(vec![v, 2], half));
    let t = g.mul(t, half)?;
    let t = g.add(t, half)?;
    g.concat(&[s, t], 1)
}

/// Graph handles of the single-view stage for `v` views.
#[derive(Clone, Copy, Debug)]
pub struct SingleViewOutput {
    pub theta: Var,
    pub beta: Var,
    pub cam_raw: Var,
    /// `[v, 3]` pixel camera `(s, tx, ty)`.
    pub cam: Var,
    /// `[v, 21, 3]` root-relative, camera frame, meters.
    pub joints: Var,
    /// `[v, 21, 2]` weak-perspective projection, pixels.
    pub joints2d: Var,
    pub pyramid: [Var; 4],
}

/// `heatmaps [v, 21, grid, grid]` to pose, camera, skeleton and its projection.
pub fn estimate(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    heatmaps: Var,
    image: (usize, usize),
) -> Result<SingleViewOutput> {
    let pyramid = encode(g, p, cfg, heatmaps)?;
    let r = regress(g, p, cfg, pyramid[3])?;
    let cam = cam_from_raw(g, r.cam_raw, image.0, image.1)?;
    let joints = forward_kinematics_graph(g, r.theta, r.beta, KinematicTree::standard())?;
    let joints2d = project_weak_graph(g, joints, cam)?;
    Ok(SingleViewOutput {
        theta: r.theta,
        beta: r.beta,
        cam_raw: r.cam_raw,
        cam,
        joints,
        joints2d,
        pyramid,
    })
}
