//! Cross-view interaction: per-joint graph features shared across views,
//! two interaction blocks mixing them across views, and the refined
//! parameter regression.
//!
//! Graph features are stored token-major as `[v * 21, D]` with
//! `D = c1 + c2 + c3` laid out as `[location | spatial | sampled]`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::camera::project_weak_graph;
use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::estimator::{cam_from_raw, SingleViewOutput};
use crate::handmodel::{forward_kinematics_graph, KinematicTree, NUM_JOINTS, POSE_DIM};
use crate::params::{add_linear, add_linear_zero, linear, Bound, Init, ParamStore};
use crate::tensor::Tensor;

/// Additive logit for excluded tokens and views.
pub const MASK_FILL: f64 = -1e9;
/// Joint coordinates are scaled by this before the location embedding.
pub const LOCATION_SCALE: f64 = 10.0;

/// Which views take part in the interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewMask {
    active: Vec<bool>,
}

impl ViewMask {
    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::config("view_mask", "at least one view must be active"));
        }
        Ok(Self { active })
    }

    pub fn all(v: usize) -> Self {
        Self {
            active: vec![true; v],
        }
    }

    /// Uniform over the non-empty subsets of `v` views.
    pub fn random<R: Rng>(rng: &mut R, v: usize) -> Self {
        loop {
            let active: Vec<bool> = (0..v).map(|_| rng.random()).collect();
            if active.iter().any(|&a| a) {
                return Self { active };
            }
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, view: usize) -> bool {
        self.active[view]
    }

    pub fn all_active(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    pub fn active_views(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

fn skeleton_adjacency() -> Tensor {
    let tree = KinematicTree::standard();
    let mut a = vec![0.0; NUM_JOINTS * NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        a[j * NUM_JOINTS + j] = 1.0;
    }
    for (p, c) in tree.edges() {
        a[p * NUM_JOINTS + c] = 1.0;
        a[c * NUM_JOINTS + p] = 1.0;
    }
    Tensor::from_parts(vec![NUM_JOINTS, NUM_JOINTS], a)
}

/// Adds the interaction parameters (`cvi.*`). Output projections of both
/// branches and the refinement heads start at zero, so a fresh network
/// passes graph features through unchanged and reproduces the single-view
/// parameters.
pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.graph_width();
    add_linear(store, init, "cvi.le.0", 3 + POSE_DIM - 3, cfg.c1)?;
    add_linear(store, init, "cvi.le.1", cfg.c1, cfg.c1)?;
    let cells = cfg.level_side(3).pow(2);
    add_linear(store, init, "cvi.saigb", cfg.channels[3], NUM_JOINTS * cfg.c2 / cells)?;
    for b in 0..cfg.blocks {
        for name in ["q", "k", "v"] {
            add_linear(store, init, &format!("cvi.b{b}.{name}"), d, d)?;
        }
        add_linear_zero(store, &format!("cvi.b{b}.o"), d, d)?;
        add_linear(store, init, &format!("cvi.b{b}.mlp0"), d, d)?;
        add_linear_zero(store, &format!("cvi.b{b}.mlp1"), d, d)?;
        store.insert(format!("cvi.b{b}.adj"), skeleton_adjacency())?;
        add_linear(store, init, &format!("cvi.b{b}.gcn0"), d, d)?;
        add_linear_zero(store, &format!("cvi.b{b}.gcn1"), d, d)?;
    }
    add_linear(store, init, "cvi.ref.0", d, cfg.refine_width)?;
    add_linear_zero(store, "cvi.ref.theta", NUM_JOINTS * cfg.refine_width, POSE_DIM)?;
    add_linear_zero(store, "cvi.ref.cam", NUM_JOINTS * cfg.refine_width, 3)
}

/// `[v * 21, c1]` per-joint MLP over `[10 * xyz | theta without the root row]`.
pub fn location_embed(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    joints: Var,
    theta: Var,
) -> Result<Var> {
    let v = g.shape(joints)[0];
    let xyz = g.scale(joints, LOCATION_SCALE);
    let rows: Vec<usize> = (3..POSE_DIM).collect();
    let pose = g.index_select(theta, 1, &rows)?;
    let pose = g.reshape(pose, &[v, 1, POSE_DIM - 3])?;
    let pose = g.repeat(pose, 1, NUM_JOINTS)?;
    let x = g.concat(&[xyz, pose], 2)?;
    let x = g.reshape(x, &[v * NUM_JOINTS, POSE_DIM])?;
    let x = linear(g, p, "cvi.le.0", x)?;
    let x = g.leaky_relu(x, cfg.leaky_slope);
    linear(g, p, "cvi.le.1", x)
}

/// `[v * 21, c2]`: every top-level cell is projected to 21 slices, one per joint.
pub fn saigb(g: &mut Graph, p: &Bound, cfg: &ModelConfig, h4: Var) -> Result<Var> {
    let shape = g.shape(h4).to_vec();
    let (v, cells, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let share = cfg.c2 / cells;
    let x = g.reshape(h4, &[v * cells, c])?;
    let x = linear(g, p, "cvi.saigb", x)?;
    let x = g.reshape(x, &[v, cells, NUM_JOINTS, share])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[v * NUM_JOINTS, cfg.c2])
}

/// `[v * 21, c3]`: bilinear samples of the first three pyramid levels at the
/// projected joints.
pub fn jfs(
    g: &mut Graph,
    cfg: &ModelConfig,
    pyramid: &[Var; 4],
    joints2d: Var,
    image: (usize, usize),
) -> Result<Var> {
    let v = g.shape(joints2d)[0];
    let mut parts = Vec::with_capacity(3);
    for (l, &level) in pyramid.iter().take(3).enumerate() {
        let side = cfg.level_side(l) as f64;
        let (sx, sy) = (side / image.0 as f64, side / image.1 as f64);
        let scale: Vec<f64> = (0..v * NUM_JOINTS).flat_map(|_| [sx, sy]).collect();
        let shift: Vec<f64> = (0..v * NUM_JOINTS)
            .flat_map(|_| [0.5 * sx - 0.5, 0.5 * sy - 0.5])
            .collect();
        let scale = g.input(Tensor::from_parts(vec![v, NUM_JOINTS, 2], scale));
        let shift = g.input(Tensor::from_parts(vec![v, NUM_JOINTS, 2], shift));
        let coords = g.mul(joints2d, scale)?;
        let coords = g.add(coords, shift)?;
        let f = g.bilinear_sample(level, coords)?;
        let c = cfg.channels[l];
        parts.push(g.reshape(f, &[v * NUM_JOINTS, c])?);
    }
    g.concat(&parts, 1)
}

/// Stacked graph features `[v * 21, D]` of all views. Ablated parts are zeros.
pub fn build_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    sv: &SingleViewOutput,
    image: (usize, usize),
    ablation: &Ablation,
) -> Result<Var> {
    let v = g.shape(sv.joints)[0];
    let t = v * NUM_JOINTS;
    let g1 = if ablation.no_g1 {
        g.input(Tensor::zeros(&[t, cfg.c1]))
    } else {
        location_embed(g, p, cfg, sv.joints, sv.theta)?
    };
    let g2 = if ablation.no_g2 {
        g.input(Tensor::zeros(&[t, cfg.c2]))
    } else {
        saigb(g, p, cfg, sv.pyramid[3])?
    };
    let g3 = if ablation.no_g3 {
        g.input(Tensor::zeros(&[t, cfg.c3()]))
    } else {
        jfs(g, cfg, &sv.pyramid, sv.joints2d, image)?
    };
    g.concat(&[g1, g2, g3], 1)
}

fn check_tokens(g: &Graph, x: Var, mask: &ViewMask) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != mask.len() * NUM_JOINTS {
        return Err(Error::ShapeMismatch {
            op: "view_mask",
            lhs: shape.to_vec(),
            rhs: vec![mask.len() * NUM_JOINTS],
        });
    }
    Ok(mask.len())
}

/// Cross-view attention branch of block `block`; also returns the attention
/// weights `[heads, T, T]`.
pub fn cva_with_weights(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let (t, d) = (shape[0], shape[1]);
    let h = cfg.heads;
    let dh = d / h;
    let name = |s: &str| format!("cvi.b{block}.{s}");
    let q = linear(g, p, &name("q"), x)?;
    let k = linear(g, p, &name("k"), x)?;
    let val = linear(g, p, &name("v"), x)?;
    let q = g.reshape(q, &[t, h, dh])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let k = g.reshape(k, &[t, h, dh])?;
    let k = g.permute(k, &[1, 2, 0])?;
    let val = g.reshape(val, &[t, h, dh])?;
    let val = g.permute(val, &[1, 0, 2])?;
    let scores = g.bmm(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(active) = key_mask {
        if active.iter().any(|&a| !a) {
            let row: Vec<f64> = active.iter().map(|&a| if a { 0.0 } else { MASK_FILL }).collect();
            let fill: Vec<f64> = (0..h * t).flat_map(|_| row.iter().copied()).collect();
            let fill = g.input(Tensor::from_parts(vec![h, t, t], fill));
            scores = g.add(scores, fill)?;
        }
    }
    let weights = g.softmax(scores, 2)?;
    let y = g.bmm(weights, val)?;
    let y = g.permute(y, &[1, 0, 2])?;
    let y = g.reshape(y, &[t, d])?;
    let y = linear(g, p, &name("o"), y)?;
    let m = linear(g, p, &name("mlp0"), y)?;
    let m = g.leaky_relu(m, cfg.leaky_slope);
    let m = linear(g, p, &name("mlp1"), m)?;
    Ok((g.add(y, m)?, weights))
}

/// Cross-view attention branch `F_t`: multi-head self-attention over all
/// `v * 21` tokens followed by a per-token MLP. Tokens of inactive views
/// receive no attention.
pub fn cva(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    mask: &ViewMask,
) -> Result<Var> {
    check_tokens(g, x, mask)?;
    let keys: Vec<bool> = (0..mask.len())
        .flat_map(|v| std::iter::repeat_n(mask.is_active(v), NUM_JOINTS))
        .collect();
    Ok(cva_with_weights(g, p, cfg, block, x, Some(&keys))?.0)
}

/// Joint-mixing with the row-softmax of the learnable adjacency: `[v*21, D] -> [v*21, D]`.
fn graph_mix(g: &mut Graph, adj: Var, x: Var, v: usize, d: usize) -> Result<Var> {
    let x = g.reshape(x, &[v, NUM_JOINTS, d])?;
    let x = g.permute(x, &[1, 0, 2])?;
    let x = g.reshape(x, &[NUM_JOINTS, v * d])?;
    let x = g.matmul(adj, x)?;
    let x = g.reshape(x, &[NUM_JOINTS, v, d])?;
    let x = g.permute(x, &[1, 0, 2])?;
    g.reshape(x, &[v * NUM_JOINTS, d])
}

/// Per-view adaptive GCN `F_a` (two layers, weights shared across views).
pub fn adaptive_gcn(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    v: usize,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let adj = p.get(&format!("cvi.b{block}.adj"));
    let adj = g.softmax(adj, 1)?;
    let h = graph_mix(g, adj, x, v, d)?;
    let h = linear(g, p, &format!("cvi.b{block}.gcn0"), h)?;
    let h = g.leaky_relu(h, cfg.leaky_slope);
    let h = graph_mix(g, adj, h, v, d)?;
    linear(g, p, &format!("cvi.b{block}.gcn1"), h)
}

/// View-shared branch: canonical features max-pooled over active views and
/// repeated back to every view.
pub fn vsf(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    mask: &ViewMask,
) -> Result<Var> {
    let v = check_tokens(g, x, mask)?;
    let d = g.shape(x)[1];
    let c = adaptive_gcn(g, p, cfg, block, x, v)?;
    let mut c = g.reshape(c, &[v, NUM_JOINTS, d])?;
    if !mask.all_active() {
        let fill: Vec<f64> = (0..v)
            .flat_map(|i| {
                let f = if mask.is_active(i) { 0.0 } else { MASK_FILL };
                std::iter::repeat_n(f, NUM_JOINTS * d)
            })
            .collect();
        let fill = g.input(Tensor::from_parts(vec![v, NUM_JOINTS, d], fill));
        c = g.add(c, fill)?;
    }
    let pooled = g.max_axis(c, 0)?;
    let pooled = g.reshape(pooled, &[1, NUM_JOINTS, d])?;
    let rep = g.repeat(pooled, 0, v)?;
    g.reshape(rep, &[v * NUM_JOINTS, d])
}

/// Stacked interaction blocks, each `G <- G + F_t(G) + C'`.
pub fn dcvi(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    mask: &ViewMask,
    ablation: &Ablation,
) -> Result<Var> {
    check_tokens(g, x, mask)?;
    let mut x = x;
    for b in 0..cfg.blocks {
        let mut next = x;
        if !ablation.no_cva {
            let f = cva(g, p, cfg, b, x, mask)?;
            next = g.add(next, f)?;
        }
        if !ablation.no_vsf {
            let c = vsf(g, p, cfg, b, x, mask)?;
            next = g.add(next, c)?;
        }
        x = next;
    }
    Ok(x)
}

/// Graph handles of the refined stage.
#[derive(Clone, Copy, Debug)]
pub struct RefinedOutput {
    pub theta: Var,
    pub cam_raw: Var,
    pub cam: Var,
    pub joints: Var,
    pub joints2d: Var,
}

/// Per-token MLP, per-view flatten and the pose/camera heads. The heads
/// predict corrections on top of the (gradient-stopped) single-view pose and
/// camera; shape is taken from the single-view stage.
pub fn regress_refined(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    refined: Var,
    sv: &SingleViewOutput,
    image: (usize, usize),
) -> Result<RefinedOutput> {
    let v = g.shape(sv.theta)[0];
    let r = linear(g, p, "cvi.ref.0", refined)?;
    let r = g.leaky_relu(r, cfg.leaky_slope);
    let r = g.reshape(r, &[v, NUM_JOINTS * cfg.refine_width])?;
    let d_theta = linear(g, p, "cvi.ref.theta", r)?;
    let d_cam = linear(g, p, "cvi.ref.cam", r)?;
    let base_theta = g.detach(sv.theta);
    let base_cam = g.detach(sv.cam_raw);
    let beta = g.detach(sv.beta);
    let theta = g.add(base_theta, d_theta)?;
    let cam_raw = g.add(base_cam, d_cam)?;
    let cam = cam_from_raw(g, cam_raw, image.0, image.1)?;
    let joints = forward_kinematics_graph(g, theta, beta, KinematicTree::standard())?;
    let joints2d = project_weak_graph(g, joints, cam)?;
    Ok(RefinedOutput {
        theta,
        cam_raw,
        cam,
        joints,
        joints2d,
    })
}

/// Graph features, interaction and refined regression in one call.
pub fn refine(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    sv: &SingleViewOutput,
    image: (usize, usize),
    mask: &ViewMask,
    ablation: &Ablation,
) -> Result<RefinedOutput> {
    let feats = build_graph(g, p, cfg, sv, image, ablation)?;
    let refined = dcvi(g, p, cfg, feats, mask, ablation)?;
    regress_refined(g, p, cfg, refined, sv, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &ModelConfig, seed: u64, randomize_zero: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut init = Init::new(seed);
        estimator::init_params(&mut s, &mut init, cfg).unwrap();
        init_params(&mut s, &mut init, cfg).unwrap();
        if randomize_zero {
            // Non-trivial values for the zero-initialized projections.
            let names: Vec<String> = s.names().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for n in names {
                let t = s.get(&n).unwrap();
                if t.data().iter().all(|&x| x == 0.0) {
                    let shape = t.shape().to_vec();
                    let data = (0..t.len()).map(|_| rng.random_range(-0.2..0.2)).collect();
                    s.set(&n, Tensor::from_parts(shape, data)).unwrap();
                }
            }
        }
        s
    }

    fn tokens(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_parts(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn permute_views(x: &Tensor, perm: &[usize]) -> Tensor {
        let d = x.shape()[1];
        let block = NUM_JOINTS * d;
        let mut out = Vec::with_capacity(x.len());
        for &v in perm {
            out.extend_from_slice(&x.data()[v * block..(v + 1) * block]);
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn graph_width_and_tokens() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 1, false);
        for v in [1, 8] {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let x = g.input(Tensor::full(&[v, 21, 64, 64], 0.3));
            let sv = estimator::estimate(&mut g, &p, &cfg, x, (256, 256)).unwrap();
            let feats = build_graph(&mut g, &p, &cfg, &sv, (256, 256), &Ablation::default()).unwrap();
            assert_eq!(g.shape(feats), &[v * 21, 104]);
        }
    }

    #[test]
    fn saigb_zero_input_gives_zero() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 1, false);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let h4 = g.input(Tensor::zeros(&[2, 2, 2, 64]));
        let out = saigb(&mut g, &p, &cfg, h4).unwrap();
        assert_eq!(g.shape(out), &[42, 32]);
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jfs_constant_maps_give_constant_features() {
        let cfg = ModelConfig::default();
        let mut g = Graph::new();
        let pyr = [0, 1, 2, 3].map(|l| {
            let side = cfg.level_side(l);
            g.input(Tensor::full(&[1, side, side, cfg.channels[l]], 0.25 * (l + 1) as f64))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..42).map(|_| rng.random_range(-20.0..280.0)).collect();
        let pts = g.input(Tensor::from_parts(vec![1, 21, 2], pts));
        let f = jfs(&mut g, &cfg, &pyr, pts, (256, 256)).unwrap();
        let val = g.value(f);
        assert_eq!(val.shape(), &[21, 56]);
        for j in 0..21 {
            assert!(max_diff(&val.data()[j * 56..(j + 1) * 56], &val.data()[..56]) < 1e-14);
        }
    }

    #[test]
    fn zero_projections_make_dcvi_identity() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 2, false);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(tokens(3 * 21, 104, 4));
        let y = dcvi(&mut g, &p, &cfg, x, &ViewMask::all(3), &Ablation::default()).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn fresh_refinement_reproduces_single_view() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 2, false);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(Tensor::full(&[2, 21, 64, 64], 0.1));
        let sv = estimator::estimate(&mut g, &p, &cfg, x, (256, 256)).unwrap();
        let r = refine(&mut g, &p, &cfg, &sv, (256, 256), &ViewMask::all(2), &Ablation::default()).unwrap();
        assert_eq!(g.value(r.theta), g.value(sv.theta));
        assert_eq!(g.value(r.joints), g.value(sv.joints));
        assert_eq!(g.value(r.joints2d), g.value(sv.joints2d));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 3, true);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(tokens(1, 104, 5));
        let (out, w) = cva_with_weights(&mut g, &p, &cfg, 0, x, None).unwrap();
        assert!(g.value(w).data().iter().all(|&a| a == 1.0));
        // out = y + mlp(y) with y = o(v(x))
        let val = linear(&mut g, &p, "cvi.b0.v", x).unwrap();
        let y = linear(&mut g, &p, "cvi.b0.o", val).unwrap();
        let m = linear(&mut g, &p, "cvi.b0.mlp0", y).unwrap();
        let m = g.leaky_relu(m, cfg.leaky_slope);
        let m = linear(&mut g, &p, "cvi.b0.mlp1", m).unwrap();
        let expect = g.add(y, m).unwrap();
        assert!(max_diff(g.value(out).data(), g.value(expect).data()) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_over_active_tokens() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 3, true);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let t = 3 * 21;
        let x = g.input(tokens(t, 104, 6));
        let keys: Vec<bool> = (0..t).map(|i| i / 21 != 1).collect();
        let (_, w) = cva_with_weights(&mut g, &p, &cfg, 0, x, Some(&keys)).unwrap();
        let w = g.value(w).data();
        for row in w.chunks(t) {
            let active: f64 = row.iter().zip(&keys).filter(|(_, &k)| k).map(|(a, _)| a).sum();
            assert!((active - 1.0).abs() < 1e-12);
            assert!(row.iter().zip(&keys).all(|(&a, &k)| k || a == 0.0));
        }
    }

    #[test]
    fn cva_is_token_permutation_equivariant() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 4, true);
        let t = 2 * 21;
        let x = tokens(t, 104, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let run = |input: Tensor| {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let x = g.input(input);
            let (y, _) = cva_with_weights(&mut g, &p, &cfg, 0, x, None).unwrap();
            g.value(y).clone()
        };
        let base = run(x.clone());
        let xp: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 104..(i + 1) * 104].to_vec()).collect();
        let yp = run(Tensor::from_parts(vec![t, 104], xp));
        for (k, &i) in perm.iter().enumerate() {
            let a = &yp.data()[k * 104..(k + 1) * 104];
            let b = &base.data()[i * 104..(i + 1) * 104];
            assert!(max_diff(a, b) < 1e-9);
        }
    }

    #[test]
    fn vsf_is_view_permutation_invariant() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 5, true);
        let v = 4;
        let x = tokens(v * 21, 104, 9);
        let run = |input: Tensor| {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let x = g.input(input);
            let y = vsf(&mut g, &p, &cfg, 0, x, &ViewMask::all(v)).unwrap();
            g.value(y).clone()
        };
        let base = run(x.clone());
        let block = 21 * 104;
        for i in 1..v {
            assert_eq!(base.data()[..block], base.data()[i * block..(i + 1) * block]);
        }
        let perm = [2, 0, 3, 1];
        let other = run(permute_views(&x, &perm));
        assert!(max_diff(base.data(), other.data()) < 1e-12);
    }

    #[test]
    fn vsf_single_view_is_gcn() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 5, true);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(tokens(21, 104, 10));
        let a = vsf(&mut g, &p, &cfg, 1, x, &ViewMask::all(1)).unwrap();
        let b = adaptive_gcn(&mut g, &p, &cfg, 1, x, 1).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn refined_outputs_follow_view_permutation() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 6, true);
        let v = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = v * 21 * 64 * 64;
        let input = Tensor::from_parts(vec![v, 21, 64, 64], (0..n).map(|_| rng.random::<f64>()).collect());
        let run = |inp: Tensor| {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let x = g.input(inp);
            let sv = estimator::estimate(&mut g, &p, &cfg, x, (256, 256)).unwrap();
            let r = refine(&mut g, &p, &cfg, &sv, (256, 256), &ViewMask::all(v), &Ablation::default())
                .unwrap();
            g.value(r.joints).clone()
        };
        let base = run(input.clone());
        let perm = [2, 0, 1];
        let plane = 21 * 64 * 64;
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| input.data()[i * plane..(i + 1) * plane].to_vec())
            .collect();
        let out = run(Tensor::from_parts(vec![v, 21, 64, 64], permuted));
        for (k, &i) in perm.iter().enumerate() {
            let a = &out.data()[k * 63..(k + 1) * 63];
            let b = &base.data()[i * 63..(i + 1) * 63];
            assert!(max_diff(a, b) < 1e-9);
        }
    }

    #[test]
    fn masked_views_match_dropping_them() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 7, true);
        let v = 3;
        let x = tokens(v * 21, 104, 12);
        let mask = ViewMask::new(vec![true, false, true]).unwrap();
        let masked = {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let xv = g.input(x.clone());
            let y = dcvi(&mut g, &p, &cfg, xv, &mask, &Ablation::default()).unwrap();
            g.value(y).clone()
        };
        let block = 21 * 104;
        let kept: Vec<f64> = [0, 2]
            .iter()
            .flat_map(|&i| x.data()[i * block..(i + 1) * block].to_vec())
            .collect();
        let dropped = {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let xv = g.input(Tensor::from_parts(vec![42, 104], kept));
            let y = dcvi(&mut g, &p, &cfg, xv, &ViewMask::all(2), &Ablation::default()).unwrap();
            g.value(y).clone()
        };
        assert!(max_diff(&masked.data()[..block], &dropped.data()[..block]) < 1e-12);
        assert!(max_diff(&masked.data()[2 * block..], &dropped.data()[block..]) < 1e-12);
    }

    #[test]
    fn view_mask_rules() {
        assert!(ViewMask::new(vec![false, false]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let m = ViewMask::random(&mut rng, 3);
            assert!(!m.active_views().is_empty());
        }
    }

    #[test]
    fn mask_length_must_match_tokens() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 1, false);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(tokens(42, 104, 1));
        assert!(dcvi(&mut g, &p, &cfg, x, &ViewMask::all(3), &Ablation::default()).is_err());
    }

    #[test]
    fn ablated_features_are_zero() {
        let cfg = ModelConfig::default();
        let s = store(&cfg, 1, false);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(Tensor::full(&[1, 21, 64, 64], 0.5));
        let sv = estimator::estimate(&mut g, &p, &cfg, x, (256, 256)).unwrap();
        let ab = Ablation {
            no_g1: true,
            no_g3: true,
            ..Ablation::default()
        };
        let f = build_graph(&mut g, &p, &cfg, &sv, (256, 256), &ab).unwrap();
        let val = g.value(f).data();
        for row in val.chunks(104) {
            assert!(row[..16].iter().all(|&x| x == 0.0));
            assert!(row[48..].iter().all(|&x| x == 0.0));
        }
    }
}
