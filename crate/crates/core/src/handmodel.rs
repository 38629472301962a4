//! Skeletal parametric hand: pose and shape parameters to 21 joints.
//!
//! The parameter interface matches the usual MANO layout (16 axis-angle
//! rows, 10 shape coefficients) but the output is produced directly by
//! forward kinematics over a 21-joint tree, without a mesh.

use std::ops::{Deref, DerefMut};
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 21;
pub const NUM_BONES: usize = 20;
pub const NUM_POSE_ROWS: usize = 16;
pub const POSE_DIM: usize = NUM_POSE_ROWS * 3;
pub const SHAPE_DIM: usize = 10;

/// Bone-length multipliers are clamped into this range.
pub const MULTIPLIER_RANGE: (f64, f64) = (0.2, 5.0);

static STANDARD_TREE_JSON: &str = include_str!("../data/hand_skeleton.json");

/// Pose (`theta`, radians, row 0 = global rotation) and shape (`beta`) parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub theta: [[f64; 3]; NUM_POSE_ROWS],
    pub beta: [f64; SHAPE_DIM],
}

impl Default for HandParams {
    fn default() -> Self {
        Self {
            theta: [[0.0; 3]; NUM_POSE_ROWS],
            beta: [0.0; SHAPE_DIM],
        }
    }
}

impl HandParams {
    pub fn theta_flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn from_flat(theta: &[f64], beta: &[f64]) -> Result<Self> {
        if theta.len() != POSE_DIM || beta.len() != SHAPE_DIM {
            return Err(Error::ShapeMismatch {
                op: "hand_params",
                lhs: vec![theta.len()],
                rhs: vec![beta.len()],
            });
        }
        let mut p = Self::default();
        for (r, row) in p.theta.iter_mut().enumerate() {
            row.copy_from_slice(&theta[r * 3..r * 3 + 3]);
        }
        p.beta.copy_from_slice(beta);
        Ok(p)
    }
}

/// Kinematic tree, rest pose, shape basis and sampling ranges of the hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicTree {
    pub version: u32,
    pub joint_names: Vec<String>,
    /// Parent joint per joint; `-1` for the root.
    pub parents: Vec<i32>,
    /// Rest bone vectors in meters, indexed by `child joint - 1`.
    pub rest_offsets: Vec<[f64; 3]>,
    /// Pose row rotating at each joint (`-1` for finger tips, `0` for the root).
    pub rotation_rows: Vec<i32>,
    /// Per-bone linear map from `beta` to the bone-length multiplier offset.
    pub shape_basis: Vec<[f64; SHAPE_DIM]>,
    /// Per pose row, per axis-angle component: sampling range `[lo, hi]`.
    pub pose_ranges: Vec<[[f64; 2]; 3]>,
}

impl KinematicTree {
    /// The tree shipped in `data/hand_skeleton.json`.
    pub fn standard() -> &'static KinematicTree {
        static TREE: OnceLock<KinematicTree> = OnceLock::new();
        TREE.get_or_init(|| {
            let tree: KinematicTree =
                serde_json::from_str(STANDARD_TREE_JSON).expect("bundled hand skeleton parses");
            tree.validate().expect("bundled hand skeleton is valid");
            tree
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tree: KinematicTree = serde_json::from_str(s)?;
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::config("kinematic_tree", why));
        if self.parents.len() != NUM_JOINTS
            || self.rotation_rows.len() != NUM_JOINTS
            || self.joint_names.len() != NUM_JOINTS
        {
            return bad("expected 21 joints");
        }
        if self.rest_offsets.len() != NUM_BONES || self.shape_basis.len() != NUM_BONES {
            return bad("expected 20 bones");
        }
        if self.pose_ranges.len() != NUM_POSE_ROWS {
            return bad("expected 16 pose ranges");
        }
        if self.parents[0] != -1 || self.rotation_rows[0] != 0 {
            return bad("joint 0 must be the root");
        }
        // Parents precede children: connected, acyclic, single root.
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return bad("parents must precede their children");
            }
        }
        let mut used = [false; NUM_POSE_ROWS];
        for &r in &self.rotation_rows[1..] {
            if r == 0 || r >= NUM_POSE_ROWS as i32 {
                return bad("rotation rows must be in 1..16 for non-root joints");
            }
            if r > 0 {
                if used[r as usize] {
                    return bad("rotation row assigned twice");
                }
                used[r as usize] = true;
            }
        }
        if used[1..].iter().any(|u| !u) {
            return bad("every articulated pose row must be assigned");
        }
        Ok(())
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p >= 0).then_some(p as usize)
    }

    /// Joint-to-joint edges (parent, child).
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..NUM_JOINTS).map(|c| (self.parents[c] as usize, c))
    }

    /// Skeleton at `theta = 0`, `beta = 0`.
    pub fn rest_skeleton(&self) -> Skeleton {
        let mut joints = [Vector3::zeros(); NUM_JOINTS];
        for c in 1..NUM_JOINTS {
            let p = self.parents[c] as usize;
            joints[c] = joints[p] + Vector3::from(self.rest_offsets[c - 1]);
        }
        Skeleton(joints)
    }

    pub fn rest_lengths(&self) -> [f64; NUM_BONES] {
        let mut out = [0.0; NUM_BONES];
        for (o, off) in out.iter_mut().zip(&self.rest_offsets) {
            *o = Vector3::from(*off).norm();
        }
        out
    }

    /// Clamped bone-length multipliers for a shape vector.
    pub fn bone_multipliers(&self, beta: &[f64; SHAPE_DIM]) -> [f64; NUM_BONES] {
        let mut out = [0.0; NUM_BONES];
        for (o, row) in out.iter_mut().zip(&self.shape_basis) {
            let lin: f64 = row.iter().zip(beta).map(|(b, x)| b * x).sum();
            *o = (1.0 + lin).clamp(MULTIPLIER_RANGE.0, MULTIPLIER_RANGE.1);
        }
        out
    }
}

/// 21 joint positions in meters; joint 0 is the wrist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Skeleton(pub [Vector3<f64>; NUM_JOINTS]);

impl Deref for Skeleton {
    type Target = [Vector3<f64>; NUM_JOINTS];
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for Skeleton {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl AsRef<[Vector3<f64>]> for Skeleton {
    fn as_ref(&self) -> &[Vector3<f64>] {
        &self.0
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton([Vector3::zeros(); NUM_JOINTS])
    }
}

impl Skeleton {
    /// From a flat `[21 * 3]` row-major slice.
    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() != NUM_JOINTS * 3 {
            return Err(Error::ShapeMismatch {
                op: "skeleton",
                lhs: vec![data.len()],
                rhs: vec![NUM_JOINTS * 3],
            });
        }
        let mut s = Skeleton::default();
        for (j, c) in data.chunks_exact(3).enumerate() {
            s.0[j] = Vector3::new(c[0], c[1], c[2]);
        }
        Ok(s)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn to_rows(&self) -> Vec<[f64; 3]> {
        self.0.iter().map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::from_flat(&rows.iter().flatten().copied().collect::<Vec<_>>())
    }

    /// Same skeleton translated so the root sits at the origin.
    pub fn root_relative(&self) -> Skeleton {
        let root = self.0[0];
        Skeleton(self.0.map(|p| p - root))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Differentiable forward kinematics for a batch of `v` hands.
///
/// `theta` is `[v, 48]`, `beta` is `[v, 10]`; the result is `[v, 21, 3]` with
/// the root at the origin. Finger rotations are composed down each chain in the
/// hand frame and the global rotation (row 0) is applied last.
pub fn forward_kinematics_graph(
    g: &mut Graph,
    theta: Var,
    beta: Var,
    tree: &KinematicTree,
) -> Result<Var> {
    let ts = g.shape(theta).to_vec();
    let bs = g.shape(beta).to_vec();
    if ts.len() != 2 || ts[1] != POSE_DIM || bs.len() != 2 || bs[1] != SHAPE_DIM || bs[0] != ts[0]
    {
        return Err(Error::ShapeMismatch {
            op: "forward_kinematics",
            lhs: ts,
            rhs: bs,
        });
    }
    let v = ts[0];

    let rows = g.reshape(theta, &[v * NUM_POSE_ROWS, 3])?;
    let rots = g.rodrigues(rows)?;
    let rots = g.reshape(rots, &[v, NUM_POSE_ROWS, 9])?;

    let mut basis_t = vec![0.0; SHAPE_DIM * NUM_BONES];
    for (b, row) in tree.shape_basis.iter().enumerate() {
        for (k, &x) in row.iter().enumerate() {
            basis_t[k * NUM_BONES + b] = x;
        }
    }
    let basis_t = g.input(Tensor::from_parts(vec![SHAPE_DIM, NUM_BONES], basis_t));
    let lin = g.matmul(beta, basis_t)?;
    let ones = g.input(Tensor::full(&[v, NUM_BONES], 1.0));
    let mult = g.add(lin, ones)?;
    let mult = g.clamp(mult, MULTIPLIER_RANGE.0, MULTIPLIER_RANGE.1);
    let mult = g.reshape(mult, &[v, NUM_BONES, 1])?;
    let mult = g.repeat(mult, 2, 3)?;
    let offsets: Vec<f64> = (0..v)
        .flat_map(|_| tree.rest_offsets.iter().flatten().copied())
        .collect();
    let offsets = g.input(Tensor::from_parts(vec![v, NUM_BONES, 3], offsets));
    let bones = g.mul(mult, offsets)?;

    let select_rot = |g: &mut Graph, row: usize| -> Result<Var> {
        let r = g.index_select(rots, 1, &[row])?;
        g.reshape(r, &[v, 3, 3])
    };

    // Chain rotations exclude the root; `None` stands for the identity.
    let mut chain: Vec<Option<Var>> = vec![None; NUM_JOINTS];
    let mut pos: Vec<Option<Var>> = vec![None; NUM_JOINTS];
    for c in 1..NUM_JOINTS {
        let p = tree.parents[c] as usize;
        let bone = g.index_select(bones, 1, &[c - 1])?;
        let bone = g.reshape(bone, &[v, 3, 1])?;
        let offset = match chain[p] {
            Some(r) => g.bmm(r, bone)?,
            None => bone,
        };
        pos[c] = Some(match pos[p] {
            Some(pp) => g.add(pp, offset)?,
            None => offset,
        });
        let row = tree.rotation_rows[c];
        if row > 0 {
            let local = select_rot(g, row as usize)?;
            chain[c] = Some(match chain[p] {
                Some(r) => g.bmm(r, local)?,
                None => local,
            });
        }
    }
    let root = g.input(Tensor::zeros(&[v, 1, 3]));
    let mut rows_out = vec![root];
    for p in pos.into_iter().skip(1) {
        let p = p.expect("every non-root joint is placed");
        rows_out.push(g.reshape(p, &[v, 1, 3])?);
    }
    let local = g.concat(&rows_out, 1)?;
    let global = select_rot(g, 0)?;
    let global_t = g.permute(global, &[0, 2, 1])?;
    g.bmm(local, global_t)
}

/// Forward kinematics of a single hand; evaluates the differentiable path.
pub fn forward_kinematics(params: &HandParams, tree: &KinematicTree) -> Skeleton {
    let mut g = Graph::new();
    let theta = g.input(Tensor::from_parts(vec![1, POSE_DIM], params.theta_flat()));
    let beta = g.input(Tensor::from_parts(vec![1, SHAPE_DIM], params.beta.to_vec()));
    let out = forward_kinematics_graph(&mut g, theta, beta, tree)
        .expect("shapes are fixed by HandParams");
    Skeleton::from_flat(g.value(out).data()).expect("21 joints")
}

/// Rotation matrix from an axis-angle vector.
pub fn axis_angle_to_matrix(r: Vector3<f64>) -> nalgebra::Matrix3<f64> {
    let m = crate::autodiff::rodrigues([r.x, r.y, r.z]);
    nalgebra::Matrix3::from_fn(|i, j| m[i][j])
}

/// Euclidean length of every parent-to-child bone, indexed by `child - 1`.
pub fn bone_lengths(skeleton: &Skeleton, tree: &KinematicTree) -> [f64; NUM_BONES] {
    let mut out = [0.0; NUM_BONES];
    for (p, c) in tree.edges() {
        out[c - 1] = (skeleton[c] - skeleton[p]).norm();
    }
    out
}
