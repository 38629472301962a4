//! Weak-perspective and pinhole cameras.
//!
//! Pixel `(0, 0)` is the top-left corner, `x` points right and `y` down.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Default square image resolution in pixels.
pub const DEFAULT_IMAGE_SIZE: usize = 256;

/// `pi(P) = s * ortho(P) + t`: drop depth, scale, translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakPerspCam {
    /// Pixels per meter; positive.
    pub s: f64,
    /// Pixels.
    pub t: Vector2<f64>,
}

impl WeakPerspCam {
    pub fn new(s: f64, t: Vector2<f64>) -> Result<Self> {
        if !(s > 0.0) || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::config("weak_cam.s", "scale must be positive and finite"));
        }
        Ok(Self { s, t })
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.s * p.x + self.t.x, self.s * p.y + self.t.y)
    }
}

/// Weak-perspective projection of every point.
pub fn project_weak(points: &[Vector3<f64>], cam: &WeakPerspCam) -> Vec<Vector2<f64>> {
    points.iter().map(|p| cam.project(p)).collect()
}

/// Differentiable weak-perspective projection of `[v, k, 3]` joints with
/// per-view cameras `[v, 3]` laid out as `(s, tx, ty)`; gives `[v, k, 2]`.
pub fn project_weak_graph(g: &mut Graph, joints: Var, cams: Var) -> Result<Var> {
    let js = g.shape(joints).to_vec();
    let cs = g.shape(cams).to_vec();
    if js.len() != 3 || js[2] != 3 || cs.len() != 2 || cs[1] != 3 || cs[0] != js[0] {
        return Err(Error::ShapeMismatch {
            op: "project_weak",
            lhs: js,
            rhs: cs,
        });
    }
    let (v, k) = (js[0], js[1]);
    let xy = g.index_select(joints, 2, &[0, 1])?;
    let s = g.index_select(cams, 1, &[0])?;
    let s = g.reshape(s, &[v, 1, 1])?;
    let s = g.repeat(s, 1, k)?;
    let s = g.repeat(s, 2, 2)?;
    let t = g.index_select(cams, 1, &[1, 2])?;
    let t = g.reshape(t, &[v, 1, 2])?;
    let t = g.repeat(t, 1, k)?;
    let scaled = g.mul(xy, s)?;
    g.add(scaled, t)
}

/// Calibrated pinhole camera with world-to-camera extrinsics `x_c = R x_w + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCam {
    #[serde(rename = "K", with = "mat3_rows")]
    pub k: Matrix3<f64>,
    #[serde(rename = "R", with = "mat3_rows")]
    pub r: Matrix3<f64>,
    #[serde(with = "vec3_row")]
    pub tvec: Vector3<f64>,
}

impl PinholeCam {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, tvec: Vector3<f64>) -> Result<Self> {
        let cam = Self { k, r, tvec };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (self.r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::config("camera.R", "not a proper rotation"));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::config("camera.K", "focal lengths must be positive"));
        }
        if self.k[(0, 1)] != 0.0 {
            return Err(Error::config("camera.K", "skew must be zero"));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`; `up` fixes the roll (image `y` points away from it).
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Degenerate("look_at: up is parallel to the view axis".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(intrinsics.matrix(), r, -(r * eye))
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.tvec)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.tvec
    }

    /// 3x4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.tvec);
        self.k * rt
    }

    /// Projects one world point; `None` if it is not in front of the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.to_camera(p);
        (c.z > 0.0).then(|| {
            Vector2::new(
                self.fx() * c.x / c.z + self.cx(),
                self.fy() * c.y / c.z + self.cy(),
            )
        })
    }
}

/// Pinhole projection of every point, failing on the first joint with depth <= 0.
pub fn project_pinhole(points: &[Vector3<f64>], cam: &PinholeCam) -> Result<Vec<Vector2<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(joint, p)| {
            cam.project_point(p).ok_or_else(|| Error::NonPositiveDepth {
                joint,
                depth: cam.to_camera(p).z,
            })
        })
        .collect()
}

/// `R_i R_j^T`: maps directions in camera `j`'s frame to camera `i`'s frame.
pub fn relative_rotation(cam_i: &PinholeCam, cam_j: &PinholeCam) -> Matrix3<f64> {
    cam_i.r * cam_j.r.transpose()
}

/// Zero-skew intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 240.0,
            fy: 240.0,
            cx: 128.0,
            cy: 128.0,
        }
    }
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Calibrated multi-camera rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<PinholeCam>,
}

impl Rig {
    pub fn from_json(s: &str) -> Result<Self> {
        let rig: Rig = serde_json::from_str(s)?;
        for c in &rig.cameras {
            c.validate()?;
        }
        if rig.cameras.is_empty() {
            return Err(Error::config("rig.cameras", "at least one camera required"));
        }
        Ok(rig)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

mod vec3_row {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::from(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn axis_cam() -> PinholeCam {
        PinholeCam::new(
            Intrinsics::default().matrix(),
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn weak_projection_examples() {
        let cam = WeakPerspCam::new(2.0, Vector2::new(10.0, 20.0)).unwrap();
        let p = cam.project(&Vector3::new(0.1, -0.1, 0.5));
        assert!((p - Vector2::new(10.2, 19.8)).norm() < 1e-12);

        let ortho = WeakPerspCam::new(1.0, Vector2::zeros()).unwrap();
        let q = Vector3::new(0.3, -0.7, 4.0);
        assert_eq!(ortho.project(&q), Vector2::new(0.3, -0.7));
        assert_eq!(ortho.project(&(q + Vector3::new(0.0, 0.0, 9.0))), ortho.project(&q));
        assert!(WeakPerspCam::new(0.0, Vector2::zeros()).is_err());
    }

    #[test]
    fn weak_projection_graph_matches_plain() {
        let mut g = Graph::new();
        let joints = g.input(
            Tensor::new(vec![1, 2, 3], vec![0.1, -0.1, 0.5, 0.3, 0.2, -1.0]).unwrap(),
        );
        let cams = g.input(Tensor::new(vec![1, 3], vec![2.0, 10.0, 20.0]).unwrap());
        let out = project_weak_graph(&mut g, joints, cams).unwrap();
        let expected = [10.2, 19.8, 10.6, 20.4];
        for (a, b) in g.value(out).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pinhole_examples() {
        let cam = axis_cam();
        let p = cam.project_point(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(128.0, 128.0));
        let p = cam.project_point(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(152.0, 128.0)).norm() < 1e-12);
        let err = project_pinhole(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)], &cam)
            .unwrap_err();
        assert!(matches!(err, Error::NonPositiveDepth { joint: 1, .. }));
    }

    #[test]
    fn relative_rotation_examples() {
        let a = axis_cam();
        assert!((relative_rotation(&a, &a) - Matrix3::identity()).norm() < 1e-15);
        let rz = crate::handmodel::axis_angle_to_matrix(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let b = PinholeCam::new(a.k, rz, Vector3::zeros()).unwrap();
        assert!((relative_rotation(&b, &a) - rz).norm() < 1e-15);
    }

    #[test]
    fn look_at_sees_target_on_axis() {
        let cam = PinholeCam::look_at(
            Intrinsics::default(),
            Vector3::new(0.3, 0.2, 0.4),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap();
        let p = cam.project_point(&Vector3::zeros()).unwrap();
        assert!((p - Vector2::new(128.0, 128.0)).norm() < 1e-9);
        // World up appears towards the top of the image.
        let up = cam.project_point(&Vector3::new(0.0, 0.05, 0.0)).unwrap();
        assert!(up.y < 128.0);
    }

    #[test]
    fn rig_json_roundtrip() {
        let rig = Rig {
            width: 256,
            height: 256,
            cameras: vec![axis_cam()],
        };
        let s = serde_json::to_string(&rig).unwrap();
        assert!(s.contains("\"K\"") && s.contains("\"tvec\""));
        assert_eq!(Rig::from_json(&s).unwrap(), rig);
    }
}
