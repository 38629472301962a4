//! Synthetic multi-view hand data: sampled poses seen by a calibrated rig,
//! exact projections and detector-like corrupted pseudo labels.
//!
//! World frame: `y` points down, the hand's fingers point towards `-y` and
//! its palm towards `-z`, so the camera at azimuth 0 looks at the palm with
//! an identity rotation.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_pinhole, Intrinsics, PinholeCam, Rig};
use crate::error::{Error, Result};
use crate::handmodel::{
    forward_kinematics, HandParams, KinematicTree, Skeleton, NUM_JOINTS, NUM_POSE_ROWS, SHAPE_DIM,
};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "mvhand-dataset";
pub const DATASET_VERSION: u32 = 1;
/// Attempts per sample before generation gives up.
pub const MAX_REDRAWS: usize = 100;
pub const BETA_STD: f64 = 0.3;
pub const BETA_CLAMP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub num_views: usize,
    /// Camera distance from the origin, meters.
    pub radius: f64,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    /// Elevations in radians, assigned to cameras in turn.
    pub elevations: Vec<f64>,
    /// Azimuth of camera 0 as a fraction of the spacing between cameras.
    pub azimuth_offset: f64,
    /// Mean wrist position, meters.
    pub wrist: [f64; 3],
    /// Half-width of the uniform wrist jitter per axis, meters.
    pub wrist_jitter: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            num_views: 8,
            radius: 0.5,
            intrinsics: Intrinsics::default(),
            width: 256,
            height: 256,
            elevations: vec![-0.2, 0.4],
            azimuth_offset: 0.5,
            wrist: [0.0, 0.07, 0.0],
            wrist_jitter: 0.02,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::config("data.rig.num_views", "must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("data.rig.radius", "must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("data.rig.width", "image size must be positive"));
        }
        if self.elevations.is_empty() || self.elevations.iter().any(|e| e.abs() >= PI / 2.0) {
            return Err(Error::config(
                "data.rig.elevations",
                "need at least one elevation inside (-pi/2, pi/2)",
            ));
        }
        if !(self.wrist_jitter >= 0.0) {
            return Err(Error::config("data.rig.wrist_jitter", "must be >= 0"));
        }
        Ok(())
    }

    /// Cameras on evenly spaced azimuths looking at the origin.
    pub fn build(&self) -> Result<Rig> {
        self.validate()?;
        let cameras = (0..self.num_views)
            .map(|i| {
                let az = 2.0 * PI * (i as f64 + self.azimuth_offset) / self.num_views as f64;
                let el = self.elevations[i % self.elevations.len()];
                let eye = self.radius
                    * Vector3::new(az.sin() * el.cos(), -el.sin(), -az.cos() * el.cos());
                PinholeCam::look_at(self.intrinsics, eye, Vector3::zeros(), -Vector3::y())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rig {
            width: self.width,
            height: self.height,
            cameras,
        })
    }
}

/// Detector-like corruption of exact 2D joints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub gaussian_sigma_px: f64,
    pub outlier_prob: f64,
    pub outlier_radius_px: f64,
    pub drop_prob: f64,
    pub inlier_conf: [f64; 2],
    pub outlier_conf: [f64; 2],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            gaussian_sigma_px: 2.0,
            outlier_prob: 0.05,
            outlier_radius_px: 40.0,
            drop_prob: 0.05,
            inlier_conf: [0.6, 1.0],
            outlier_conf: [0.1, 0.5],
        }
    }
}

impl NoiseModel {
    /// No corruption at all: labels equal the exact projections with confidence 1.
    pub fn exact() -> Self {
        Self {
            gaussian_sigma_px: 0.0,
            outlier_prob: 0.0,
            outlier_radius_px: 0.0,
            drop_prob: 0.0,
            inlier_conf: [1.0, 1.0],
            outlier_conf: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(name, "probability must be in [0, 1]"))
            }
        };
        prob("data.noise.outlier_prob", self.outlier_prob)?;
        prob("data.noise.drop_prob", self.drop_prob)?;
        if self.outlier_prob + self.drop_prob > 1.0 {
            return Err(Error::config("data.noise.drop_prob", "outlier_prob + drop_prob exceeds 1"));
        }
        if !(self.gaussian_sigma_px >= 0.0) {
            return Err(Error::config("data.noise.gaussian_sigma_px", "must be >= 0"));
        }
        if !(self.outlier_radius_px >= 0.0) {
            return Err(Error::config("data.noise.outlier_radius_px", "must be >= 0"));
        }
        for (name, [lo, hi]) in [
            ("data.noise.inlier_conf", self.inlier_conf),
            ("data.noise.outlier_conf", self.outlier_conf),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config(name, "need 0 <= lo <= hi <= 1"));
            }
        }
        Ok(())
    }
}

/// Per-view 2D joints in pixels with per-joint confidence; confidence 0 marks a dropped joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub points: Vec<[f64; 2]>,
    pub conf: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn exact(points: &[Vector2<f64>]) -> Self {
        Self {
            points: points.iter().map(|p| [p.x, p.y]).collect(),
            conf: vec![1.0; points.len()],
        }
    }

    pub fn vectors(&self) -> Vec<Vector2<f64>> {
        self.points.iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    /// Exact pinhole projections.
    pub gt2d: Vec<[f64; 2]>,
    /// Original detector output; the estimator input is rendered from it.
    pub detections: PseudoLabelSet,
    /// Supervision labels when they differ from the detections (self-training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PseudoLabelSet>,
}

impl ViewSample {
    pub fn supervision(&self) -> &PseudoLabelSet {
        self.labels.as_ref().unwrap_or(&self.detections)
    }

    pub fn gt2d_vectors(&self) -> Vec<Vector2<f64>> {
        self.gt2d.iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }
}

/// One timestep: a hand seen by every camera of the rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub params: HandParams,
    /// World-frame joints, meters.
    pub joints: Vec<[f64; 3]>,
    pub views: Vec<ViewSample>,
}

impl Sample {
    pub fn skeleton(&self) -> Skeleton {
        Skeleton::from_rows(&self.joints).expect("stored skeleton has 21 joints")
    }

    /// Root-relative ground truth in camera `cam`'s frame.
    pub fn camera_frame_gt(&self, cam: &PinholeCam) -> Skeleton {
        let world = self.skeleton();
        let mut out = Skeleton::default();
        for (o, p) in out.iter_mut().zip(world.iter()) {
            *o = cam.r * (p - world[0]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub num_samples: usize,
    pub noise: NoiseModel,
    pub rig: Rig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn rig(&self) -> &Rig {
        &self.header.rig
    }

    pub fn num_views(&self) -> usize {
        self.header.rig.cameras.len()
    }

    /// JSON lines: the header, then one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Data("empty dataset file".into())),
        };
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        for c in &header.rig.cameras {
            c.validate()?;
        }
        let mut samples = Vec::with_capacity(header.num_samples);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 2)))?;
            if s.joints.len() != NUM_JOINTS
                || s.views.len() != header.rig.cameras.len()
                || s.views.iter().any(|v| {
                    v.gt2d.len() != NUM_JOINTS
                        || v.detections.points.len() != NUM_JOINTS
                        || v.detections.conf.len() != NUM_JOINTS
                })
            {
                return Err(Error::Data(format!("line {}: inconsistent sample", n + 2)));
            }
            samples.push(s);
        }
        if samples.len() != header.num_samples {
            return Err(Error::Data(format!(
                "header announces {} samples, file has {}",
                header.num_samples,
                samples.len()
            )));
        }
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Pose rows uniform within the tree's ranges; `beta ~ N(0, 0.3)` clamped to `[-2, 2]`.
pub fn sample_pose<R: Rng>(rng: &mut R, tree: &KinematicTree) -> HandParams {
    let mut p = HandParams::default();
    for r in 0..NUM_POSE_ROWS {
        for c in 0..3 {
            let [lo, hi] = tree.pose_ranges[r][c];
            p.theta[r][c] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
    }
    let normal = Normal::new(0.0, BETA_STD).expect("valid std");
    for k in 0..SHAPE_DIM {
        p.beta[k] = normal.sample(rng).clamp(-BETA_CLAMP, BETA_CLAMP);
    }
    p
}

/// Applies the noise model to exact projections, clamping into the image.
pub fn corrupt<R: Rng>(
    rng: &mut R,
    gt: &[Vector2<f64>],
    noise: &NoiseModel,
    width: usize,
    height: usize,
) -> PseudoLabelSet {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let normal = Normal::new(0.0, noise.gaussian_sigma_px.max(0.0)).expect("valid std");
    let uniform = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut out = PseudoLabelSet {
        points: Vec::with_capacity(gt.len()),
        conf: Vec::with_capacity(gt.len()),
    };
    for p in gt {
        let u: f64 = rng.random();
        let (q, c) = if u < noise.drop_prob {
            let q = Vector2::new(rng.random_range(0.0..=wmax), rng.random_range(0.0..=hmax));
            (q, 0.0)
        } else if u < noise.drop_prob + noise.outlier_prob {
            let r = noise.outlier_radius_px;
            let mag = if r > 0.0 { rng.random_range(0.5 * r..=r) } else { 0.0 };
            let ang = rng.random_range(0.0..2.0 * PI);
            let q = p + mag * Vector2::new(ang.cos(), ang.sin());
            (q, uniform(rng, noise.outlier_conf))
        } else {
            let q = if noise.gaussian_sigma_px > 0.0 {
                p + Vector2::new(normal.sample(rng), normal.sample(rng))
            } else {
                *p
            };
            (q, uniform(rng, noise.inlier_conf))
        };
        out.points.push([q.x.clamp(0.0, wmax), q.y.clamp(0.0, hmax)]);
        out.conf.push(c);
    }
    out
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws one timestep; re-draws poses any camera cannot fully see.
pub fn generate_sample(
    rig_cfg: &RigConfig,
    rig: &Rig,
    noise: &NoiseModel,
    tree: &KinematicTree,
    seed: u64,
    index: usize,
) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let (wmax, hmax) = ((rig.width - 1) as f64, (rig.height - 1) as f64);
    for _ in 0..MAX_REDRAWS {
        let params = sample_pose(&mut rng, tree);
        let j = rig_cfg.wrist_jitter;
        let wrist = Vector3::from(rig_cfg.wrist)
            + Vector3::new(
                rng.random_range(-j..=j),
                rng.random_range(-j..=j),
                rng.random_range(-j..=j),
            );
        let local = forward_kinematics(&params, tree);
        let world: Vec<Vector3<f64>> = local.iter().map(|p| p + wrist).collect();
        let projections: Result<Vec<Vec<Vector2<f64>>>> =
            rig.cameras.iter().map(|c| project_pinhole(&world, c)).collect();
        let Ok(projections) = projections else { continue };
        let inside = projections
            .iter()
            .flatten()
            .all(|p| (0.0..=wmax).contains(&p.x) && (0.0..=hmax).contains(&p.y));
        if !inside {
            continue;
        }
        let views = projections
            .iter()
            .map(|gt| ViewSample {
                gt2d: gt.iter().map(|p| [p.x, p.y]).collect(),
                detections: corrupt(&mut rng, gt, noise, rig.width, rig.height),
                labels: None,
            })
            .collect();
        return Ok(Sample {
            index,
            params,
            joints: world.iter().map(|p| [p.x, p.y, p.z]).collect(),
            views,
        });
    }
    Err(Error::Data(format!(
        "sample {index}: hand not visible in every view after {MAX_REDRAWS} draws"
    )))
}

pub fn generate_dataset(
    rig_cfg: &RigConfig,
    noise: &NoiseModel,
    num_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    noise.validate()?;
    let rig = rig_cfg.build()?;
    let tree = KinematicTree::standard();
    let samples = (0..num_samples)
        .map(|i| generate_sample(rig_cfg, &rig, noise, tree, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed,
            num_samples,
            noise: noise.clone(),
            rig,
        },
        samples,
    })
}

/// Gaussian heatmaps `[21, grid, grid]` of `labels`, each scaled by its confidence.
///
/// Pixel centers map to grid centers; `sigma` is in grid pixels and the
/// Gaussian is truncated at 4 sigma.
pub fn render_heatmaps(
    labels: &PseudoLabelSet,
    width: usize,
    height: usize,
    grid: usize,
    sigma: f64,
) -> Tensor {
    let mut data = vec![0.0; labels.points.len() * grid * grid];
    render_heatmaps_into(labels, width, height, grid, sigma, &mut data);
    Tensor::from_parts(vec![labels.points.len(), grid, grid], data)
}

pub(crate) fn render_heatmaps_into(
    labels: &PseudoLabelSet,
    width: usize,
    height: usize,
    grid: usize,
    sigma: f64,
    out: &mut [f64],
) {
    let reach = (4.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, (p, &c)) in labels.points.iter().zip(&labels.conf).enumerate() {
        let plane = &mut out[j * grid * grid..(j + 1) * grid * grid];
        if c <= 0.0 {
            continue;
        }
        let gx = (p[0] + 0.5) * grid as f64 / width as f64 - 0.5;
        let gy = (p[1] + 0.5) * grid as f64 / height as f64 - 0.5;
        let (cx, cy) = (gx.round() as isize, gy.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(grid as isize - 1) {
            let dy = y as f64 - gy;
            for x in (cx - reach).max(0)..=(cx + reach).min(grid as isize - 1) {
                let dx = x as f64 - gx;
                plane[y as usize * grid + x as usize] = c * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
}

/// Seed-stable membership of sample `index` in the held-out split.
pub fn is_held_out(seed: u64, index: usize, fraction: f64) -> bool {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// Indices of the `(train, held_out)` splits.
pub fn split(dataset: &Dataset, seed: u64, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    (0..dataset.samples.len()).partition(|&i| !is_held_out(seed, dataset.samples[i].index, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::{bone_lengths, MULTIPLIER_RANGE};
    use crate::triangulate::dlt;

    fn small(n: usize, noise: NoiseModel) -> Dataset {
        generate_dataset(&RigConfig::default(), &noise, n, 7).unwrap()
    }

    #[test]
    fn rig_cameras_see_origin() {
        let rig = RigConfig::default().build().unwrap();
        assert_eq!(rig.len(), 8);
        for c in &rig.cameras {
            let p = c.project_point(&Vector3::zeros()).unwrap();
            assert!((p - Vector2::new(128.0, 128.0)).norm() < 1e-9);
            assert!((c.center().norm() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn azimuth_zero_camera_is_identity() {
        let cfg = RigConfig {
            num_views: 4,
            azimuth_offset: 0.0,
            elevations: vec![0.0],
            ..RigConfig::default()
        };
        let rig = cfg.build().unwrap();
        assert!((rig.cameras[0].r - nalgebra::Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn sample_pose_is_reproducible_and_bounded() {
        let tree = KinematicTree::standard();
        let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(3), tree);
        let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(3), tree);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rest = tree.rest_lengths();
        for _ in 0..1000 {
            let p = sample_pose(&mut rng, tree);
            assert!(p.beta.iter().all(|b| b.abs() <= BETA_CLAMP));
            let s = forward_kinematics(&p, tree);
            assert!(s.is_finite());
            for (l, r) in bone_lengths(&s, tree).iter().zip(rest) {
                let m = l / r;
                assert!(m >= MULTIPLIER_RANGE.0 - 1e-9 && m <= MULTIPLIER_RANGE.1 + 1e-9);
            }
        }
    }

    #[test]
    fn exact_noise_gives_gt_labels() {
        let d = small(5, NoiseModel::exact());
        for s in &d.samples {
            for v in &s.views {
                assert_eq!(v.detections.points, v.gt2d);
                assert!(v.detections.conf.iter().all(|&c| c == 1.0));
            }
        }
    }

    #[test]
    fn all_outliers_are_displaced() {
        let noise = NoiseModel {
            outlier_prob: 1.0,
            drop_prob: 0.0,
            ..NoiseModel::default()
        };
        let d = small(20, noise.clone());
        let mut min_disp = f64::INFINITY;
        for s in &d.samples {
            for v in &s.views {
                for (p, g) in v.detections.points.iter().zip(&v.gt2d) {
                    let disp = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
                    min_disp = min_disp.min(disp);
                }
            }
        }
        assert!(min_disp >= noise.gaussian_sigma_px, "{min_disp}");
    }

    #[test]
    fn outlier_fraction_within_three_standard_errors() {
        let noise = NoiseModel {
            outlier_prob: 0.1,
            drop_prob: 0.0,
            gaussian_sigma_px: 0.0,
            ..NoiseModel::default()
        };
        let d = small(60, noise);
        let (mut n, mut hits) = (0.0, 0.0);
        for s in &d.samples {
            for v in &s.views {
                for (p, g) in v.detections.points.iter().zip(&v.gt2d) {
                    n += 1.0;
                    if p != g {
                        hits += 1.0;
                    }
                }
            }
        }
        let se = (0.1f64 * 0.9 / n).sqrt();
        assert!((hits / n - 0.1).abs() < 3.0 * se, "{}", hits / n);
    }

    #[test]
    fn noise_free_triangulation_recovers_world_joints() {
        let d = small(5, NoiseModel::exact());
        for s in &d.samples {
            for j in 0..NUM_JOINTS {
                let pts: Vec<_> = s
                    .views
                    .iter()
                    .map(|v| Vector2::new(v.gt2d[j][0], v.gt2d[j][1]))
                    .collect();
                let x = dlt(&pts, &d.rig().cameras).unwrap();
                assert!((x - Vector3::from(s.joints[j])).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let a = small(4, NoiseModel::default());
        let b = small(4, NoiseModel::default());
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = Dataset::read_jsonl(&ba[..]).unwrap();
        assert_eq!(back, a);
        let mut bc = Vec::new();
        back.write_jsonl(&mut bc).unwrap();
        assert_eq!(ba, bc);
    }

    #[test]
    fn truncated_file_rejected() {
        let a = small(2, NoiseModel::default());
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first_two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(Dataset::read_jsonl(first_two.as_bytes()).is_err());
    }

    #[test]
    fn heatmap_peaks_at_label() {
        let labels = PseudoLabelSet {
            points: vec![[129.5, 65.5], [0.0, 0.0]],
            conf: vec![0.5, 0.0],
        };
        let h = render_heatmaps(&labels, 256, 256, 64, 2.0);
        assert_eq!(h.shape(), &[2, 64, 64]);
        // (129.5 + 0.5) / 4 - 0.5 = 32, (65.5 + 0.5) / 4 - 0.5 = 16
        assert!((h.data()[16 * 64 + 32] - 0.5).abs() < 1e-12);
        assert!(h.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(h.data()[64 * 64..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn held_out_fraction_is_close() {
        let n = 20000;
        let held = (0..n).filter(|&i| is_held_out(0, i, 0.1)).count() as f64 / n as f64;
        assert!((held - 0.1).abs() < 0.01, "{held}");
        assert_eq!(is_held_out(5, 17, 0.1), is_held_out(5, 17, 0.1));
    }
}
