use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mvhand::camera::{PinholeCam, Rig};
use mvhand::config::{ExperimentConfig, Switch};
use mvhand::evaluation::{evaluate, EvalReport};
use mvhand::handmodel::NUM_JOINTS;
use mvhand::metrics::{auc, pck_curve, summarize, MetricSummary, PCK3D_MAX_MM, PCK_STEPS};
use mvhand::model::{forward, init_params, prepare_input};
use mvhand::params::Checkpoint;
use mvhand::synthdata::{generate_dataset, split, Dataset};
use mvhand::trainer::train;
use mvhand::triangulate::{dlt, opt_center, ransac_triangulate_with_ids, RansacConfig};
use mvhand::{Error, Graph};

use crate::io;
use crate::{AblateArgs, Cli, Command, EvalArgs, Method, MetricsArgs, Split, TrainArgs, TriangulateArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn input(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    pub fn output(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Usage(format!("cannot write {}: {e}", path.display()))
    }

    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(Error::View { source, .. }) if source.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(s) => f.write_str(s),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => gen_data(&load_config(&config, seed)?, &out),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval_cmd(a),
        Command::Triangulate(a) => triangulate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, seed),
        Command::Metrics(a) => metrics_cmd(a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| CliError::input(path, e))
}

fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(generate_dataset(
        &cfg.data.rig,
        &cfg.data.noise,
        cfg.data.num_samples,
        cfg.data.seed,
    )?)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = generate(cfg)?;
    data.save(out).map_err(|e| CliError::output(out, e))?;
    eprintln!("wrote {} samples to {}", data.samples.len(), out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let data = load_data(&a.data)?;
    let params = init_params(&cfg.model, cfg.train.seed)?;
    let outcome = train(&cfg, &data, params)?;
    Checkpoint {
        config: cfg.clone(),
        params: outcome.params,
    }
    .save(&a.out)
    .map_err(|e| CliError::output(&a.out, e))?;
    let metrics = a.metrics.unwrap_or_else(|| sibling(&a.out, ".metrics.csv"));
    let steps = a.steps.unwrap_or_else(|| sibling(&a.out, ".steps.csv"));
    io::emit(Some(&metrics), outcome.log.epochs_csv().as_bytes())?;
    io::emit(Some(&steps), outcome.log.steps_csv().as_bytes())?;
    let report = outcome.rounds.last().expect("at least one round");
    let bytes = io::json_bytes(report);
    if let Some(p) = &a.report {
        io::emit(Some(p), &bytes)?;
    }
    io::emit(None, &bytes)
}

/// `"3"` selects views `0..3`; `"0,2,5"` selects those views.
fn parse_views(s: &str, rig_views: usize) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("--views: expected a count in 1..={rig_views} or a list of view indices, got `{s}`"));
    let views: Vec<usize> = if s.contains(',') {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    } else {
        let n: usize = s.trim().parse().map_err(|_| bad())?;
        if n == 0 || n > rig_views {
            return Err(bad());
        }
        (0..n).collect()
    };
    let mut sorted = views.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if views.is_empty() || sorted.len() != views.len() || views.iter().any(|&v| v >= rig_views) {
        return Err(bad());
    }
    Ok(views)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).map_err(|e| CliError::input(&a.ckpt, e))?;
    let cfg = ckpt.config;
    let data = load_data(&a.data)?;
    let views = match &a.views {
        Some(s) => parse_views(s, data.num_views())?,
        None => (0..cfg.train.views.min(data.num_views())).collect(),
    };
    let (train_idx, held_idx) = split(&data, cfg.data.seed, cfg.train.holdout_fraction);
    let indices = match a.split {
        Split::HeldOut => held_idx,
        Split::Train => train_idx,
        Split::All => (0..data.samples.len()).collect(),
    };
    if let Some(path) = &a.dump_graph {
        let first = *indices
            .first()
            .ok_or_else(|| CliError::Usage("no samples to evaluate".into()))?;
        let rig = data.rig();
        let image = (rig.width, rig.height);
        let input = prepare_input(&data.samples[first], &views, image, &cfg.model, cfg.loss.use_confidence);
        let mut g = Graph::new();
        let p = ckpt.params.bind(&mut g, false);
        let x = g.input(input.heatmaps);
        let mask = mvhand::cvi::ViewMask::all(views.len());
        forward(&mut g, &p, &cfg.model, x, image, &mask, &cfg.ablation())?;
        io::emit(Some(path), &io::json_bytes(&g.to_json()))?;
    }
    let mut report = evaluate(&ckpt.params, &cfg, &data, &indices, &views)?;
    if let Some(m) = a.mode {
        report = report.restrict(m);
    }
    io::emit(a.out.as_deref(), &io::json_bytes(&report))
}

fn triangulate_cmd(a: TriangulateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.rig).map_err(|e| CliError::input(&a.rig, e))?;
    let rig = Rig::from_json(&text).map_err(|e| CliError::input(&a.rig, e))?;
    let obs = io::read_obs2d(&a.preds)?;
    if let Some(&v) = obs.keys().find(|&&v| v >= rig.cameras.len()) {
        return Err(CliError::Usage(format!("view {v} is not in the rig")));
    }
    let mut joints: Vec<usize> = obs.values().flat_map(|m| m.keys().copied()).collect();
    joints.sort_unstable();
    joints.dedup();

    let out: Vec<(usize, Vector3<f64>)> = match a.method {
        Method::Dlt | Method::Ransac => joints
            .iter()
            .map(|&j| {
                let (mut pts, mut cams, mut ids) = (Vec::new(), Vec::new(), Vec::new());
                for (&v, m) in &obs {
                    if let Some(p) = m.get(&j) {
                        pts.push(*p);
                        cams.push(rig.cameras[v].clone());
                        ids.push(v);
                    }
                }
                let p = if a.method == Method::Dlt {
                    dlt(&pts, &cams)
                } else {
                    ransac_triangulate_with_ids(&pts, &cams, &ids, &RansacConfig::default()).map(|o| o.point)
                };
                p.map(|p| (j, p)).map_err(|e| {
                    CliError::Core(Error::Degenerate(format!("joint {j}: {e}")))
                })
            })
            .collect::<Result<_>>()?,
        Method::OptCenter => {
            let pose_path = a
                .pose
                .as_ref()
                .ok_or_else(|| CliError::Usage("--pose is required for opt-center".into()))?;
            let pose_map = io::read_pose(pose_path)?;
            let pose: Vec<Vector3<f64>> = (0..NUM_JOINTS)
                .map(|j| {
                    pose_map
                        .get(&j)
                        .copied()
                        .ok_or_else(|| CliError::Usage(format!("{}: missing joint {j}", pose_path.display())))
                })
                .collect::<Result<_>>()?;
            let mut cams: Vec<PinholeCam> = Vec::new();
            let mut pred2d: Vec<Vec<Vector2<f64>>> = Vec::new();
            for (&v, m) in &obs {
                let pts: Vec<Vector2<f64>> = (0..NUM_JOINTS)
                    .map(|j| {
                        m.get(&j).copied().ok_or_else(|| {
                            CliError::Usage(format!("opt-center needs all joints; view {v} lacks joint {j}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                cams.push(rig.cameras[v].clone());
                pred2d.push(pts);
            }
            let fit = opt_center(&pose, &pred2d, &cams)?;
            pose.iter()
                .enumerate()
                .map(|(j, p)| (j, fit.center + (p - pose[0])))
                .collect()
        }
    };
    io::emit(a.out.as_deref(), &io::joints_csv(&out)?)
}

#[derive(Serialize)]
struct AblationReport {
    switch: Switch,
    ablated: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    full: Option<EvalReport>,
}

fn ablate_cmd(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let data = match &a.data {
        Some(p) => load_data(p)?,
        None => generate(&cfg)?,
    };
    let run = |cfg: &ExperimentConfig| -> Result<EvalReport> {
        let params = init_params(&cfg.model, cfg.train.seed)?;
        let outcome = train(cfg, &data, params)?;
        Ok(outcome.rounds.last().expect("at least one round").clone())
    };
    let mut ablated_cfg = cfg.clone();
    if !ablated_cfg.disable.contains(&a.switch) {
        ablated_cfg.disable.push(a.switch);
    }
    ablated_cfg.validate()?;
    let ablated = run(&ablated_cfg)?;
    let full = if a.compare { Some(run(&cfg)?) } else { None };
    let report = AblationReport {
        switch: a.switch,
        ablated,
        full,
    };
    io::emit(a.out.as_deref(), &io::json_bytes(&report))
}

#[derive(Serialize)]
struct MetricsReport {
    /// SHA-256 over the prediction and ground-truth files.
    inputs_hash: String,
    #[serde(flatten)]
    summary: MetricSummary,
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let pred = io::read_sample_joints(&a.pred)?;
    let gt = io::read_sample_joints(&a.gt)?;
    if pred.keys().ne(gt.keys()) {
        return Err(CliError::Usage("prediction and ground truth cover different samples".into()));
    }
    let (mut ps, mut gs) = (Vec::new(), Vec::new());
    for (s, pj) in &pred {
        let gj = &gt[s];
        if pj.keys().ne(gj.keys()) {
            return Err(CliError::Usage(format!("sample {s}: joint sets differ")));
        }
        ps.push(pj.values().copied().collect::<Vec<_>>());
        gs.push(gj.values().copied().collect::<Vec<_>>());
    }
    let summary = summarize(&ps, &gs)?;
    if let Some(path) = &a.pck {
        let errors: Vec<f64> = ps
            .iter()
            .zip(&gs)
            .flat_map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).norm() * 1000.0))
            .collect();
        let curve = pck_curve(&errors, PCK3D_MAX_MM, PCK_STEPS);
        let mut csv = String::from("threshold_mm,pck\n");
        for (t, f) in &curve {
            csv.push_str(&format!("{t},{f}\n"));
        }
        debug_assert!((auc(&curve) - summary.auc_0_50mm).abs() < 1e-9);
        io::emit(Some(path), csv.as_bytes())?;
    }
    let mut h = Sha256::new();
    for p in [&a.pred, &a.gt] {
        h.update(fs::read(p).map_err(|e| CliError::input(p, e))?);
    }
    let report = MetricsReport {
        inputs_hash: hex::encode(h.finalize()),
        summary,
    };
    io::emit(a.out.as_deref(), &io::json_bytes(&report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_parse_as_count_or_list() {
        assert_eq!(parse_views("3", 8).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_views("5, 1,7", 8).unwrap(), vec![5, 1, 7]);
        for bad in ["0", "9", "1,1", "2,8", "x", ""] {
            assert!(parse_views(bad, 8).is_err(), "{bad}");
        }
    }

    #[test]
    fn numerical_errors_exit_with_two() {
        let div = CliError::Core(Error::Divergence { step: 3, value: f64::NAN });
        assert_eq!(div.exit_code(), 2);
        assert_eq!(CliError::Core(Error::Degenerate("x".into())).exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Data("x".into())).exit_code(), 1);
    }
}
