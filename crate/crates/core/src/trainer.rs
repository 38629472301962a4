//! Optimization loop: AdamW, the warmup/main schedule with loss alternation,
//! the optional view-mask finetune and iterative self-training.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, Switch, TrainConfig};
use crate::cvi::ViewMask;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::losses::Phase;
use crate::model::{predict, prepare_input, timestep_loss, LossValues};
use crate::params::ParamStore;
use crate::synthdata::{split, Dataset, PseudoLabelSet};
use crate::tensor::Tensor;

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Weight decay scales the parameters by `1 - lr * wd`
/// before the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::config("adamw", "one gradient per parameter required"));
    }
    for (p, g) in tensors.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *w = *w * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Part of the schedule an epoch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Main,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Main => "main",
            Stage::Finetune => "finetune",
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            Stage::Warmup => Phase::Warmup,
            Stage::Main | Stage::Finetune => Phase::Full,
        }
    }

    fn id(self) -> u64 {
        match self {
            Stage::Warmup => 0,
            Stage::Main => 1,
            Stage::Finetune => 2,
        }
    }
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub l_2d: f64,
    pub l_prior: f64,
    pub l_c2d: Option<f64>,
    pub l_cf: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

pub const STEP_CSV_HEADER: &str = "round,stage,epoch,step,l_2d,l_prior,l_c2d,l_cf,l_d,total,grad_norm";

/// Held-out NMPJPE (mm) and 2D error (px) after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub single_nmpjpe: f64,
    pub interact_nmpjpe: f64,
    pub fusion_nmpjpe: f64,
    pub single_px: f64,
    pub interact_px: f64,
}

pub const EPOCH_CSV_HEADER: &str =
    "round,stage,epoch,single_nmpjpe,interact_nmpjpe,fusion_nmpjpe,single_px,interact_px";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.stage.name(),
            self.epoch,
            self.step,
            self.l_2d,
            self.l_prior,
            opt(self.l_c2d),
            opt(self.l_cf),
            opt(self.l_d),
            self.total,
            self.grad_norm
        )
    }
}

impl EpochRecord {
    fn from_report(round: usize, stage: Stage, epoch: usize, r: &EvalReport) -> Self {
        let s = r.single.as_ref().expect("full report");
        let i = r.interact.as_ref().expect("full report");
        let f = r.fusion.as_ref().expect("full report");
        Self {
            round,
            stage,
            epoch,
            single_nmpjpe: s.nmpjpe_mm,
            interact_nmpjpe: i.nmpjpe_mm,
            fusion_nmpjpe: f.nmpjpe_mm,
            single_px: s.pixel_error.unwrap_or(0.0),
            interact_px: i.pixel_error.unwrap_or(0.0),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.stage.name(),
            self.epoch,
            self.single_nmpjpe,
            self.interact_nmpjpe,
            self.fusion_nmpjpe,
            self.single_px,
            self.interact_px
        )
    }
}

/// Per-step and per-epoch records of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.epochs.is_empty()
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from(STEP_CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(EPOCH_CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }

    pub fn write_steps_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.steps_csv().as_bytes())?;
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.epochs_csv().as_bytes())?;
        Ok(())
    }
}

/// Training session over one dataset.
///
/// Cloning a session forks it: both copies continue from the same parameters,
/// optimizer state and log.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    params: ParamStore,
    opt: AdamState,
    train_idx: Vec<usize>,
    held_idx: Vec<usize>,
    views: Vec<usize>,
    round: usize,
    step: usize,
    /// Optimizer steps taken in the full phase; drives loss alternation.
    full_step: usize,
    log: TrainLog,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, params: ParamStore, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.train.views > data.num_views() {
            return Err(Error::config(
                "train.views",
                format!("exceeds the dataset's {} views", data.num_views()),
            ));
        }
        let (train_idx, held_idx) = split(data, cfg.data.seed, cfg.train.holdout_fraction);
        if train_idx.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let views = (0..cfg.train.views).collect();
        Ok(Self {
            opt: AdamState::new(&params),
            cfg,
            params,
            train_idx,
            held_idx,
            views,
            round: 1,
            step: 0,
            full_step: 0,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn held_out(&self) -> &[usize] {
        &self.held_idx
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    /// Fork with a different set of disabled components. Sound after the
    /// warmup for loss switches, which do not change the warmup objective.
    pub fn fork_with(&self, disable: Vec<Switch>) -> Result<Self> {
        let mut t = self.clone();
        t.cfg.disable = disable;
        t.cfg.validate()?;
        Ok(t)
    }

    fn rng(&self, stage: Stage, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(((self.round as u64) << 40) | (stage.id() << 32) | epoch as u64);
        rng
    }

    /// One pass over the training split followed by a held-out evaluation.
    pub fn run_epoch(&mut self, data: &Dataset, stage: Stage, epoch: usize) -> Result<()> {
        let mut rng = self.rng(stage, epoch);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut rng);
        let rig = data.rig();
        let image = (rig.width, rig.height);
        let cams: Vec<_> = self.views.iter().map(|&v| rig.cameras[v].clone()).collect();
        let phase = stage.phase();
        for batch in order.chunks(self.cfg.train.batch_timesteps) {
            let alt = self.full_step;
            let mut grads: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut sum = LossValues::default();
            let (mut n_c2d, mut n_cf, mut n_d) = (0usize, 0usize, 0usize);
            for &i in batch {
                let input = prepare_input(
                    &data.samples[i],
                    &self.views,
                    image,
                    &self.cfg.model,
                    self.cfg.loss.use_confidence,
                );
                let mask = match stage {
                    Stage::Finetune => ViewMask::random(&mut rng, self.views.len()),
                    _ => ViewMask::all(self.views.len()),
                };
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let (total, vals) =
                    timestep_loss(&mut g, &p, &self.cfg, &input, &cams, image, phase, alt, &mask)?;
                if !vals.total.is_finite() {
                    return Err(Error::Divergence {
                        step: self.step,
                        value: vals.total,
                    });
                }
                let gr = g.backward(total)?;
                for (acc, t) in grads.iter_mut().zip(p.gradients(&gr)) {
                    for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += x;
                    }
                }
                sum.l_2d += vals.l_2d;
                sum.l_prior += vals.l_prior;
                sum.total += vals.total;
                if let Some(x) = vals.l_c2d {
                    *sum.l_c2d.get_or_insert(0.0) += x;
                    n_c2d += 1;
                }
                if let Some(x) = vals.l_cf {
                    *sum.l_cf.get_or_insert(0.0) += x;
                    n_cf += 1;
                }
                if let Some(x) = vals.l_d {
                    *sum.l_d.get_or_insert(0.0) += x;
                    n_d += 1;
                }
            }
            let n = batch.len() as f64;
            for gt in grads.iter_mut() {
                gt.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            let grad_norm = clip_global_norm(&mut grads, self.cfg.train.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    value: grad_norm,
                });
            }
            adamw_step(&mut self.params, &grads, &mut self.opt, &self.cfg.train)?;
            self.log.steps.push(StepRecord {
                round: self.round,
                stage,
                epoch,
                step: self.step,
                l_2d: sum.l_2d / n,
                l_prior: sum.l_prior / n,
                l_c2d: sum.l_c2d.map(|x| x / n_c2d as f64),
                l_cf: sum.l_cf.map(|x| x / n_cf as f64),
                l_d: sum.l_d.map(|x| x / n_d as f64),
                total: sum.total / n,
                grad_norm,
            });
            self.step += 1;
            if phase == Phase::Full {
                self.full_step += 1;
            }
        }
        if !self.held_idx.is_empty() {
            let report = self.evaluate(data)?;
            self.log
                .epochs
                .push(EpochRecord::from_report(self.round, stage, epoch, &report));
        }
        Ok(())
    }

    fn run_stage(&mut self, data: &Dataset, stage: Stage, epochs: usize) -> Result<()> {
        for e in 0..epochs {
            self.run_epoch(data, stage, e)?;
        }
        Ok(())
    }

    pub fn warmup(&mut self, data: &Dataset) -> Result<()> {
        self.run_stage(data, Stage::Warmup, self.cfg.train.warmup_epochs)
    }

    pub fn main_phase(&mut self, data: &Dataset) -> Result<()> {
        self.run_stage(data, Stage::Main, self.cfg.train.main_epochs)
    }

    pub fn finetune(&mut self, data: &Dataset) -> Result<()> {
        self.run_stage(data, Stage::Finetune, self.cfg.train.view_mask_finetune_epochs)
    }

    /// Held-out report over the training views.
    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(&self.params, &self.cfg, data, &self.held_idx, &self.views)
    }

    /// Starts the next self-training round: training labels are replaced by
    /// the current refined projections and the optimizer state is reset.
    pub fn next_round(&mut self, data: &Dataset) -> Result<Dataset> {
        if self.round >= self.cfg.train.self_training_iterations {
            return Err(Error::config(
                "train.self_training_iterations",
                "no self-training rounds left",
            ));
        }
        let refreshed = self_training_round(&self.params, &self.cfg, data, &self.train_idx)?;
        self.round += 1;
        self.opt = AdamState::new(&self.params);
        Ok(refreshed)
    }
}

/// Copy of `data` where the labels of every view of the samples in `indices`
/// are the model's refined 2D projections (clamped into the image) with
/// confidence 1.
pub fn self_training_round(
    params: &ParamStore,
    cfg: &ExperimentConfig,
    data: &Dataset,
    indices: &[usize],
) -> Result<Dataset> {
    let mut out = data.clone();
    let rig = data.rig();
    let image = (rig.width, rig.height);
    let (wmax, hmax) = ((rig.width - 1) as f64, (rig.height - 1) as f64);
    let views: Vec<usize> = (0..data.num_views()).collect();
    let ablation = cfg.ablation();
    for &i in indices {
        let input = prepare_input(&data.samples[i], &views, image, &cfg.model, cfg.loss.use_confidence);
        let pred = predict(params, &cfg.model, &input, image, &ablation)?;
        for (k, view) in out.samples[i].views.iter_mut().enumerate() {
            let points: Vec<[f64; 2]> = pred.refined2d[k]
                .iter()
                .map(|p| [p[0].clamp(0.0, wmax), p[1].clamp(0.0, hmax)])
                .collect();
            let conf = vec![1.0; points.len()];
            view.labels = Some(PseudoLabelSet { points, conf });
        }
    }
    Ok(out)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainLog,
    /// Held-out report at the end of every self-training round.
    pub rounds: Vec<EvalReport>,
}

/// Runs the configured schedule: warmup, main phase, optional view-mask
/// finetune, then further self-training rounds of main epochs each.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, params: ParamStore) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), params, data)?;
    t.warmup(data)?;
    t.main_phase(data)?;
    t.finetune(data)?;
    let mut rounds = vec![t.evaluate(data)?];
    let mut current = data.clone();
    while t.round() < cfg.train.self_training_iterations {
        current = t.next_round(&current)?;
        t.main_phase(&current)?;
        rounds.push(t.evaluate(&current)?);
    }
    Ok(TrainOutcome {
        log: t.log.clone(),
        params: t.into_params(),
        rounds,
    })
}
