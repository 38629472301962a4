//! Experiment configuration: data generation, model widths, loss weights and
//! the training schedule. Readable from TOML or JSON; every field has a
//! default so partial files are accepted.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::{NoiseModel, RigConfig};

/// Components that can be disabled for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Switch {
    #[serde(rename = "vsf")]
    Vsf,
    #[serde(rename = "cva")]
    Cva,
    #[serde(rename = "g1")]
    G1,
    #[serde(rename = "g2")]
    G2,
    #[serde(rename = "g3")]
    G3,
    #[serde(rename = "l_c2d")]
    LC2d,
    #[serde(rename = "l_cf")]
    LCf,
    /// Both consistency losses.
    #[serde(rename = "l_c")]
    LC,
    #[serde(rename = "l_d")]
    LD,
    /// Both interaction branches.
    #[serde(rename = "dcvi")]
    Dcvi,
}

impl Switch {
    pub const ALL: [Switch; 10] = [
        Switch::Vsf,
        Switch::Cva,
        Switch::G1,
        Switch::G2,
        Switch::G3,
        Switch::LC2d,
        Switch::LCf,
        Switch::LC,
        Switch::LD,
        Switch::Dcvi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Switch::Vsf => "vsf",
            Switch::Cva => "cva",
            Switch::G1 => "g1",
            Switch::G2 => "g2",
            Switch::G3 => "g3",
            Switch::LC2d => "l_c2d",
            Switch::LCf => "l_cf",
            Switch::LC => "l_c",
            Switch::LD => "l_d",
            Switch::Dcvi => "dcvi",
        }
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Switch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Switch::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::config("switch", format!("unknown switch `{s}`")))
    }
}

/// Set of disabled components, resolved into per-component flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_vsf: bool,
    pub no_cva: bool,
    pub no_g1: bool,
    pub no_g2: bool,
    pub no_g3: bool,
    pub no_l_c2d: bool,
    pub no_l_cf: bool,
    pub no_l_d: bool,
}

impl Ablation {
    pub fn from_switches(switches: &[Switch]) -> Self {
        let mut a = Ablation::default();
        for s in switches {
            match s {
                Switch::Vsf => a.no_vsf = true,
                Switch::Cva => a.no_cva = true,
                Switch::G1 => a.no_g1 = true,
                Switch::G2 => a.no_g2 = true,
                Switch::G3 => a.no_g3 = true,
                Switch::LC2d => a.no_l_c2d = true,
                Switch::LCf => a.no_l_cf = true,
                Switch::LC => {
                    a.no_l_c2d = true;
                    a.no_l_cf = true;
                }
                Switch::LD => a.no_l_d = true,
                Switch::Dcvi => {
                    a.no_cva = true;
                    a.no_vsf = true;
                }
            }
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_samples: usize,
    pub seed: u64,
    pub rig: RigConfig,
    pub noise: NoiseModel,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            seed: 0,
            rig: RigConfig::default(),
            noise: NoiseModel::default(),
        }
    }
}

/// Network widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square heatmap grid fed to the encoder.
    pub grid: usize,
    /// Heatmap Gaussian width in grid pixels.
    pub heatmap_sigma: f64,
    /// Channel widths of the four pyramid levels.
    pub channels: [usize; 4],
    /// Hidden width of the regression heads.
    pub head_hidden: usize,
    /// Location-embedding width.
    pub c1: usize,
    /// Spatial-aware graph feature width.
    pub c2: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Per-token width before the per-view flatten of the refinement head.
    pub refine_width: usize,
    pub leaky_slope: f64,
    /// Normalized weak-perspective scale the camera head starts from.
    pub cam_scale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            heatmap_sigma: 2.0,
            channels: [8, 16, 32, 64],
            head_hidden: 64,
            c1: 16,
            c2: 32,
            heads: 4,
            blocks: 2,
            refine_width: 32,
            leaky_slope: 0.01,
            cam_scale_init: 3.75,
        }
    }
}

impl ModelConfig {
    /// Spatial side of pyramid level `l` (0-based).
    pub fn level_side(&self, l: usize) -> usize {
        self.grid / (4 << l)
    }

    pub fn c3(&self) -> usize {
        self.channels[0] + self.channels[1] + self.channels[2]
    }

    /// Graph feature width `c1 + c2 + c3`.
    pub fn graph_width(&self) -> usize {
        self.c1 + self.c2 + self.c3()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.grid % 32 != 0 {
            return Err(Error::config("model.grid", "must be a positive multiple of 32"));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::config("model.heatmap_sigma", "must be positive"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("model.channels", "widths must be positive"));
        }
        for (name, v) in [
            ("model.head_hidden", self.head_hidden),
            ("model.c1", self.c1),
            ("model.c2", self.c2),
            ("model.heads", self.heads),
            ("model.blocks", self.blocks),
            ("model.refine_width", self.refine_width),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        let cells = self.level_side(3).pow(2);
        if self.c2 % cells != 0 {
            return Err(Error::config(
                "model.c2",
                format!("must be a multiple of the {cells} top-level cells"),
            ));
        }
        if self.graph_width() % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("must divide the graph width {}", self.graph_width()),
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("model.leaky_slope", "must be in [0, 1)"));
        }
        if !(self.cam_scale_init > 0.0) {
            return Err(Error::config("model.cam_scale_init", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub w_2d: f64,
    pub w_c2d: f64,
    pub w_cf: f64,
    pub w_d: f64,
    pub w_prior: f64,
    /// Weight the 2D loss by pseudo-label confidence.
    pub use_confidence: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            gamma: 100.0,
            w_2d: 1.0,
            w_c2d: 1.0,
            w_cf: 1.0,
            w_d: 1.0,
            w_prior: 1.0,
            use_confidence: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.alpha", self.alpha),
            ("loss.gamma", self.gamma),
            ("loss.w_2d", self.w_2d),
            ("loss.w_c2d", self.w_c2d),
            ("loss.w_cf", self.w_cf),
            ("loss.w_d", self.w_d),
            ("loss.w_prior", self.w_prior),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

pub const MAX_SELF_TRAINING_ITERATIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Timesteps per batch; every timestep carries all views.
    pub batch_timesteps: usize,
    pub views: usize,
    pub seed: u64,
    pub view_mask_finetune_epochs: usize,
    pub self_training_iterations: usize,
    /// Global L2 gradient-norm clip.
    pub clip_norm: f64,
    pub holdout_fraction: f64,
    /// Align views with the calibrated extrinsics; Procrustes otherwise.
    pub use_extrinsics: bool,
    pub reference_view: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 2,
            main_epochs: 6,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_timesteps: 8,
            views: 8,
            seed: 0,
            view_mask_finetune_epochs: 0,
            self_training_iterations: 1,
            clip_norm: 10.0,
            holdout_fraction: 0.1,
            use_extrinsics: true,
            reference_view: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if self.batch_timesteps == 0 {
            return Err(Error::config("train.batch_timesteps", "must be positive"));
        }
        if self.views == 0 {
            return Err(Error::config("train.views", "must be at least 1"));
        }
        if self.self_training_iterations == 0
            || self.self_training_iterations > MAX_SELF_TRAINING_ITERATIONS
        {
            return Err(Error::config(
                "train.self_training_iterations",
                format!("must be in 1..={MAX_SELF_TRAINING_ITERATIONS}"),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("train.holdout_fraction", "must be in [0, 1)"));
        }
        if self.reference_view >= self.views {
            return Err(Error::config("train.reference_view", "must index an active view"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    /// Components disabled for this run.
    pub disable: Vec<Switch>,
}

impl ExperimentConfig {
    /// Parses JSON if the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.rig.validate()?;
        self.data.noise.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.train.views > self.data.rig.num_views {
            return Err(Error::config(
                "train.views",
                format!("exceeds rig size {}", self.data.rig.num_views),
            ));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation::from_switches(&self.disable)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
