//! Held-out evaluation of single-view, refined and fused predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::camera::PinholeCam;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::handmodel::Skeleton;
use crate::metrics::{pixel_error, summarize, MetricSummary};
use crate::model::{predict, prepare_input, Prediction};
use crate::params::ParamStore;
use crate::synthdata::{Dataset, Sample};

/// Which output column of a report to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Single,
    Interact,
    Fusion,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Single, EvalMode::Interact, EvalMode::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Single => "single",
            EvalMode::Interact => "interact",
            EvalMode::Fusion => "fusion",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}` (single|interact|fusion)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Dataset views used for inference.
    pub views: Vec<usize>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single: Option<MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interact: Option<MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<MetricSummary>,
    /// Pixel error of the detector pseudo labels against ground truth.
    pub pseudo_label_pixel_error: f64,
    /// Same, over joints the detector did not drop.
    pub pseudo_label_pixel_error_visible: f64,
}

impl EvalReport {
    /// Keeps only the column of `mode`.
    pub fn restrict(mut self, mode: EvalMode) -> Self {
        if mode != EvalMode::Single {
            self.single = None;
        }
        if mode != EvalMode::Interact {
            self.interact = None;
        }
        if mode != EvalMode::Fusion {
            self.fusion = None;
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores predictions (one per sample, all over the same views) against ground truth.
pub fn score(
    preds: &[Prediction],
    samples: &[&Sample],
    cams: &[PinholeCam],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::config("eval", "one prediction per sample required"));
    }
    let views = preds.first().map(|p| p.views.clone()).unwrap_or_default();
    let view_cams: Vec<PinholeCam> = views
        .iter()
        .map(|&i| cams.get(i).cloned().ok_or_else(|| Error::config("views", "view index outside the rig")))
        .collect::<Result<_>>()?;
    let reference = views
        .iter()
        .position(|&i| i == cfg.train.reference_view)
        .unwrap_or(0);

    let (mut s_pred, mut r_pred, mut gts) = (Vec::new(), Vec::new(), Vec::new());
    let (mut fused, mut fused_gt) = (Vec::new(), Vec::new());
    let (mut s_px, mut r_px, mut l_px, mut l_vis) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (pred, sample) in preds.iter().zip(samples) {
        if pred.views != views {
            return Err(Error::config("eval", "predictions use different view sets"));
        }
        let gt: Vec<Skeleton> = view_cams.iter().map(|c| sample.camera_frame_gt(c)).collect();
        for (k, &v) in views.iter().enumerate() {
            let view = &sample.views[v];
            let gt2d = view.gt2d_vectors();
            s_px.push(pixel_error(&pred.single2d_vectors(k), &gt2d));
            r_px.push(pixel_error(&pred.refined2d_vectors(k), &gt2d));
            for (j, (p, g)) in view.detections.vectors().iter().zip(&gt2d).enumerate() {
                let e = (p - g).norm();
                l_px.push(e);
                if view.detections.conf[j] > 0.0 {
                    l_vis.push(e);
                }
            }
        }
        let extr = cfg.train.use_extrinsics.then_some(view_cams.as_slice());
        fused.push(fuse(&pred.refined, extr, reference)?.fused);
        fused_gt.push(gt[reference]);
        s_pred.extend(pred.single.iter().copied());
        r_pred.extend(pred.refined.iter().copied());
        gts.extend(gt);
    }
    let mut single = summarize(&s_pred, &gts)?;
    single.pixel_error = Some(mean(&s_px));
    let mut interact = summarize(&r_pred, &gts)?;
    interact.pixel_error = Some(mean(&r_px));
    let fusion = summarize(&fused, &fused_gt)?;
    Ok(EvalReport {
        config_hash: cfg.hash(),
        views,
        samples: samples.len(),
        single: Some(single),
        interact: Some(interact),
        fusion: Some(fusion),
        pseudo_label_pixel_error: mean(&l_px),
        pseudo_label_pixel_error_visible: mean(&l_vis),
    })
}

/// Runs the model on `indices` of `data` over `views` and scores it.
pub fn evaluate(
    params: &ParamStore,
    cfg: &ExperimentConfig,
    data: &Dataset,
    indices: &[usize],
    views: &[usize],
) -> Result<EvalReport> {
    let rig = data.rig();
    if views.is_empty() || views.iter().any(|&v| v >= rig.cameras.len()) {
        return Err(Error::config("views", "views must be a non-empty subset of the rig"));
    }
    let image = (rig.width, rig.height);
    let ablation = cfg.ablation();
    let samples: Vec<&Sample> = indices.iter().map(|&i| &data.samples[i]).collect();
    let preds = samples
        .iter()
        .map(|s| {
            let input = prepare_input(s, views, image, &cfg.model, cfg.loss.use_confidence);
            predict(params, &cfg.model, &input, image, &ablation)
        })
        .collect::<Result<Vec<_>>>()?;
    score(&preds, &samples, &rig.cameras, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synthdata::{generate_dataset, NoiseModel, RigConfig};

    fn perfect(sample: &Sample, cams: &[PinholeCam], views: &[usize]) -> Prediction {
        let gt: Vec<Skeleton> = views.iter().map(|&v| sample.camera_frame_gt(&cams[v])).collect();
        let px: Vec<Vec<[f64; 2]>> = views.iter().map(|&v| sample.views[v].gt2d.clone()).collect();
        Prediction {
            views: views.to_vec(),
            single: gt.clone(),
            refined: gt,
            single2d: px.clone(),
            refined2d: px,
            refined_cams: vec![[1.0, 0.0, 0.0]; views.len()],
        }
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let data = generate_dataset(&RigConfig::default(), &NoiseModel::default(), 3, 1).unwrap();
        let cfg = ExperimentConfig::default();
        let cams = &data.rig().cameras;
        let views: Vec<usize> = (0..8).collect();
        let samples: Vec<&Sample> = data.samples.iter().collect();
        let preds: Vec<Prediction> = samples.iter().map(|s| perfect(s, cams, &views)).collect();
        let r = score(&preds, &samples, cams, &cfg).unwrap();
        for m in [&r.single, &r.interact, &r.fusion] {
            let m = m.as_ref().unwrap();
            assert!(m.mpjpe_mm < 1e-9, "{m:?}");
            assert!(m.nmpjpe_mm < 1e-6);
        }
        assert_eq!(r.single.unwrap().pixel_error, Some(0.0));
        assert!(r.pseudo_label_pixel_error > r.pseudo_label_pixel_error_visible);
        assert_eq!(r.samples, 3);
    }

    #[test]
    fn restricted_report_keeps_one_column() {
        let data = generate_dataset(&RigConfig::default(), &NoiseModel::exact(), 2, 1).unwrap();
        let cfg = ExperimentConfig::default();
        let params = init_params(&cfg.model, 0).unwrap();
        let r = evaluate(&params, &cfg, &data, &[0, 1], &[1, 4, 6]).unwrap();
        assert_eq!(r.views, vec![1, 4, 6]);
        assert_eq!(r.pseudo_label_pixel_error, 0.0);
        let f = r.clone().restrict(EvalMode::Fusion);
        assert!(f.single.is_none() && f.interact.is_none());
        assert_eq!(f.fusion, r.fusion);
        let json = f.to_json();
        assert!(!json.contains("\"single\"") && json.contains("\"fusion\""));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), m);
        }
        assert!("both".parse::<EvalMode>().is_err());
    }

    #[test]
    fn out_of_rig_view_is_rejected() {
        let data = generate_dataset(&RigConfig::default(), &NoiseModel::exact(), 1, 1).unwrap();
        let cfg = ExperimentConfig::default();
        let params = init_params(&cfg.model, 0).unwrap();
        assert!(evaluate(&params, &cfg, &data, &[0], &[8]).is_err());
        assert!(evaluate(&params, &cfg, &data, &[0], &[]).is_err());
    }
}
