//! Detection-quality measurement: BEV IoU, greedy matching, all-point AP and
//! the experiment runner that pools detections over a scene suite.

pub mod iou;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackError};
use crate::geometry::Pose6D;
use crate::perception::{forward, Detection, PerceptionError, PerceptionVariant};
use crate::scene::{Box3D, Scene, RANGE_X, RANGE_Y};

pub use iou::iou_bev;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(Box3D),
    #[error("scene {scene}: expected {expected} CAV poses, got {got}")]
    PoseCount { scene: usize, expected: usize, got: usize },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// A detection's confidence with its true/false-positive label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub confidence: f64,
    pub tp: bool,
}

/// Detection indices sorted by confidence descending, ties by index.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy matching in confidence order; each detection takes the unmatched
/// ground truth of highest IoU if that IoU reaches `thresh`. Labels come back
/// in confidence order.
pub fn match_detections(dets: &[Detection], gts: &[Box3D], thresh: f64) -> Result<Vec<Labeled>, EvalError> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou_bev(&dets[i].bbox, gt)?;
            if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push(Labeled { confidence: dets[i].confidence, tp: best.is_some() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Raw precision/recall after each detection in confidence order (stable for
/// ties).
pub fn pr_curve(labels: &[Labeled], n_gt: usize) -> Vec<PRPoint> {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut tp, mut fp) = (0usize, 0usize);
    sorted
        .iter()
        .map(|l| {
            if l.tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PRPoint {
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

/// All-point interpolated AP. With no ground truth the AP is 1 for an empty
/// detection list and 0 otherwise.
pub fn average_precision(labels: &[Labeled], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(labels, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Cooperative,
    NoFusion,
}

/// Detections and ground truth of one scene under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOverlay {
    pub condition: String,
    pub scene_id: usize,
    pub gt: Vec<Box3D>,
    pub detections: Vec<Detection>,
}

/// One row of the condition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub method: String,
    pub mask: String,
    pub variant: String,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ConditionRow>,
    pub overlays: Vec<SceneOverlay>,
}

impl EvalReport {
    pub fn row(&self, condition: &str) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn ap(&self, condition: &str) -> Option<f64> {
        self.row(condition).map(|r| r.ap)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.overlays.extend(other.overlays);
    }
}

fn in_range(b: &Box3D) -> bool {
    b.center[0].abs() <= RANGE_X && b.center[1].abs() <= RANGE_Y
}

/// Runs detection on one scene with the given CAV poses (`None` drops every
/// CAV, i.e. no fusion) and returns in-range detections and ground truth.
pub fn detect_scene(
    scene: &Scene,
    cav_poses: Option<&[Pose6D]>,
    variant: &PerceptionVariant,
) -> Result<(Vec<Detection>, Vec<Box3D>), EvalError> {
    let tape = match cav_poses {
        Some(poses) => {
            if poses.len() != scene.cav_poses.len() {
                return Err(EvalError::PoseCount { scene: scene.index, expected: scene.cav_poses.len(), got: poses.len() });
            }
            forward(&scene.clouds[0], scene.cav_clouds(), &scene.ego_pose, poses, variant)?
        }
        None => forward(&scene.clouds[0], &[], &scene.ego_pose, &[], variant)?,
    };
    let dets = tape.detect()?.into_iter().filter(|d| in_range(&d.bbox)).collect();
    let gts = scene.gt_boxes_ego().into_iter().filter(in_range).collect();
    Ok((dets, gts))
}

/// Identifies a condition row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionLabel {
    pub condition: String,
    pub method: String,
    pub mask: String,
}

impl ConditionLabel {
    pub fn new(condition: impl Into<String>, method: impl Into<String>, mask: impl Into<String>) -> Self {
        Self { condition: condition.into(), method: method.into(), mask: mask.into() }
    }
}

/// Evaluates one condition over a suite. `poses[i]` holds the CAV poses for
/// scene `i`; `None` means no fusion.
pub fn evaluate_condition(
    scenes: &[Scene],
    poses: Option<&[Vec<Pose6D>]>,
    variant: &PerceptionVariant,
    label: &ConditionLabel,
) -> Result<EvalReport, EvalError> {
    let per_scene: Vec<(Vec<Detection>, Vec<Box3D>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| detect_scene(s, poses.map(|p| p[i].as_slice()), variant))
        .collect::<Result<_, _>>()?;

    let mut labels = Vec::new();
    let mut n_gt = 0;
    let mut overlays = Vec::with_capacity(scenes.len());
    for (scene, (dets, gts)) in scenes.iter().zip(per_scene) {
        labels.extend(match_detections(&dets, &gts, IOU_THRESHOLD)?);
        n_gt += gts.len();
        overlays.push(SceneOverlay { condition: label.condition.clone(), scene_id: scene.index, gt: gts, detections: dets });
    }
    let tp = labels.iter().filter(|l| l.tp).count();
    let row = ConditionRow {
        condition: label.condition.clone(),
        method: label.method.clone(),
        mask: label.mask.clone(),
        variant: variant.name.clone(),
        ap: average_precision(&labels, n_gt),
        tp,
        fp: labels.len() - tp,
        fn_: n_gt - tp,
    };
    Ok(EvalReport { rows: vec![row], overlays })
}

/// Attacks every scene with each config and evaluates on `eval_variant`.
///
/// Cooperative mode yields a `no_attack` row followed by one row per config;
/// no-fusion mode yields a single `no_fusion` row (attacks on CAV poses have
/// nothing to act on).
pub fn run_experiment(
    scenes: &[Scene],
    attack_cfgs: &[AttackConfig],
    eval_variant: &PerceptionVariant,
    fusion: FusionMode,
) -> Result<EvalReport, EvalError> {
    if fusion == FusionMode::NoFusion {
        return evaluate_condition(scenes, None, eval_variant, &ConditionLabel::new("no_fusion", "none", "none"));
    }
    let original: Vec<Vec<Pose6D>> = scenes.iter().map(|s| s.cav_poses.clone()).collect();
    let mut report = evaluate_condition(scenes, Some(&original), eval_variant, &ConditionLabel::new("no_attack", "none", "none"))?;
    for cfg in attack_cfgs {
        let adv: Vec<Vec<Pose6D>> = scenes
            .par_iter()
            .map(|s| run_attack(s, cfg).map(|r| r.adv_poses()))
            .collect::<Result<_, _>>()?;
        let label = ConditionLabel::new(cfg.condition_name(), cfg.method.as_str(), cfg.effective_mask().label());
        report.extend(evaluate_condition(scenes, Some(&adv), eval_variant, &label)?);
    }
    Ok(report)
}
