//! Pose attacks on the CAVs of one scene: RBA, FGSM, IFGSM, PGD, PAA and
//! AdvGPS.
//!
//! Every method works on the adversarial poses directly. A candidate step is
//! always passed through [`project_to_budget`], so the stored deltas
//! (`adv - original`, angles wrapped) satisfy the budget exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud, Pose6D, PARAM_NAMES, POSE_DIM};
use crate::losses::{
    appearance_discrepancy, appearance_gradient, detection_loss, detection_loss_gradient, median_bandwidth,
    mmd_gradient, mmd_squared, objective, project_to_budget, GroundTruthHeatmap, LossError, ObjectiveWeights,
    PerturbationBudget,
};
use crate::perception::{backward, forward, FeatureGrid, PerceptionError, PerceptionVariant, PipelineTape, Upstream};
use crate::scene::Scene;

pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Rba,
    Fgsm,
    Ifgsm,
    Pgd,
    Paa,
    Advgps,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] =
        [AttackMethod::Rba, AttackMethod::Fgsm, AttackMethod::Ifgsm, AttackMethod::Pgd, AttackMethod::Paa, AttackMethod::Advgps];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::Rba => "rba",
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Ifgsm => "ifgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Paa => "paa",
            AttackMethod::Advgps => "advgps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str().eq_ignore_ascii_case(s))
    }
}

/// Which of the six pose parameters an attack may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamMask(pub [bool; POSE_DIM]);

impl ParamMask {
    pub fn all() -> Self {
        Self([true; POSE_DIM])
    }

    pub fn none() -> Self {
        Self([false; POSE_DIM])
    }

    pub fn xyz() -> Self {
        Self([true, true, true, false, false, false])
    }

    pub fn single(param: usize) -> Self {
        let mut m = [false; POSE_DIM];
        m[param] = true;
        Self(m)
    }

    pub fn enabled(&self, param: usize) -> bool {
        self.0[param]
    }

    pub fn apply(&self, v: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| if self.0[i] { v[i] } else { 0.0 })
    }

    /// `all`, `xyz`, a parameter name, `none`, or a comma-separated list of
    /// parameter names.
    pub fn label(&self) -> String {
        if *self == Self::all() {
            return "all".into();
        }
        if *self == Self::xyz() {
            return "xyz".into();
        }
        if *self == Self::none() {
            return "none".into();
        }
        let names: Vec<&str> = (0..POSE_DIM).filter(|&i| self.0[i]).map(|i| PARAM_NAMES[i]).collect();
        names.join(",")
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "all" | "G_all" => return Some(Self::all()),
            "xyz" | "G_xyz" => return Some(Self::xyz()),
            "none" => return Some(Self::none()),
            _ => {}
        }
        let mut m = Self::none();
        for part in s.split(',') {
            let i = param_index(part.trim())?;
            m.0[i] = true;
        }
        Some(m)
    }
}

/// Index of a pose parameter; accepts `theta_x`-style aliases for the angles.
pub fn param_index(name: &str) -> Option<usize> {
    match name {
        "theta_x" | "thetax" => Some(3),
        "theta_y" | "thetay" => Some(4),
        "theta_z" | "thetaz" => Some(5),
        _ => PARAM_NAMES.iter().position(|p| *p == name),
    }
}

impl Serialize for ParamMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ParamMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown mask {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Step sizes for (xy, z, angles); `None` means `eps / iterations`.
    #[serde(default)]
    pub steps: Option<[f64; 3]>,
    #[serde(default)]
    pub budget: PerturbationBudget,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default = "ParamMask::all")]
    pub mask: ParamMask,
    /// Variant the attack is crafted on.
    #[serde(default = "PerceptionVariant::b")]
    pub variant: PerceptionVariant,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the default `{method}_{mask}` condition name.
    #[serde(default)]
    pub name: Option<String>,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl AttackConfig {
    pub fn new(method: AttackMethod) -> Self {
        Self {
            method,
            iterations: DEFAULT_ITERATIONS,
            steps: None,
            budget: PerturbationBudget::default(),
            weights: ObjectiveWeights::default(),
            mask: ParamMask::all(),
            variant: PerceptionVariant::b(),
            seed: 0,
            name: None,
        }
    }

    pub fn condition_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}_{}", self.method.as_str(), self.effective_mask().label()))
    }

    /// Per-parameter step size.
    pub fn step(&self, param: usize) -> f64 {
        let group = match param {
            0 | 1 => 0,
            2 => 1,
            _ => 2,
        };
        match self.steps {
            Some(s) => s[group],
            None => self.budget.eps(param) / self.iterations as f64,
        }
    }

    /// The mask actually applied (PAA always attacks positions only).
    pub fn effective_mask(&self) -> ParamMask {
        match self.method {
            AttackMethod::Paa => ParamMask::xyz(),
            _ => self.mask,
        }
    }

    /// Loss weights driving the updates. The gradient baselines use the task
    /// loss alone.
    pub fn effective_weights(&self) -> ObjectiveWeights {
        match self.method {
            AttackMethod::Advgps => self.weights,
            _ => ObjectiveWeights::task_only(),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |field, reason: &str| Err(AttackError::InvalidConfig { field, reason: reason.into() });
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        if !self.budget.is_valid() {
            return bad("budget", "all bounds must be positive and finite");
        }
        if !self.weights.is_valid() {
            return bad("weights", "must be non-negative and finite");
        }
        if let Some(s) = self.steps {
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("steps", "must be non-negative and finite");
            }
        }
        self.variant.validate()?;
        Ok(())
    }

    fn rng(&self, scene: &Scene) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(scene.seed);
        rng
    }
}

/// Values of the three discrepancies and the weighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub d_app: f64,
    pub d_dist: f64,
    pub d_task: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub d_app: f64,
    pub d_dist: f64,
    pub d_task: f64,
    pub objective: f64,
}

impl TraceEntry {
    fn new(iter: usize, t: LossTerms) -> Self {
        Self { iter, d_app: t.d_app, d_dist: t.d_dist, d_task: t.d_task, objective: t.objective }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavPerturbation {
    pub original_pose: Pose6D,
    pub adv_pose: Pose6D,
    pub delta: [f64; POSE_DIM],
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub scene_id: usize,
    pub method: AttackMethod,
    pub mask: ParamMask,
    pub budget: PerturbationBudget,
    pub per_cav: Vec<CavPerturbation>,
    /// Loss terms before each update.
    pub trace: Vec<TraceEntry>,
    /// Loss terms at the returned poses.
    pub final_terms: LossTerms,
}

impl AttackResult {
    pub fn adv_poses(&self) -> Vec<Pose6D> {
        self.per_cav.iter().map(|c| c.adv_pose).collect()
    }

    pub fn within_budget(&self) -> bool {
        self.per_cav.iter().all(|c| c.within_budget)
    }
}

/// Per-scene state shared by every loss evaluation: the crafting variant, the
/// ground-truth heatmap, and the projections and grids under the original
/// poses.
pub struct AttackContext<'a> {
    scene: &'a Scene,
    variant: PerceptionVariant,
    heatmap: GroundTruthHeatmap,
    ori_projected: Vec<PointCloud>,
    ori_grids: Vec<FeatureGrid>,
    total_points: usize,
    bandwidth: f64,
}

impl<'a> AttackContext<'a> {
    pub fn new(scene: &'a Scene, variant: &PerceptionVariant) -> Result<Self, AttackError> {
        let tape = forward(&scene.clouds[0], scene.cav_clouds(), &scene.ego_pose, &scene.cav_poses, variant)?;
        let spec = variant.grid_spec()?;
        let heatmap = GroundTruthHeatmap::rasterize(&scene.gt_boxes_ego(), spec);
        let ori_grids = tape.cav_grids().to_vec();
        // Median heuristic over the original CAV grids plus the empty grid,
        // fixed for the whole attack so the objective is a smooth function of
        // the poses.
        let empty = FeatureGrid::zeros(spec);
        let mut refs: Vec<&FeatureGrid> = ori_grids.iter().collect();
        refs.push(&empty);
        let bandwidth = median_bandwidth(&refs);
        let ori_projected = tape.projected().to_vec();
        let total_points = ori_projected.iter().map(PointCloud::len).sum();
        Ok(Self { scene, variant: variant.clone(), heatmap, ori_projected, ori_grids, total_points, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn heatmap(&self) -> &GroundTruthHeatmap {
        &self.heatmap
    }

    fn tape(&self, poses: &[Pose6D]) -> Result<PipelineTape, AttackError> {
        let s = self.scene;
        Ok(forward(&s.clouds[0], s.cav_clouds(), &s.ego_pose, poses, &self.variant)?)
    }

    fn terms_from_tape(&self, tape: &PipelineTape, w: &ObjectiveWeights) -> Result<LossTerms, AttackError> {
        let mut d_app = 0.0;
        if self.total_points > 0 {
            for (ori, adv) in self.ori_projected.iter().zip(tape.projected()) {
                d_app += appearance_discrepancy(ori, adv)? * ori.len() as f64;
            }
            d_app /= self.total_points as f64;
        }
        let d_dist = if self.ori_grids.is_empty() {
            0.0
        } else {
            mmd_squared(&self.ori_grids, tape.cav_grids(), self.bandwidth)?
        };
        let d_task = detection_loss(tape.score(), &self.heatmap)?;
        Ok(LossTerms { d_app, d_dist, d_task, objective: objective(d_app, d_dist, d_task, w) })
    }

    /// Loss terms at `poses`.
    pub fn evaluate(&self, poses: &[Pose6D], w: &ObjectiveWeights) -> Result<LossTerms, AttackError> {
        self.terms_from_tape(&self.tape(poses)?, w)
    }

    /// Loss terms and the gradient of the weighted objective with respect to
    /// each CAV pose.
    pub fn gradient(&self, poses: &[Pose6D], w: &ObjectiveWeights) -> Result<(LossTerms, Vec<[f64; POSE_DIM]>), AttackError> {
        let tape = self.tape(poses)?;
        let terms = self.terms_from_tape(&tape, w)?;
        if poses.is_empty() {
            return Ok((terms, Vec::new()));
        }
        let mut up = Upstream::default();
        if w.xi != 0.0 {
            let g = detection_loss_gradient(tape.score(), &self.heatmap)?;
            up.score = Some(g.into_iter().map(|v| w.xi * v).collect());
        }
        if w.omega != 0.0 {
            let mut g = mmd_gradient(&self.ori_grids, tape.cav_grids(), self.bandwidth)?;
            for gg in &mut g {
                gg.occupancy.iter_mut().chain(gg.height.iter_mut()).for_each(|v| *v *= w.omega);
            }
            up.cav_grids = Some(g);
        }
        if w.lambda != 0.0 {
            let g = self
                .ori_projected
                .iter()
                .zip(tape.projected())
                .map(|(ori, adv)| {
                    appearance_gradient(ori, adv, self.total_points)
                        .map(|pts| pts.into_iter().map(|p| p.map(|v| w.lambda * v)).collect())
                })
                .collect::<Result<Vec<Vec<[f64; 3]>>, _>>()?;
            up.cav_points = Some(g);
        }
        Ok((terms, backward(&tape, &up)?))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed objective gradient at `poses` on the crafting variant, masked,
/// using the given loss weights.
pub fn gradient_step(
    scene: &Scene,
    poses: &[Pose6D],
    cfg: &AttackConfig,
    weights: &ObjectiveWeights,
) -> Result<Vec<[f64; POSE_DIM]>, AttackError> {
    let ctx = AttackContext::new(scene, &cfg.variant)?;
    signed_gradient(&ctx, poses, &cfg.effective_mask(), weights).map(|(_, s)| s)
}

fn signed_gradient(
    ctx: &AttackContext,
    poses: &[Pose6D],
    mask: &ParamMask,
    weights: &ObjectiveWeights,
) -> Result<(LossTerms, Vec<[f64; POSE_DIM]>), AttackError> {
    let (terms, grads) = ctx.gradient(poses, weights)?;
    Ok((terms, grads.iter().map(|g| mask.apply(&g.map(sign))).collect()))
}

/// Moves each pose by `step[i] * direction[i]` and projects onto the budget.
fn advance(
    original: &[Pose6D],
    current: &[Pose6D],
    directions: &[[f64; POSE_DIM]],
    step: impl Fn(usize) -> f64,
    budget: &PerturbationBudget,
) -> Result<Vec<Pose6D>, AttackError> {
    original
        .iter()
        .zip(current)
        .zip(directions)
        .map(|((o, c), d)| {
            let delta: [f64; POSE_DIM] = std::array::from_fn(|i| step(i) * d[i]);
            Ok(project_to_budget(o, &c.perturbed(&delta)?, budget))
        })
        .collect()
}

/// Uniform draw inside the budget for every unmasked parameter.
fn random_start(
    rng: &mut ChaCha8Rng,
    original: &[Pose6D],
    mask: &ParamMask,
    budget: &PerturbationBudget,
) -> Result<Vec<Pose6D>, AttackError> {
    original
        .iter()
        .map(|o| {
            let draw: [f64; POSE_DIM] = std::array::from_fn(|i| {
                let e = budget.eps(i);
                rng.random_range(-e..=e)
            });
            Ok(project_to_budget(o, &o.perturbed(&mask.apply(&draw))?, budget))
        })
        .collect()
}

fn finish(
    scene: &Scene,
    cfg: &AttackConfig,
    ctx: &AttackContext,
    adv: Vec<Pose6D>,
    trace: Vec<TraceEntry>,
) -> Result<AttackResult, AttackError> {
    let final_terms = ctx.evaluate(&adv, &cfg.effective_weights())?;
    let per_cav = scene
        .cav_poses
        .iter()
        .zip(adv)
        .map(|(o, a)| {
            let delta = a.delta_from(o);
            CavPerturbation { original_pose: *o, adv_pose: a, delta, within_budget: cfg.budget.contains(&delta) }
        })
        .collect();
    Ok(AttackResult {
        scene_id: scene.index,
        method: cfg.method,
        mask: cfg.effective_mask(),
        budget: cfg.budget,
        per_cav,
        trace,
        final_terms,
    })
}

/// Random bias attack: one uniform draw per unmasked parameter.
pub fn rba(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let ctx = AttackContext::new(scene, &cfg.variant)?;
    let adv = random_start(&mut cfg.rng(scene), &scene.cav_poses, &cfg.effective_mask(), &cfg.budget)?;
    finish(scene, cfg, &ctx, adv, Vec::new())
}

/// Single full-budget signed step on the task loss.
pub fn fgsm(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let ctx = AttackContext::new(scene, &cfg.variant)?;
    let w = cfg.effective_weights();
    let original = &scene.cav_poses;
    let (terms, dirs) = signed_gradient(&ctx, original, &cfg.effective_mask(), &w)?;
    let adv = advance(original, original, &dirs, |i| cfg.budget.eps(i), &cfg.budget)?;
    finish(scene, cfg, &ctx, adv, vec![TraceEntry::new(0, terms)])
}

fn iterate(scene: &Scene, cfg: &AttackConfig, random_init: bool) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let ctx = AttackContext::new(scene, &cfg.variant)?;
    let w = cfg.effective_weights();
    let mask = cfg.effective_mask();
    let original = &scene.cav_poses;
    let mut adv = if random_init {
        random_start(&mut cfg.rng(scene), original, &mask, &cfg.budget)?
    } else {
        original.clone()
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let (terms, dirs) = signed_gradient(&ctx, &adv, &mask, &w)?;
        trace.push(TraceEntry::new(iter, terms));
        adv = advance(original, &adv, &dirs, |i| cfg.step(i), &cfg.budget)?;
    }
    finish(scene, cfg, &ctx, adv, trace)
}

/// Iterative signed steps on the task loss from the original poses.
pub fn ifgsm(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    iterate(scene, cfg, false)
}

/// [`ifgsm`] from a seeded uniform start inside the budget.
pub fn pgd(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    iterate(scene, cfg, true)
}

/// [`pgd`] restricted to the position parameters.
pub fn paa(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    iterate(scene, cfg, true)
}

/// Iterative signed ascent on the full weighted objective. Starts from a
/// seeded uniform draw inside the budget, as [`pgd`] does: the appearance and
/// distribution terms are stationary at the original poses.
pub fn advgps(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    iterate(scene, cfg, true)
}

pub fn run_attack(scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    match cfg.method {
        AttackMethod::Rba => rba(scene, cfg),
        AttackMethod::Fgsm => fgsm(scene, cfg),
        AttackMethod::Ifgsm => ifgsm(scene, cfg),
        AttackMethod::Pgd => pgd(scene, cfg),
        AttackMethod::Paa => paa(scene, cfg),
        AttackMethod::Advgps => advgps(scene, cfg),
    }
}
