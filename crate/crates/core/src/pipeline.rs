//! File-based generate → attack → eval pipeline driven by a [`RunConfig`].
//!
//! Layout under `out_dir`:
//! `scenes/scene_NNNN.json`, `scenes/manifest.json`,
//! `attacks/<condition>/scene_NNNN.json`, `eval/<report>.{csv,json}` and
//! `eval/overlays/<condition>/scene_NNNN.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackError, AttackMethod, AttackResult, ParamMask, DEFAULT_ITERATIONS};
use crate::eval::{evaluate_condition, ConditionLabel, ConditionRow, EvalError, EvalReport, SceneOverlay};
use crate::geometry::{Pose6D, PARAM_NAMES, POSE_DIM};
use crate::io::{self, IoError, Manifest, ManifestEntry, SceneFile, SCHEMA_VERSION};
use crate::losses::{ObjectiveWeights, PerturbationBudget};
use crate::perception::PerceptionVariant;
use crate::scene::{generate_scene, Scene, SceneConfig, SceneError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: `{field}` {reason}")]
    Config { field: String, reason: String },
    #[error("missing input {path}: {reason}")]
    MissingInput { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Process exit status: 2 for configuration errors, 3 for missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. }
            | PipelineError::Scene(SceneError::InvalidConfig { .. })
            | PipelineError::Attack(AttackError::InvalidConfig { .. }) => 2,
            PipelineError::MissingInput { .. } => 3,
            _ => 1,
        }
    }

    fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PipelineError::Config { field: field.into(), reason: reason.into() }
    }
}

/// One entry of the attack list. Budget, iterations and crafting variant
/// come from the enclosing [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: AttackMethod,
    #[serde(default = "ParamMask::all")]
    pub mask: ParamMask,
    /// Overrides the run-level weights.
    #[serde(default)]
    pub weights: Option<ObjectiveWeights>,
    #[serde(default)]
    pub name: Option<String>,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, mask: ParamMask) -> Self {
        Self { method, mask, weights: None, name: None }
    }
}

fn default_attacks() -> Vec<AttackSpec> {
    AttackMethod::ALL.iter().map(|&m| AttackSpec::new(m, ParamMask::all())).collect()
}

fn default_variants() -> BTreeMap<String, PerceptionVariant> {
    [PerceptionVariant::a(), PerceptionVariant::b()].into_iter().map(|v| (v.name.clone(), v)).collect()
}

fn default_craft() -> String {
    "B".into()
}

fn default_eval() -> String {
    "A".into()
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    /// Master seed for scenes and attacks. Required.
    pub seed: u64,
    /// Scene generation settings; its own `seed` is replaced by the master seed.
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_variants")]
    pub variants: BTreeMap<String, PerceptionVariant>,
    #[serde(default = "default_craft")]
    pub craft_variant: String,
    #[serde(default = "default_eval")]
    pub eval_variant: String,
    #[serde(default)]
    pub budget: PerturbationBudget,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            seed,
            scene: SceneConfig::default(),
            attacks: default_attacks(),
            variants: default_variants(),
            craft_variant: default_craft(),
            eval_variant: default_eval(),
            budget: PerturbationBudget::default(),
            weights: ObjectiveWeights::default(),
            iterations: DEFAULT_ITERATIONS,
            out_dir: default_out(),
        }
    }

    /// Reads and validates a config file. Unreadable or malformed files are
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let cfg: RunConfig = io::read_json(path).map_err(|e| match e {
            IoError::Json { source, .. } => PipelineError::config(json_field(&source), source.to_string()),
            IoError::Schema { found, .. } => PipelineError::config("schema_version", format!("unsupported version {found:?}")),
            other => PipelineError::config("config", other.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        io::check_schema(Path::new("config"), &self.schema_version)
            .map_err(|_| PipelineError::config("schema_version", format!("unsupported version {:?}", self.schema_version)))?;
        self.scene_config().validate()?;
        for (key, v) in &self.variants {
            if &v.name != key {
                return Err(PipelineError::config(format!("variants.{key}.name"), format!("must equal its key, got {:?}", v.name)));
            }
            v.validate().map_err(|e| PipelineError::config(format!("variants.{key}"), e.to_string()))?;
        }
        self.variant(&self.craft_variant, "craft_variant")?;
        self.variant(&self.eval_variant, "eval_variant")?;
        if self.iterations == 0 {
            return Err(PipelineError::config("iterations", "must be at least 1"));
        }
        if !self.budget.is_valid() {
            return Err(PipelineError::config("budget", "all bounds must be positive and finite"));
        }
        if !self.weights.is_valid() {
            return Err(PipelineError::config("weights", "must be non-negative and finite"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if a.weights.is_some_and(|w| !w.is_valid()) {
                return Err(PipelineError::config(format!("attacks[{i}].weights"), "must be non-negative and finite"));
            }
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { seed: self.seed, ..self.scene.clone() }
    }

    pub fn variant(&self, name: &str, field: &str) -> Result<PerceptionVariant, PipelineError> {
        self.variants
            .get(name)
            .cloned()
            .ok_or_else(|| PipelineError::config(field, format!("references undefined variant {name:?}")))
    }

    /// Full attack configuration for one list entry, crafted on `craft_variant`.
    pub fn attack_config(&self, spec: &AttackSpec) -> Result<AttackConfig, PipelineError> {
        let cfg = AttackConfig {
            method: spec.method,
            iterations: self.iterations,
            steps: None,
            budget: self.budget,
            weights: spec.weights.unwrap_or(self.weights),
            mask: spec.mask,
            variant: self.variant(&self.craft_variant, "craft_variant")?,
            seed: self.seed,
            name: spec.name.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Best-effort extraction of the offending field name from a serde message.
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

fn scenes_dir(out: &Path) -> PathBuf {
    out.join("scenes")
}

fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.json")
}

/// Generates every scene, writes one file per scene and a manifest.
/// Rerunning with the same config rewrites identical bytes.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let scene_cfg = cfg.scene_config();
    let dir = scenes_dir(&cfg.out_dir);
    let entries: Vec<ManifestEntry> = (0..scene_cfg.n_scenes)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry, PipelineError> {
            let scene = generate_scene(&scene_cfg, i)?;
            let bytes = io::to_json_bytes(&SceneFile::from_scene(&scene));
            let file = scene_file_name(i);
            io::write_atomic(&dir.join(&file), &bytes)?;
            Ok(ManifestEntry { file, sha256: io::sha256_hex(&bytes) })
        })
        .collect::<Result<_, _>>()?;
    let manifest = Manifest::new(cfg.seed, entries);
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn missing(path: &Path, e: &IoError) -> PipelineError {
    PipelineError::MissingInput { path: path.to_path_buf(), reason: e.to_string() }
}

/// Loads the scenes listed in the manifest, checking each file's digest.
pub fn load_scenes(out: &Path) -> Result<Vec<Scene>, PipelineError> {
    let dir = scenes_dir(out);
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = io::read_json(&manifest_path).map_err(|e| match e {
        e if e.is_not_found() => missing(&manifest_path, &e),
        e => e.into(),
    })?;
    manifest
        .files
        .par_iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|source| missing(&path, &IoError::Io { path: path.clone(), source }))?;
            if io::sha256_hex(&bytes) != entry.sha256 {
                return Err(PipelineError::MissingInput { path, reason: "content digest does not match the manifest".into() });
            }
            let file: SceneFile = io::read_json(&path)?;
            Ok(file.into_scene(&path)?)
        })
        .collect()
}

/// Saved attack output for one scene; the crafting variant is recorded so the
/// poses can be replayed against any evaluation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFile {
    pub schema_version: String,
    pub condition: String,
    pub crafted_on: String,
    pub config: AttackConfig,
    pub result: AttackResult,
}

fn attacks_dir(out: &Path) -> PathBuf {
    out.join("attacks")
}

/// Restricts the attack list from the command line: `method` selects a
/// single method, `mask` replaces every entry's mask.
pub fn select_attacks(cfg: &RunConfig, method: Option<AttackMethod>, mask: Option<ParamMask>) -> Vec<AttackSpec> {
    let mut specs = match method {
        Some(m) => {
            let listed: Vec<AttackSpec> = cfg.attacks.iter().filter(|a| a.method == m).cloned().collect();
            if listed.is_empty() {
                vec![AttackSpec::new(m, ParamMask::all())]
            } else {
                listed
            }
        }
        None => cfg.attacks.clone(),
    };
    if let Some(mask) = mask {
        for s in &mut specs {
            s.mask = mask;
        }
    }
    specs
}

/// Runs each attack on every scene and saves one file per (scene, condition).
/// Returns the condition names written.
pub fn cmd_attack(cfg: &RunConfig, specs: &[AttackSpec]) -> Result<Vec<String>, PipelineError> {
    let scenes = load_scenes(&cfg.out_dir)?;
    let mut written = Vec::new();
    for spec in specs {
        let attack_cfg = cfg.attack_config(spec)?;
        let condition = attack_cfg.condition_name();
        let dir = attacks_dir(&cfg.out_dir).join(&condition);
        scenes.par_iter().try_for_each(|scene| -> Result<(), PipelineError> {
            let result = run_attack(scene, &attack_cfg)?;
            let file = AttackFile {
                schema_version: SCHEMA_VERSION.into(),
                condition: condition.clone(),
                crafted_on: attack_cfg.variant.name.clone(),
                config: attack_cfg.clone(),
                result,
            };
            io::write_json(&dir.join(scene_file_name(scene.index)), &file)?;
            Ok(())
        })?;
        written.push(condition);
    }
    Ok(written)
}

/// Which table `cmd_eval` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// No-attack, no-fusion and every saved attack.
    Standard,
    /// AdvGPS restricted to one pose parameter at a time; `None` sweeps all six.
    Sweep(Option<usize>),
    /// AdvGPS with each loss alone and all together.
    Ablate,
}

impl EvalMode {
    fn report_name(self) -> &'static str {
        match self {
            EvalMode::Standard => "report",
            EvalMode::Sweep(_) => "sweep",
            EvalMode::Ablate => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema_version: String,
    pub eval_variant: String,
    pub rows: Vec<ConditionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayFile {
    pub schema_version: String,
    #[serde(flatten)]
    pub overlay: SceneOverlay,
}

fn saved_conditions(out: &Path) -> Result<Vec<String>, PipelineError> {
    let dir = attacks_dir(out);
    let read = match fs::read_dir(&dir) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(IoError::Io { path: dir, source }.into()),
    };
    let mut names = Vec::new();
    for entry in read {
        let entry = entry.map_err(|source| IoError::Io { path: dir.clone(), source })?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn load_attack_poses(out: &Path, condition: &str, scenes: &[Scene]) -> Result<(AttackFile, Vec<Vec<Pose6D>>), PipelineError> {
    let dir = attacks_dir(out).join(condition);
    let files: Vec<AttackFile> = scenes
        .par_iter()
        .map(|s| {
            let path = dir.join(scene_file_name(s.index));
            io::read_json::<AttackFile>(&path).map_err(|e| if e.is_not_found() { missing(&path, &e) } else { e.into() })
        })
        .collect::<Result<_, _>>()?;
    let poses = files.iter().map(|f| f.result.adv_poses()).collect();
    let first = files.into_iter().next().ok_or_else(|| PipelineError::MissingInput {
        path: dir.clone(),
        reason: "no scenes to evaluate".into(),
    })?;
    Ok((first, poses))
}

fn advgps_condition(
    cfg: &RunConfig,
    scenes: &[Scene],
    spec: AttackSpec,
    eval_variant: &PerceptionVariant,
) -> Result<EvalReport, PipelineError> {
    let attack_cfg = cfg.attack_config(&spec)?;
    let adv: Vec<Vec<Pose6D>> = scenes
        .par_iter()
        .map(|s| run_attack(s, &attack_cfg).map(|r| r.adv_poses()))
        .collect::<Result<_, _>>()?;
    let label = ConditionLabel::new(attack_cfg.condition_name(), spec.method.as_str(), attack_cfg.effective_mask().label());
    Ok(evaluate_condition(scenes, Some(&adv), eval_variant, &label)?)
}

/// Builds the requested table in memory.
pub fn build_report(cfg: &RunConfig, scenes: &[Scene], mode: EvalMode, eval_variant: &PerceptionVariant) -> Result<EvalReport, PipelineError> {
    let original: Vec<Vec<Pose6D>> = scenes.iter().map(|s| s.cav_poses.clone()).collect();
    let no_attack = || evaluate_condition(scenes, Some(&original), eval_variant, &ConditionLabel::new("no_attack", "none", "none"));
    let advgps = |mask: ParamMask, weights: Option<ObjectiveWeights>, name: &str| {
        let spec = AttackSpec { method: AttackMethod::Advgps, mask, weights, name: Some(name.to_string()) };
        advgps_condition(cfg, scenes, spec, eval_variant)
    };
    let mut report = EvalReport::default();
    match mode {
        EvalMode::Standard => {
            report.extend(no_attack()?);
            report.extend(evaluate_condition(scenes, None, eval_variant, &ConditionLabel::new("no_fusion", "none", "none"))?);
            for condition in saved_conditions(&cfg.out_dir)? {
                let (first, poses) = load_attack_poses(&cfg.out_dir, &condition, scenes)?;
                let label = ConditionLabel::new(
                    condition,
                    first.result.method.as_str(),
                    first.config.effective_mask().label(),
                );
                report.extend(evaluate_condition(scenes, Some(&poses), eval_variant, &label)?);
            }
        }
        EvalMode::Sweep(param) => {
            let params: Vec<usize> = match param {
                Some(p) => vec![p],
                None => (0..POSE_DIM).collect(),
            };
            for p in params {
                report.extend(advgps(ParamMask::single(p), None, &format!("sweep_{}", PARAM_NAMES[p]))?);
            }
        }
        EvalMode::Ablate => {
            report.extend(no_attack()?);
            let w = |lambda, omega, xi| Some(ObjectiveWeights { lambda, omega, xi });
            report.extend(advgps(ParamMask::all(), w(1.0, 0.0, 0.0), "app_only")?);
            report.extend(advgps(ParamMask::all(), w(0.0, 1.0, 0.0), "dist_only")?);
            report.extend(advgps(ParamMask::all(), w(0.0, 0.0, 1.0), "task_only")?);
            report.extend(advgps(ParamMask::all(), w(1.0, 1.0, 1.0), "all")?);
        }
    }
    Ok(report)
}

/// Evaluates and writes `eval/<report>.csv`, `eval/<report>.json` and the
/// per-scene overlays. `variant` overrides the configured evaluation variant.
pub fn cmd_eval(cfg: &RunConfig, mode: EvalMode, variant: Option<&str>) -> Result<EvalReport, PipelineError> {
    let eval_variant = match variant {
        Some(name) => cfg.variant(name, "variant")?,
        None => cfg.variant(&cfg.eval_variant, "eval_variant")?,
    };
    let scenes = load_scenes(&cfg.out_dir)?;
    let report = build_report(cfg, &scenes, mode, &eval_variant)?;

    let dir = cfg.out_dir.join("eval");
    let name = mode.report_name();
    io::write_atomic(&dir.join(format!("{name}.csv")), io::rows_to_csv(&report.rows).as_bytes())?;
    let file = ReportFile { schema_version: SCHEMA_VERSION.into(), eval_variant: eval_variant.name.clone(), rows: report.rows.clone() };
    io::write_json(&dir.join(format!("{name}.json")), &file)?;
    report.overlays.par_iter().try_for_each(|o| {
        let path = dir.join("overlays").join(&o.condition).join(scene_file_name(o.scene_id));
        io::write_json(&path, &OverlayFile { schema_version: SCHEMA_VERSION.into(), overlay: o.clone() })
    })?;
    Ok(report)
}
