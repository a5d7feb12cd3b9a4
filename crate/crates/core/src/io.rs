//! On-disk artifacts: schema-versioned JSON, fixed-precision CSV, atomic
//! writes and content digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::ConditionRow;
use crate::geometry::{GeometryError, PointCloud, Pose6D};
use crate::scene::{Box3D, Scene};

pub const SCHEMA_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u64 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unsupported schema_version {found:?} (expected major {SUPPORTED_MAJOR})")]
    Schema { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Geometry { path: PathBuf, source: GeometryError },
}

impl IoError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Accepts `major.minor` strings whose major version this build understands.
pub fn check_schema(path: &Path, version: &str) -> Result<(), IoError> {
    let major = version.split('.').next().and_then(|m| m.parse::<u64>().ok());
    if major == Some(SUPPORTED_MAJOR) {
        Ok(())
    } else {
        Err(IoError::Schema { path: path.to_path_buf(), found: version.to_string() })
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("in-memory serialization cannot fail");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_atomic(path, &to_json_bytes(value))
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema_version: Option<String>,
}

/// Reads a JSON artifact, rejecting missing or unsupported schema versions.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let json = |source| IoError::Json { path: path.to_path_buf(), source };
    let probe: SchemaProbe = serde_json::from_str(&text).map_err(json)?;
    check_schema(path, probe.schema_version.as_deref().unwrap_or("missing"))?;
    serde_json::from_str(&text).map_err(json)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Scene as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: String,
    pub index: usize,
    pub seed: u64,
    pub ego_pose: Pose6D,
    pub cav_poses: Vec<Pose6D>,
    pub gt_boxes: Vec<Box3D>,
    pub cav_boxes: Vec<usize>,
    /// Ego cloud first, then one per CAV, each flattened `x0 y0 z0 x1 ...` in its agent's own frame.
    pub clouds: Vec<Vec<f64>>,
}

impl SceneFile {
    pub fn from_scene(s: &Scene) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            index: s.index,
            seed: s.seed,
            ego_pose: s.ego_pose,
            cav_poses: s.cav_poses.clone(),
            gt_boxes: s.gt_boxes.clone(),
            cav_boxes: s.cav_boxes.clone(),
            clouds: s.clouds.iter().map(PointCloud::to_flat).collect(),
        }
    }

    pub fn into_scene(self, path: &Path) -> Result<Scene, IoError> {
        let clouds = self
            .clouds
            .iter()
            .map(|c| PointCloud::from_flat(c))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| IoError::Geometry { path: path.to_path_buf(), source })?;
        let consistent = clouds.len() == self.cav_poses.len() + 1
            && self.cav_boxes.len() == self.cav_poses.len()
            && self.cav_boxes.iter().all(|&b| b < self.gt_boxes.len());
        if !consistent {
            return Err(IoError::Json {
                path: path.to_path_buf(),
                source: serde::de::Error::custom("cloud, CAV pose and CAV box counts disagree"),
            });
        }
        Ok(Scene {
            index: self.index,
            seed: self.seed,
            ego_pose: self.ego_pose,
            cav_poses: self.cav_poses,
            gt_boxes: self.gt_boxes,
            cav_boxes: self.cav_boxes,
            clouds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    pub count: usize,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
    /// Digest over the per-file digests in order.
    pub digest: String,
}

impl Manifest {
    pub fn new(seed: u64, files: Vec<ManifestEntry>) -> Self {
        let mut hasher = Sha256::new();
        for f in &files {
            hasher.update(f.file.as_bytes());
            hasher.update(b"\0");
            hasher.update(f.sha256.as_bytes());
            hasher.update(b"\n");
        }
        Self {
            schema_version: SCHEMA_VERSION.into(),
            count: files.len(),
            seed,
            files,
            digest: hex::encode(hasher.finalize()),
        }
    }
}

pub const CSV_HEADER: &str = "condition,method,mask,variant,ap,tp,fp,fn";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Condition table as CSV with six-decimal floats.
pub fn rows_to_csv(rows: &[ConditionRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{}\n",
            csv_field(&r.condition),
            csv_field(&r.method),
            csv_field(&r.mask),
            csv_field(&r.variant),
            r.ap,
            r.tp,
            r.fp,
            r.fn_
        ));
    }
    out
}
