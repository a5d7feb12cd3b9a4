//! Rigid-body pose algebra for GPS poses.
//!
//! A [`Pose6D`] is `[x, y, z, roll, pitch, yaw]` with positions in meters and
//! angles in degrees. Rotations use the intrinsic Z-Y-X convention,
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, and radians only appear inside the
//! trigonometric evaluation.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of pose parameters.
pub const POSE_DIM: usize = 6;

/// Parameter order used by every 6-vector in the crate.
pub const PARAM_NAMES: [&str; POSE_DIM] = ["x", "y", "z", "roll", "pitch", "yaw"];

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pose component `{name}` is not finite ({value})")]
    NonFinitePose { name: &'static str, value: f64 },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("matrix is not a rigid homogeneous transform: {0}")]
    NotRigid(String),
}

/// Wrap an angle in degrees into `(-180, 180]`.
pub fn wrap_degrees(angle: f64) -> f64 {
    // values already in range pass through untouched, so wrapping is idempotent
    if angle > -180.0 && angle <= 180.0 {
        return angle;
    }
    let r = angle.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// A six-parameter GPS pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Pose6D {
    values: [f64; POSE_DIM],
}

impl Pose6D {
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Result<Self, GeometryError> {
        Self::from_array([x, y, z, roll, pitch, yaw])
    }

    /// Builds a pose from `[x, y, z, roll, pitch, yaw]`, wrapping the angles.
    pub fn from_array(values: [f64; POSE_DIM]) -> Result<Self, GeometryError> {
        for (value, name) in values.iter().zip(PARAM_NAMES) {
            if !value.is_finite() {
                return Err(GeometryError::NonFinitePose { name, value: *value });
            }
        }
        let mut values = values;
        for angle in &mut values[3..] {
            *angle = wrap_degrees(*angle);
        }
        Ok(Self { values })
    }

    pub fn identity() -> Self {
        Self { values: [0.0; POSE_DIM] }
    }

    pub fn x(&self) -> f64 {
        self.values[0]
    }
    pub fn y(&self) -> f64 {
        self.values[1]
    }
    pub fn z(&self) -> f64 {
        self.values[2]
    }
    pub fn roll(&self) -> f64 {
        self.values[3]
    }
    pub fn pitch(&self) -> f64 {
        self.values[4]
    }
    pub fn yaw(&self) -> f64 {
        self.values[5]
    }

    pub fn as_array(&self) -> [f64; POSE_DIM] {
        self.values
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.values[0], self.values[1], self.values[2])
    }

    /// Adds an additive perturbation `delta` (same layout as the pose).
    pub fn perturbed(&self, delta: &[f64; POSE_DIM]) -> Result<Self, GeometryError> {
        let mut v = self.values;
        for (a, d) in v.iter_mut().zip(delta) {
            *a += d;
        }
        Self::from_array(v)
    }

    /// Per-parameter difference `self - other`, with angle differences wrapped
    /// into `(-180, 180]`.
    pub fn delta_from(&self, other: &Pose6D) -> [f64; POSE_DIM] {
        let mut d = [0.0; POSE_DIM];
        for i in 0..POSE_DIM {
            d[i] = self.values[i] - other.values[i];
            if i >= 3 {
                d[i] = wrap_degrees(d[i]);
            }
        }
        d
    }

    /// Rotation block `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.axis_rotations();
        rz * ry * rx
    }

    fn axis_rotations(&self) -> [Matrix3<f64>; 3] {
        let (sr, cr) = (self.roll() * DEG).sin_cos();
        let (sp, cp) = (self.pitch() * DEG).sin_cos();
        let (sy, cy) = (self.yaw() * DEG).sin_cos();
        [
            Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr),
            Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp),
            Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0),
        ]
    }

    /// Partial derivatives of the rotation block w.r.t. roll, pitch and yaw,
    /// per degree.
    fn rotation_partials(&self) -> [Matrix3<f64>; 3] {
        let [rx, ry, rz] = self.axis_rotations();
        let (sr, cr) = (self.roll() * DEG).sin_cos();
        let (sp, cp) = (self.pitch() * DEG).sin_cos();
        let (sy, cy) = (self.yaw() * DEG).sin_cos();
        let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
        let dry = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
        let drz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
        [rz * ry * drx * DEG, rz * dry * rx * DEG, drz * ry * rx * DEG]
    }
}

impl TryFrom<[f64; 6]> for Pose6D {
    type Error = GeometryError;

    fn try_from(values: [f64; 6]) -> Result<Self, Self::Error> {
        Self::from_array(values)
    }
}

impl From<Pose6D> for [f64; 6] {
    fn from(pose: Pose6D) -> Self {
        pose.values
    }
}

/// A 4x4 homogeneous transformation `[[r, t], [0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomTransform {
    matrix: Matrix4<f64>,
}

impl HomTransform {
    pub fn identity() -> Self {
        Self { matrix: Matrix4::identity() }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { matrix }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::from(t))
    }

    /// Validates the rigid-transform invariants (tolerance 1e-9).
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self, GeometryError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NotRigid("non-finite entry".into()));
        }
        let bottom = matrix.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(GeometryError::NotRigid("bottom row is not [0, 0, 0, 1]".into()));
        }
        let t = Self { matrix };
        let err = t.orthonormality_error();
        if err > 1e-9 {
            return Err(GeometryError::NotRigid(format!("rotation block off by {err:e}")));
        }
        Ok(t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Largest of `max |r^T r - I|` and `|det r - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }

    pub fn compose(&self, rhs: &HomTransform) -> HomTransform {
        let r = self.rotation() * rhs.rotation();
        let t = self.rotation() * rhs.translation() + self.translation();
        Self::from_parts(r, t)
    }

    /// Closed-form inverse `[[r^T, -r^T t], [0, 1]]`.
    pub fn invert(&self) -> HomTransform {
        let rt = self.rotation().transpose();
        Self::from_parts(rt, -(rt * self.translation()))
    }

    pub fn apply(&self, point: &[f64; 3]) -> [f64; 3] {
        let p = self.rotation() * Vector3::from(*point) + self.translation();
        [p.x, p.y, p.z]
    }

    pub fn apply_homogeneous(&self, point: &Vector4<f64>) -> Vector4<f64> {
        self.matrix * point
    }
}

/// Points owned by one agent, stored as homogeneous 4-vectors with w = 1.
///
/// Only the Cartesian part is held in memory; the homogeneous component is
/// implicit and always exactly 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn homogeneous(&self, index: usize) -> Vector4<f64> {
        let p = self.points[index];
        Vector4::new(p[0], p[1], p[2], 1.0)
    }

    /// Flat `[x0, y0, z0, x1, ...]` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, GeometryError> {
        if flat.len() % 3 != 0 {
            return Err(GeometryError::NonFinitePoint { index: flat.len() / 3 });
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Homogeneous transform from the agent frame to the world frame.
pub fn pose_to_matrix(pose: &Pose6D) -> HomTransform {
    HomTransform::from_parts(pose.rotation(), pose.translation())
}

/// `T_cav->ego = M(g_ego)^-1 * M(g_cav)`.
pub fn htm_extract(g_ego: &Pose6D, g_cav: &Pose6D) -> HomTransform {
    pose_to_matrix(g_ego).invert().compose(&pose_to_matrix(g_cav))
}

pub fn transform_cloud(t: &HomTransform, cloud: &PointCloud) -> PointCloud {
    if *t == HomTransform::identity() {
        return cloud.clone();
    }
    PointCloud { points: cloud.points.iter().map(|p| t.apply(p)).collect() }
}

pub fn invert(t: &HomTransform) -> HomTransform {
    t.invert()
}

/// Per-point 3x6 derivatives of the projected coordinates with respect to
/// `[x, y, z, roll, pitch, yaw]` of the CAV pose (angles per degree).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseJacobian {
    blocks: Vec<SMatrix<f64, 3, 6>>,
}

impl PoseJacobian {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, point: usize) -> &SMatrix<f64, 3, 6> {
        &self.blocks[point]
    }

    pub fn blocks(&self) -> &[SMatrix<f64, 3, 6>] {
        &self.blocks
    }

    /// Accumulates `sum_i J_i^T grad_i`, a vector-Jacobian product.
    pub fn vjp(&self, point_grads: &[[f64; 3]]) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for (block, g) in self.blocks.iter().zip(point_grads) {
            for j in 0..POSE_DIM {
                out[j] += block[(0, j)] * g[0] + block[(1, j)] * g[1] + block[(2, j)] * g[2];
            }
        }
        out
    }
}

/// Computes the pose-Jacobian of `htm_extract(g_ego, g_cav) * p` for every point.
pub fn transform_jacobian(g_ego: &Pose6D, g_cav: &Pose6D, cloud: &PointCloud) -> PoseJacobian {
    let ego_rt = g_ego.rotation().transpose();
    let partials = g_cav.rotation_partials().map(|d| ego_rt * d);
    let blocks = cloud
        .points
        .iter()
        .map(|p| {
            let p = Vector3::from(*p);
            let mut block = SMatrix::<f64, 3, 6>::zeros();
            block.fixed_view_mut::<3, 3>(0, 0).copy_from(&ego_rt);
            for (k, d) in partials.iter().enumerate() {
                block.fixed_view_mut::<3, 1>(0, 3 + k).copy_from(&(d * p));
            }
            block
        })
        .collect();
    PoseJacobian { blocks }
}
