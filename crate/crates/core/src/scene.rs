//! Deterministic synthetic cooperative-driving scenes.
//!
//! A scene holds one ego vehicle, one to five CAVs and a set of other
//! vehicles, all on flat ground at world `z = 0`. Agent poses describe the
//! roof LiDAR, so agent frames sit `sensor_height` above the ground. Every
//! agent observes the faces of the other vehicle boxes that face its sensor;
//! there is no inter-box occlusion.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::iou::polygon_intersection_area;
use crate::geometry::{pose_to_matrix, wrap_degrees, GeometryError, PointCloud, Pose6D};

/// Half-extent of the evaluation range along x, meters.
pub const RANGE_X: f64 = 140.0;
/// Half-extent of the evaluation range along y, meters.
pub const RANGE_Y: f64 = 40.0;
/// Maximum number of CAVs in a scene.
pub const MAX_CAVS: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("could not place {what} after {attempts} attempts; the configuration is overcrowded")]
    Overcrowded { what: String, attempts: usize },
    #[error("invalid scene config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("agent {0:?} does not exist in this scene")]
    UnknownAgent(AgentId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A vehicle bounding box. Yaw is in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        Self { center, dims, yaw: wrap_degrees(yaw) }
    }

    pub fn is_valid(&self) -> bool {
        self.center.iter().chain(&self.dims).all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.dims.iter().all(|&d| d > 0.0)
    }

    /// Counter-clockwise BEV footprint corners.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        self.footprint_inflated(0.0)
    }

    pub fn footprint_inflated(&self, margin: f64) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.to_radians().sin_cos();
        let hl = 0.5 * self.dims[0] + margin;
        let hw = 0.5 * self.dims[1] + margin;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    fn rotation(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    /// Box faces in the frame the box is expressed in.
    pub fn faces(&self) -> Vec<Face> {
        let r = self.rotation();
        let center = Vector3::from(self.center);
        let [l, w, h] = self.dims.map(|d| 0.5 * d);
        let ex = r.column(0).into_owned();
        let ey = r.column(1).into_owned();
        let ez = Vector3::z();
        let mut faces = Vec::with_capacity(6);
        for sign in [1.0, -1.0] {
            faces.push(Face { center: center + ex * (sign * l), normal: ex * sign, u: ey * w, v: ez * h });
            faces.push(Face { center: center + ey * (sign * w), normal: ey * sign, u: ex * l, v: ez * h });
            faces.push(Face { center: center + ez * (sign * h), normal: ez * sign, u: ex * l, v: ey * w });
        }
        faces
    }
}

/// A rectangular box face: `center + a*u + b*v` for `a, b` in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Face {
    pub fn area(&self) -> f64 {
        4.0 * self.u.norm() * self.v.norm()
    }

    /// Euclidean distance from `p` to the face rectangle.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        let a = (d.dot(&self.u) / self.u.norm_squared()).clamp(-1.0, 1.0);
        let b = (d.dot(&self.v) / self.v.norm_squared()).clamp(-1.0, 1.0);
        (p - (self.center + self.u * a + self.v * b)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentId {
    Ego,
    Cav(usize),
}

impl AgentId {
    fn stream(self) -> u64 {
        match self {
            AgentId::Ego => 1,
            AgentId::Cav(k) => 2 + k as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_scenes: usize,
    /// Inclusive range of non-agent vehicles per scene.
    pub n_vehicles: [usize; 2],
    /// Inclusive range of CAVs per scene.
    pub n_cavs: [usize; 2],
    /// Template `[length, width, height]`, meters.
    pub vehicle_dims: [f64; 3],
    /// Relative uniform jitter applied to each template dimension.
    pub dims_jitter: f64,
    /// Per-coordinate Gaussian noise of LiDAR points, meters.
    pub noise_sigma: f64,
    /// Surface sampling density at the 10 m reference range, points per m^2.
    pub points_per_m2: f64,
    /// LiDAR mount height above ground, meters.
    pub sensor_height: f64,
    /// Ego-frame placement window for non-agent vehicles, `[min, max]` meters.
    pub vehicle_x: [f64; 2],
    pub vehicle_y: [f64; 2],
    /// Ego-frame placement window for CAVs.
    pub cav_x: [f64; 2],
    pub cav_y: [f64; 2],
    /// Maximum ego displacement from the world origin, meters.
    pub ego_jitter_xy: f64,
    /// Maximum ego yaw, degrees.
    pub ego_jitter_yaw: f64,
    /// Maximum yaw deviation of vehicles from the road axis, degrees.
    pub heading_jitter: f64,
    /// Minimum clearance between footprints, meters.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            n_vehicles: [8, 14],
            n_cavs: [1, 4],
            vehicle_dims: [4.5, 2.0, 1.5],
            dims_jitter: 0.1,
            noise_sigma: 0.02,
            points_per_m2: 10.0,
            sensor_height: 1.8,
            vehicle_x: [-100.0, 100.0],
            vehicle_y: [-30.0, 30.0],
            cav_x: [-60.0, 60.0],
            cav_y: [-20.0, 20.0],
            ego_jitter_xy: 2.0,
            ego_jitter_yaw: 10.0,
            heading_jitter: 10.0,
            clearance: 1.0,
            seed: 2024,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |field, reason: &str| Err(SceneError::InvalidConfig { field, reason: reason.into() });
        if self.n_vehicles[0] > self.n_vehicles[1] {
            return bad("n_vehicles", "is an empty range");
        }
        if self.n_cavs[0] > self.n_cavs[1] {
            return bad("n_cavs", "is an empty range");
        }
        if self.n_cavs[0] < 1 || self.n_cavs[1] > MAX_CAVS {
            return bad("n_cavs", "must lie within [1, 5]");
        }
        if !(self.vehicle_dims.iter().all(|d| d.is_finite() && *d > 0.0)) {
            return bad("vehicle_dims", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dims_jitter) {
            return bad("dims_jitter", "must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be non-negative");
        }
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return bad("points_per_m2", "must be positive");
        }
        for (field, w, limit) in [
            ("vehicle_x", self.vehicle_x, RANGE_X),
            ("vehicle_y", self.vehicle_y, RANGE_Y),
            ("cav_x", self.cav_x, RANGE_X),
            ("cav_y", self.cav_y, RANGE_Y),
        ] {
            if !(w[0] < w[1] && w[0] >= -limit && w[1] <= limit) {
                return bad(field, "must be a non-empty window inside the evaluation range");
            }
        }
        if !(self.ego_jitter_xy >= 0.0 && self.ego_jitter_yaw >= 0.0 && self.heading_jitter >= 0.0) {
            return bad("ego_jitter_xy", "jitters must be non-negative");
        }
        if !(self.clearance >= 0.0) {
            return bad("clearance", "must be non-negative");
        }
        Ok(())
    }
}

/// One synthetic frame. Boxes are in the world frame; clouds are in each
/// agent's own sensor frame (`clouds[0]` ego, `clouds[k + 1]` CAV `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub seed: u64,
    pub ego_pose: Pose6D,
    pub cav_poses: Vec<Pose6D>,
    pub gt_boxes: Vec<Box3D>,
    /// Index into `gt_boxes` of each CAV's own body.
    pub cav_boxes: Vec<usize>,
    pub clouds: Vec<PointCloud>,
}

impl Scene {
    pub fn agent_pose(&self, agent: AgentId) -> Result<Pose6D, SceneError> {
        match agent {
            AgentId::Ego => Ok(self.ego_pose),
            AgentId::Cav(k) => self.cav_poses.get(k).copied().ok_or(SceneError::UnknownAgent(agent)),
        }
    }

    pub fn cloud(&self, agent: AgentId) -> &PointCloud {
        match agent {
            AgentId::Ego => &self.clouds[0],
            AgentId::Cav(k) => &self.clouds[k + 1],
        }
    }

    pub fn cav_clouds(&self) -> &[PointCloud] {
        &self.clouds[1..]
    }

    /// Ground-truth boxes expressed in the ego frame.
    pub fn gt_boxes_ego(&self) -> Vec<Box3D> {
        self.gt_boxes.iter().map(|b| world_box_to_frame(b, &self.ego_pose)).collect()
    }
}

/// Re-expresses a world box in the frame of `pose` (yaw-only box rotation).
pub fn world_box_to_frame(b: &Box3D, pose: &Pose6D) -> Box3D {
    let inv = pose_to_matrix(pose).invert();
    Box3D::new(inv.apply(&b.center), b.dims, b.yaw - pose.yaw())
}

fn frame_box_to_world(b: &Box3D, pose: &Pose6D) -> Box3D {
    Box3D::new(pose_to_matrix(pose).apply(&b.center), b.dims, b.yaw + pose.yaw())
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform(rng: &mut impl Rng, window: [f64; 2]) -> f64 {
    rng.random_range(window[0]..=window[1])
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Generates scene `index`; a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let seed = rng.next_u64();

    let ego_pose = Pose6D::new(
        symmetric(&mut rng, cfg.ego_jitter_xy),
        symmetric(&mut rng, cfg.ego_jitter_xy),
        cfg.sensor_height,
        0.0,
        0.0,
        symmetric(&mut rng, cfg.ego_jitter_yaw),
    )?;
    let n_cavs = rng.random_range(cfg.n_cavs[0]..=cfg.n_cavs[1]);
    let n_vehicles = rng.random_range(cfg.n_vehicles[0]..=cfg.n_vehicles[1]);

    // Footprints in the ego frame, starting with the ego body itself.
    let template = cfg.vehicle_dims;
    let ego_body = Box3D::new([0.0, 0.0, 0.5 * template[2] - cfg.sensor_height], template, 0.0);
    let mut placed: Vec<Box3D> = vec![ego_body];

    let mut place = |rng: &mut ChaCha8Rng, xw: [f64; 2], yw: [f64; 2], what: String| -> Result<Box3D, SceneError> {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let dims = template.map(|d| d * (1.0 + symmetric(rng, cfg.dims_jitter)));
            let heading = if rng.random_bool(0.5) { 0.0 } else { 180.0 };
            let yaw = heading + symmetric(rng, cfg.heading_jitter);
            let x = uniform(rng, xw);
            let y = uniform(rng, yw);
            let candidate = Box3D::new([x, y, 0.5 * dims[2] - cfg.sensor_height], dims, yaw);
            let fp = candidate.footprint_inflated(0.5 * cfg.clearance);
            let clear = placed
                .iter()
                .all(|other| polygon_intersection_area(&fp, &other.footprint_inflated(0.5 * cfg.clearance)) <= 0.0);
            if clear {
                placed.push(candidate);
                return Ok(candidate);
            }
        }
        Err(SceneError::Overcrowded { what, attempts: PLACEMENT_ATTEMPTS })
    };

    let mut gt_boxes = Vec::with_capacity(n_cavs + n_vehicles);
    let mut cav_poses = Vec::with_capacity(n_cavs);
    let mut cav_boxes = Vec::with_capacity(n_cavs);
    for k in 0..n_cavs {
        let local = place(&mut rng, cfg.cav_x, cfg.cav_y, format!("CAV {k}"))?;
        let world = frame_box_to_world(&local, &ego_pose);
        cav_poses.push(Pose6D::new(world.center[0], world.center[1], cfg.sensor_height, 0.0, 0.0, world.yaw)?);
        cav_boxes.push(gt_boxes.len());
        gt_boxes.push(world);
    }
    for k in 0..n_vehicles {
        let local = place(&mut rng, cfg.vehicle_x, cfg.vehicle_y, format!("vehicle {k}"))?;
        gt_boxes.push(frame_box_to_world(&local, &ego_pose));
    }

    let mut scene = Scene { index, seed, ego_pose, cav_poses, gt_boxes, cav_boxes, clouds: Vec::new() };
    let mut clouds = Vec::with_capacity(n_cavs + 1);
    clouds.push(sample_lidar(&scene, AgentId::Ego, cfg)?);
    for k in 0..n_cavs {
        clouds.push(sample_lidar(&scene, AgentId::Cav(k), cfg)?);
    }
    scene.clouds = clouds;
    Ok(scene)
}

/// Samples the LiDAR returns seen by `agent`, in the agent's own frame.
///
/// Each box face whose outward normal points toward the sensor receives
/// `max(1, round(area * density * (10 / range)^2))` uniform samples, where
/// `range` is the sensor distance to the box center.
pub fn sample_lidar(scene: &Scene, agent: AgentId, cfg: &SceneConfig) -> Result<PointCloud, SceneError> {
    let pose = scene.agent_pose(agent)?;
    let own_box = match agent {
        AgentId::Ego => None,
        AgentId::Cav(k) => scene.cav_boxes.get(k).copied(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(agent.stream());
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"));
    let sensor = pose.translation();
    let to_agent = pose_to_matrix(&pose).invert();

    let mut points = Vec::new();
    for (i, b) in scene.gt_boxes.iter().enumerate() {
        if Some(i) == own_box {
            continue;
        }
        let range = (Vector3::from(b.center) - sensor).norm().max(1e-3);
        let density = cfg.points_per_m2 * (10.0 / range).powi(2);
        for face in b.faces() {
            if face.normal.dot(&(sensor - face.center)) <= 0.0 {
                continue;
            }
            let count = ((face.area() * density).round() as usize).max(1);
            for _ in 0..count {
                let a: f64 = rng.random_range(-1.0..=1.0);
                let c: f64 = rng.random_range(-1.0..=1.0);
                let mut p = face.center + face.u * a + face.v * c;
                if let Some(n) = &noise {
                    for k in 0..3 {
                        p[k] += n.sample(&mut rng);
                    }
                }
                points.push(to_agent.apply(&[p.x, p.y, p.z]));
            }
        }
    }
    Ok(PointCloud::new(points)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{htm_extract, transform_cloud};

    fn lone_scene(boxes: Vec<Box3D>) -> Scene {
        Scene {
            index: 0,
            seed: 7,
            ego_pose: Pose6D::new(0.0, 0.0, 1.8, 0.0, 0.0, 0.0).unwrap(),
            cav_poses: vec![],
            gt_boxes: boxes,
            cav_boxes: vec![],
            clouds: vec![PointCloud::empty()],
        }
    }

    fn noiseless() -> SceneConfig {
        SceneConfig { noise_sigma: 0.0, ..SceneConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
        assert_ne!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn single_cav_without_vehicles() {
        let cfg = SceneConfig { n_vehicles: [0, 0], n_cavs: [1, 1], ..SceneConfig::default() };
        let scene = generate_scene(&cfg, 0).unwrap();
        assert_eq!(scene.cav_poses.len(), 1);
        assert_eq!(scene.gt_boxes.len(), 1);
        assert_eq!(scene.cav_boxes, vec![0]);
        let b = scene.gt_boxes[0];
        assert!((b.center[0] - scene.cav_poses[0].x()).abs() < 1e-12);
    }

    #[test]
    fn footprints_never_overlap() {
        let cfg = SceneConfig::default();
        for index in 0..20 {
            let scene = generate_scene(&cfg, index).unwrap();
            let fps: Vec<_> = scene.gt_boxes.iter().map(|b| b.footprint()).collect();
            for i in 0..fps.len() {
                for j in i + 1..fps.len() {
                    assert_eq!(polygon_intersection_area(&fps[i], &fps[j]), 0.0, "scene {index} boxes {i},{j}");
                }
            }
        }
    }

    #[test]
    fn boxes_lie_in_evaluation_range() {
        let cfg = SceneConfig::default();
        for index in 0..20 {
            let scene = generate_scene(&cfg, index).unwrap();
            assert!((1..=MAX_CAVS).contains(&scene.cav_poses.len()));
            for b in scene.gt_boxes_ego() {
                assert!(b.center[0].abs() <= RANGE_X && b.center[1].abs() <= RANGE_Y);
            }
        }
    }

    #[test]
    fn overcrowded_config_errors() {
        let cfg = SceneConfig {
            n_vehicles: [40, 40],
            vehicle_x: [-5.0, 5.0],
            vehicle_y: [-5.0, 5.0],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(SceneError::Overcrowded { .. })));
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SceneConfig { n_cavs: [0, 6], ..SceneConfig::default() };
        let err = generate_scene(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("n_cavs"));
    }

    #[test]
    fn empty_world_gives_empty_cloud() {
        let scene = lone_scene(vec![]);
        assert!(sample_lidar(&scene, AgentId::Ego, &noiseless()).unwrap().is_empty());
        assert!(sample_lidar(&scene, AgentId::Cav(0), &noiseless()).is_err());
    }

    #[test]
    fn noiseless_points_lie_on_sensor_facing_faces() {
        let b = Box3D::new([10.0, 3.0, 0.75], [4.5, 2.0, 1.5], 0.0);
        let scene = lone_scene(vec![b]);
        let cloud = sample_lidar(&scene, AgentId::Ego, &noiseless()).unwrap();
        let sensor = Vector3::new(0.0, 0.0, 1.8);
        let visible: Vec<Face> =
            b.faces().into_iter().filter(|f| f.normal.dot(&(sensor - f.center)) > 0.0).collect();
        assert_eq!(visible.len(), 3);
        for p in cloud.points() {
            let world = Vector3::new(p[0], p[1], p[2] + 1.8);
            let d = visible.iter().map(|f| f.distance(&world)).fold(f64::INFINITY, f64::min);
            assert!(d <= 1e-9, "point {p:?} is {d} from the visible faces");
        }
        // every visible face receives samples
        for f in &visible {
            assert!(cloud.points().iter().any(|p| f.distance(&Vector3::new(p[0], p[1], p[2] + 1.8)) <= 1e-9));
        }
    }

    #[test]
    fn density_falls_with_square_of_range() {
        let near = lone_scene(vec![Box3D::new([10.0, 0.0, 0.75], [4.5, 2.0, 1.5], 0.0)]);
        let far = lone_scene(vec![Box3D::new([20.0, 0.0, 0.75], [4.5, 2.0, 1.5], 0.0)]);
        let cfg = noiseless();
        let n_near = sample_lidar(&near, AgentId::Ego, &cfg).unwrap().len() as f64;
        let n_far = sample_lidar(&far, AgentId::Ego, &cfg).unwrap().len() as f64;
        let ratio = n_near / n_far;
        assert!((ratio - 4.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn noiseless_generated_points_touch_some_box() {
        let cfg = SceneConfig { noise_sigma: 0.0, ..SceneConfig::default() };
        let scene = generate_scene(&cfg, 1).unwrap();
        let faces: Vec<Face> = scene.gt_boxes.iter().flat_map(|b| b.faces()).collect();
        for (a, cloud) in scene.clouds.iter().enumerate() {
            let pose = if a == 0 { scene.ego_pose } else { scene.cav_poses[a - 1] };
            let m = pose_to_matrix(&pose);
            for p in cloud.points() {
                let w = Vector3::from(m.apply(p));
                let d = faces.iter().map(|f| f.distance(&w)).fold(f64::INFINITY, f64::min);
                assert!(d <= 1e-9);
            }
        }
    }

    #[test]
    fn cav_cloud_projects_onto_ego_frame_boxes() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(&cfg, 2).unwrap();
        let ego_boxes = scene.gt_boxes_ego();
        let faces: Vec<Face> = ego_boxes.iter().flat_map(|b| b.faces()).collect();
        let tol = 4.0 * cfg.noise_sigma + 1e-9;
        for (k, cav) in scene.cav_poses.iter().enumerate() {
            let projected = transform_cloud(&htm_extract(&scene.ego_pose, cav), scene.cloud(AgentId::Cav(k)));
            for p in projected.points() {
                let d = faces.iter().map(|f| f.distance(&Vector3::from(*p))).fold(f64::INFINITY, f64::min);
                assert!(d <= tol, "distance {d}");
            }
        }
    }
}
