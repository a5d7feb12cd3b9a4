//! Attack objective terms and the perturbation budget.
//!
//! - appearance: MSE between index-aligned projections of one CAV cloud
//! - distribution: biased RBF-kernel MMD^2 between sets of encoded grids
//! - task: class-balanced BCE between the score map and a rasterized
//!   ground-truth heatmap
//!
//! Each term comes with its gradient with respect to the quantity the attack
//! perturbs (points, grids or scores), ready to feed
//! [`crate::perception::backward`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_degrees, PointCloud, Pose6D, POSE_DIM};
use crate::perception::{FeatureGrid, GridGradient, GridSpec, ScoreMap};
use crate::scene::Box3D;

/// Score clamp used before taking logarithms.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Lower bound on the MMD kernel bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("MMD needs non-empty sets")]
    EmptySet,
    #[error("grid shapes differ")]
    ShapeMismatch,
}

/// Balance weights of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub omega: f64,
    pub xi: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda: 1.0, omega: 1.0, xi: 1.0 }
    }
}

impl ObjectiveWeights {
    pub fn task_only() -> Self {
        Self { lambda: 0.0, omega: 0.0, xi: 1.0 }
    }

    pub fn is_valid(&self) -> bool {
        [self.lambda, self.omega, self.xi].iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Per-parameter L-infinity bounds on the pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    /// Meters, shared by x and y.
    pub eps_xy: f64,
    /// Meters.
    pub eps_z: f64,
    /// Degrees, shared by roll, pitch and yaw.
    pub eps_theta: f64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self { eps_xy: 1.118, eps_z: 1.395, eps_theta: 0.141 }
    }
}

impl PerturbationBudget {
    pub fn is_valid(&self) -> bool {
        [self.eps_xy, self.eps_z, self.eps_theta].iter().all(|e| e.is_finite() && *e > 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { eps_xy: self.eps_xy * factor, eps_z: self.eps_z * factor, eps_theta: self.eps_theta * factor }
    }

    /// Bound for pose parameter `param` (0..6).
    pub fn eps(&self, param: usize) -> f64 {
        match param {
            0 | 1 => self.eps_xy,
            2 => self.eps_z,
            _ => self.eps_theta,
        }
    }

    pub fn as_array(&self) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| self.eps(i))
    }

    /// Clamps an additive perturbation into the budget box.
    pub fn clamp_delta(&self, delta: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| delta[i].clamp(-self.eps(i), self.eps(i)))
    }

    pub fn contains(&self, delta: &[f64; POSE_DIM]) -> bool {
        delta.iter().enumerate().all(|(i, d)| d.abs() <= self.eps(i))
    }
}

/// Binary BEV target: 1 where a cell center lies inside a box footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthHeatmap {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl GroundTruthHeatmap {
    /// Rasterizes ego-frame boxes onto `spec`.
    pub fn rasterize(boxes: &[Box3D], spec: GridSpec) -> Self {
        let mut values = vec![0.0; spec.len()];
        for b in boxes {
            let (s, c) = b.yaw.to_radians().sin_cos();
            let (hl, hw) = (0.5 * b.dims[0], 0.5 * b.dims[1]);
            let reach = hl.hypot(hw);
            for iy in 0..spec.ny {
                for ix in 0..spec.nx {
                    let [x, y] = spec.cell_center(ix, iy);
                    let (dx, dy) = (x - b.center[0], y - b.center[1]);
                    if dx.abs() > reach || dy.abs() > reach {
                        continue;
                    }
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    if u.abs() <= hl && v.abs() <= hw {
                        values[spec.index(ix, iy)] = 1.0;
                    }
                }
            }
        }
        Self { spec, values }
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<(), LossError> {
    if left != right {
        return Err(LossError::LengthMismatch { what, left, right });
    }
    Ok(())
}

/// Mean squared coordinate difference over index-aligned points.
pub fn appearance_discrepancy(p_ori: &PointCloud, p_adv: &PointCloud) -> Result<f64, LossError> {
    check_len("appearance clouds", p_ori.len(), p_adv.len())?;
    if p_ori.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p_ori
        .points()
        .iter()
        .zip(p_adv.points())
        .map(|(a, b)| (0..3).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * p_ori.len()) as f64)
}

/// Gradient of [`appearance_discrepancy`] with respect to `p_adv`, where the
/// mean runs over `total_points` points (so several clouds can share one
/// normalization).
pub fn appearance_gradient(p_ori: &PointCloud, p_adv: &PointCloud, total_points: usize) -> Result<Vec<[f64; 3]>, LossError> {
    check_len("appearance clouds", p_ori.len(), p_adv.len())?;
    let scale = 2.0 / (3 * total_points.max(1)) as f64;
    Ok(p_ori
        .points()
        .iter()
        .zip(p_adv.points())
        .map(|(a, b)| [scale * (b[0] - a[0]), scale * (b[1] - a[1]), scale * (b[2] - a[2])])
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Order-independent mean of kernel values.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / n
}

fn flatten_all(set: &[FeatureGrid]) -> Result<Vec<Vec<f64>>, LossError> {
    if set.is_empty() {
        return Err(LossError::EmptySet);
    }
    Ok(set.iter().map(FeatureGrid::flatten).collect())
}

fn check_shapes(a: &[FeatureGrid], b: &[FeatureGrid]) -> Result<(), LossError> {
    let spec = a[0].spec;
    if a.iter().chain(b).any(|g| g.spec != spec) {
        return Err(LossError::ShapeMismatch);
    }
    Ok(())
}

/// Biased MMD^2 with kernel `exp(-|a - b|^2 / (2 bandwidth^2))` over flattened
/// grids, clamped at zero.
pub fn mmd_squared(set_ori: &[FeatureGrid], set_adv: &[FeatureGrid], bandwidth: f64) -> Result<f64, LossError> {
    Ok(mmd_squared_raw(set_ori, set_adv, bandwidth)?.max(0.0))
}

/// MMD^2 before clamping.
pub fn mmd_squared_raw(set_ori: &[FeatureGrid], set_adv: &[FeatureGrid], bandwidth: f64) -> Result<f64, LossError> {
    let xs = flatten_all(set_ori)?;
    let ys = flatten_all(set_adv)?;
    check_shapes(set_ori, set_adv)?;
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-squared_distance(a, b) * inv).exp();
    let within = |s: &[Vec<f64>]| sorted_mean(s.iter().flat_map(|a| s.iter().map(move |b| k(a, b))).collect());
    let cross = sorted_mean(xs.iter().flat_map(|a| ys.iter().map(move |b| k(a, b))).collect());
    Ok(within(&xs) + within(&ys) - 2.0 * cross)
}

/// Gradient of the clamped [`mmd_squared`] with respect to each adversarial
/// grid, at fixed bandwidth.
pub fn mmd_gradient(set_ori: &[FeatureGrid], set_adv: &[FeatureGrid], bandwidth: f64) -> Result<Vec<GridGradient>, LossError> {
    let xs = flatten_all(set_ori)?;
    let ys = flatten_all(set_adv)?;
    check_shapes(set_ori, set_adv)?;
    let dim = ys[0].len();
    if mmd_squared_raw(set_ori, set_adv, bandwidth)? <= 0.0 {
        return Ok(ys.iter().map(|_| GridGradient::from_flat(&vec![0.0; dim])).collect());
    }
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let g2 = bandwidth * bandwidth;
    let inv = 1.0 / (2.0 * g2);
    let k = |a: &[f64], b: &[f64]| (-squared_distance(a, b) * inv).exp();
    Ok(ys
        .iter()
        .map(|yi| {
            let mut grad = vec![0.0; dim];
            for yb in &ys {
                let c = 2.0 / (m * m) * k(yi, yb) / g2;
                if c != 0.0 {
                    for d in 0..dim {
                        grad[d] += c * (yb[d] - yi[d]);
                    }
                }
            }
            for xa in &xs {
                let c = -2.0 / (n * m) * k(xa, yi) / g2;
                if c != 0.0 {
                    for d in 0..dim {
                        grad[d] += c * (xa[d] - yi[d]);
                    }
                }
            }
            GridGradient::from_flat(&grad)
        })
        .collect())
}

/// Median of the pairwise Euclidean distances within `set`, floored at
/// [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth(set: &[&FeatureGrid]) -> f64 {
    let flat: Vec<Vec<f64>> = set.iter().map(|g| g.flatten()).collect();
    let mut dists = Vec::new();
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            dists.push(squared_distance(&flat[i], &flat[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 { dists[mid] } else { 0.5 * (dists[mid - 1] + dists[mid]) };
    median.max(BANDWIDTH_FLOOR)
}

fn check_heatmap(s: &ScoreMap, y: &GroundTruthHeatmap) -> Result<(), LossError> {
    if s.spec != y.spec {
        return Err(LossError::ShapeMismatch);
    }
    check_len("score vs heatmap", s.values.len(), y.values.len())
}

/// Class-balanced BCE: mean positive-cell loss plus mean negative-cell loss,
/// which equals the negatives-normalized BCE with positives weighted by
/// `N_neg / N_pos`.
pub fn detection_loss(s: &ScoreMap, y: &GroundTruthHeatmap) -> Result<f64, LossError> {
    check_heatmap(s, y)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for (&sv, &yv) in s.values.iter().zip(&y.values) {
        let c = sv.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        if yv == 1.0 {
            pos -= c.ln();
            n_pos += 1;
        } else {
            neg -= (1.0 - c).ln();
            n_neg += 1;
        }
    }
    Ok(pos / n_pos.max(1) as f64 + neg / n_neg.max(1) as f64)
}

/// Gradient of [`detection_loss`] with respect to every score cell.
pub fn detection_loss_gradient(s: &ScoreMap, y: &GroundTruthHeatmap) -> Result<Vec<f64>, LossError> {
    check_heatmap(s, y)?;
    let n_pos = y.positives();
    let n_neg = y.values.len() - n_pos;
    Ok(s.values
        .iter()
        .zip(&y.values)
        .map(|(&sv, &yv)| {
            if !(SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&sv) {
                0.0
            } else if yv == 1.0 {
                -1.0 / (sv * n_pos as f64)
            } else {
                1.0 / ((1.0 - sv) * n_neg as f64)
            }
        })
        .collect())
}

/// Weighted attack objective (maximized by the attacker).
pub fn objective(d_app: f64, d_dist: f64, d_task: f64, w: &ObjectiveWeights) -> f64 {
    w.lambda * d_app + w.omega * d_dist + w.xi * d_task
}

fn param_delta(original: f64, value: f64, angle: bool) -> f64 {
    let d = value - original;
    if angle {
        wrap_degrees(d)
    } else {
        d
    }
}

/// Projects `candidate` onto the budget box around `original`.
///
/// Parameters already within budget are returned unchanged; clamped ones land
/// on the boundary, nudged by at most a few ulps so that the recomputed
/// difference never exceeds the bound. The map is idempotent.
pub fn project_to_budget(original: &Pose6D, candidate: &Pose6D, budget: &PerturbationBudget) -> Pose6D {
    let o = original.as_array();
    let c = candidate.as_array();
    let mut out = c;
    for i in 0..POSE_DIM {
        let angle = i >= 3;
        let eps = budget.eps(i);
        let d = param_delta(o[i], c[i], angle);
        if d.abs() <= eps {
            continue;
        }
        let toward = eps.copysign(d);
        let mut r = o[i] + toward;
        if angle {
            r = wrap_degrees(r);
        }
        while param_delta(o[i], r, angle).abs() > eps {
            r = if toward > 0.0 { r.next_down() } else { r.next_up() };
            if angle {
                r = wrap_degrees(r);
            }
        }
        out[i] = r;
    }
    Pose6D::from_array(out).expect("finite inputs give a finite projection")
}
