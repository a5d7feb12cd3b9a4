//! Differentiable BEV surrogate of a cooperative LiDAR detector.
//!
//! The pipeline is `encode -> fuse -> score`, all smooth in the input point
//! coordinates, followed by an evaluation-only `detect` head. [`forward`]
//! records a [`PipelineTape`] from which [`backward`] evaluates
//! vector-Jacobian products down to the CAV pose parameters.
//!
//! Encoding splats every point onto the grid with a compactly supported
//! Gaussian: `exp(-d^2 / 2 sigma^2)` minus its first-order Taylor expansion
//! (in `d^2`) at the `3 sigma` cutoff, rescaled to peak at 1. The correction
//! makes the kernel C1 at the stencil boundary. Points are further weighted
//! by a smooth vertical gate that is close to 1 inside `z_band` and decays
//! logistically, with width `z_sigma`, across either end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{htm_extract, wrap_degrees, transform_cloud, transform_jacobian, PointCloud, Pose6D, POSE_DIM};
use crate::scene::{Box3D, RANGE_X, RANGE_Y};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(GridSpec, GridSpec),
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid perception variant: `{field}` {reason}")]
    InvalidVariant { field: &'static str, reason: String },
}

/// Fixed BEV extent with a square cell size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(cell_size: f64) -> Result<Self, PerceptionError> {
        let invalid = |reason: &str| PerceptionError::InvalidVariant { field: "cell_size", reason: reason.into() };
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(invalid("must be positive"));
        }
        let fx = 2.0 * RANGE_X / cell_size;
        let fy = 2.0 * RANGE_Y / cell_size;
        if (fx - fx.round()).abs() > 1e-9 || (fy - fy.round()).abs() > 1e-9 {
            return Err(invalid("must divide the 280 m x 80 m extent"));
        }
        Ok(Self { cell_size, nx: fx.round() as usize, ny: fy.round() as usize })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index, rows along y.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            -RANGE_X + (ix as f64 + 0.5) * self.cell_size,
            -RANGE_Y + (iy as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cell containing `(x, y)`, if inside the extent.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x + RANGE_X) / self.cell_size).floor();
        let fy = ((y + RANGE_Y) / self.cell_size).floor();
        (fx >= 0.0 && fy >= 0.0 && (fx as usize) < self.nx && (fy as usize) < self.ny)
            .then(|| (fx as usize, fy as usize))
    }

    fn axis_range(&self, center: f64, origin: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
        let lo = ((center - radius - origin) / self.cell_size - 0.5).floor();
        let hi = ((center + radius - origin) / self.cell_size - 0.5).ceil();
        let lo = lo.max(0.0);
        let hi = hi.min(n as f64 - 1.0);
        (lo <= hi).then(|| (lo as usize, hi as usize))
    }

    /// Calls `f(index, dx, dy)` for every cell whose center lies strictly
    /// within `radius` of `(x, y)`, where `(dx, dy)` is point minus center.
    fn for_each_within(&self, x: f64, y: f64, radius: f64, mut f: impl FnMut(usize, f64, f64)) {
        let (Some((x0, x1)), Some((y0, y1))) = (
            self.axis_range(x, -RANGE_X, radius, self.nx),
            self.axis_range(y, -RANGE_Y, radius, self.ny),
        ) else {
            return;
        };
        let r2 = radius * radius;
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let [cx, cy] = self.cell_center(ix, iy);
                let (dx, dy) = (x - cx, y - cy);
                if dx * dx + dy * dy < r2 {
                    f(self.index(ix, iy), dx, dy);
                }
            }
        }
    }
}

/// Two-channel BEV features: soft occupancy and height-weighted occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub occupancy: Vec<f64>,
    pub height: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, occupancy: vec![0.0; spec.len()], height: vec![0.0; spec.len()] }
    }

    /// Both channels concatenated, occupancy first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.spec.len());
        v.extend_from_slice(&self.occupancy);
        v.extend_from_slice(&self.height);
        v
    }

    pub fn check_same_shape(&self, other: &FeatureGrid) -> Result<(), PerceptionError> {
        if self.spec != other.spec {
            return Err(PerceptionError::ShapeMismatch(self.spec, other.spec));
        }
        Ok(())
    }
}

/// Gradient of a scalar with respect to both channels of a [`FeatureGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub occupancy: Vec<f64>,
    pub height: Vec<f64>,
}

impl GridGradient {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self { occupancy: vec![0.0; spec.len()], height: vec![0.0; spec.len()] }
    }

    /// Splits a flattened gradient (occupancy first) back into channels.
    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        Self { occupancy: flat[..n].to_vec(), height: flat[n..].to_vec() }
    }

    fn add_assign(&mut self, other: &GridGradient) {
        for (a, b) in self.occupancy.iter_mut().zip(&other.occupancy) {
            *a += b;
        }
        for (a, b) in self.height.iter_mut().zip(&other.height) {
            *a += b;
        }
    }
}

/// Per-cell detection scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    Sum,
    SoftmaxWeighted,
}

/// Temperature of the softmax-weighted fusion rule.
pub const SOFTMAX_KAPPA: f64 = 1.0;

/// Configuration of one surrogate detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionVariant {
    pub name: String,
    pub cell_size: f64,
    pub splat_sigma: f64,
    pub fusion: FusionRule,
    /// Score steepness: `s = 1 - exp(-alpha * occupancy)`.
    pub alpha: f64,
    pub threshold: f64,
    pub nms_radius: f64,
    /// Vertical pass band of the encoder in the ego frame, meters.
    pub z_band: [f64; 2],
    pub z_sigma: f64,
    /// Box dimensions assigned to every detection.
    pub template_dims: [f64; 3],
}

impl PerceptionVariant {
    /// Fine sum-fusion variant (cell 1 m, sigma 0.75 m, alpha 1).
    pub fn a() -> Self {
        Self {
            name: "A".into(),
            cell_size: 1.0,
            splat_sigma: 0.75,
            fusion: FusionRule::Sum,
            alpha: 1.0,
            threshold: 0.4,
            nms_radius: 2.0,
            z_band: [-2.0, 1.0],
            z_sigma: 0.25,
            template_dims: [4.5, 2.0, 1.5],
        }
    }

    /// Coarse softmax-fusion variant (cell 2 m, sigma 1.5 m, alpha 0.5).
    pub fn b() -> Self {
        Self {
            name: "B".into(),
            cell_size: 2.0,
            splat_sigma: 1.5,
            fusion: FusionRule::SoftmaxWeighted,
            alpha: 0.5,
            ..Self::a()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "A" | "a" => Some(Self::a()),
            "B" | "b" => Some(Self::b()),
            _ => None,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, PerceptionError> {
        GridSpec::new(self.cell_size)
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |field, reason: &str| Err(PerceptionError::InvalidVariant { field, reason: reason.into() });
        self.grid_spec()?;
        if !(self.splat_sigma > 0.0 && self.splat_sigma.is_finite()) {
            return bad("splat_sigma", "must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(self.nms_radius >= 0.0) {
            return bad("nms_radius", "must be non-negative");
        }
        if !(self.z_band[0] < self.z_band[1] && self.z_sigma > 0.0) {
            return bad("z_band", "must be a non-empty band with positive z_sigma");
        }
        if !self.template_dims.iter().all(|d| *d > 0.0) {
            return bad("template_dims", "must be positive");
        }
        Ok(())
    }

    /// Splat weight and its derivative with respect to squared distance.
    fn kernel(&self, d2: f64) -> (f64, f64) {
        let s2 = self.splat_sigma * self.splat_sigma;
        let r2 = 9.0 * s2;
        if d2 >= r2 {
            return (0.0, 0.0);
        }
        let f = (-d2 / (2.0 * s2)).exp();
        let f_r = (-4.5f64).exp();
        let df_r = -f_r / (2.0 * s2);
        let norm = 1.0 - f_r + df_r * r2;
        ((f - f_r - df_r * (d2 - r2)) / norm, (-f / (2.0 * s2) - df_r) / norm)
    }

    /// Vertical gate and its derivative: a product of two logistic edges at
    /// the ends of `z_band`, each of width `z_sigma`.
    fn gate(&self, z: f64) -> (f64, f64) {
        let [lo, hi] = self.z_band;
        let s = self.z_sigma;
        let a = logistic((z - lo) / s);
        let b = logistic((hi - z) / s);
        (a * b, a * b * ((1.0 - a) - (1.0 - b)) / s)
    }

    fn stencil_radius(&self) -> f64 {
        3.0 * self.splat_sigma
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Splats a cloud (already in the ego frame) onto the BEV grid.
pub fn encode(cloud: &PointCloud, variant: &PerceptionVariant) -> Result<FeatureGrid, PerceptionError> {
    let spec = variant.grid_spec()?;
    let mut grid = FeatureGrid::zeros(spec);
    let radius = variant.stencil_radius();
    for p in cloud.points() {
        let (g, _) = variant.gate(p[2]);
        if g == 0.0 {
            continue;
        }
        spec.for_each_within(p[0], p[1], radius, |idx, dx, dy| {
            let (w, _) = variant.kernel(dx * dx + dy * dy);
            grid.occupancy[idx] += w * g;
            grid.height[idx] += w * g * p[2];
        });
    }
    Ok(grid)
}

/// Gradient of a scalar w.r.t. each point, given its gradient w.r.t. the
/// encoded grid.
fn encode_backward(cloud: &PointCloud, upstream: &GridGradient, variant: &PerceptionVariant) -> Vec<[f64; 3]> {
    let spec = variant.grid_spec().expect("validated in forward");
    let radius = variant.stencil_radius();
    cloud
        .points()
        .iter()
        .map(|p| {
            let (g, dg) = variant.gate(p[2]);
            let mut grad = [0.0; 3];
            if g == 0.0 && dg == 0.0 {
                return grad;
            }
            spec.for_each_within(p[0], p[1], radius, |idx, dx, dy| {
                let (w, dw) = variant.kernel(dx * dx + dy * dy);
                let go = upstream.occupancy[idx];
                let gh = upstream.height[idx];
                let v = go + p[2] * gh;
                grad[0] += g * dw * 2.0 * dx * v;
                grad[1] += g * dw * 2.0 * dy * v;
                grad[2] += dg * w * v + g * w * gh;
            });
            grad
        })
        .collect()
}

/// Fuses the ego grid with collaborator grids.
pub fn fuse(ego: &FeatureGrid, cavs: &[FeatureGrid], variant: &PerceptionVariant) -> Result<FeatureGrid, PerceptionError> {
    for c in cavs {
        ego.check_same_shape(c)?;
    }
    if cavs.is_empty() {
        return Ok(ego.clone());
    }
    let mut out = FeatureGrid::zeros(ego.spec);
    match variant.fusion {
        FusionRule::Sum => {
            for i in 0..ego.spec.len() {
                out.occupancy[i] = cavs.iter().fold(ego.occupancy[i], |acc, c| acc + c.occupancy[i]);
                out.height[i] = cavs.iter().fold(ego.height[i], |acc, c| acc + c.height[i]);
            }
        }
        FusionRule::SoftmaxWeighted => {
            let grids: Vec<&FeatureGrid> = std::iter::once(ego).chain(cavs).collect();
            let mut weights = vec![0.0; grids.len()];
            for i in 0..ego.spec.len() {
                softmax_weights(&grids, i, &mut weights);
                for (w, g) in weights.iter().zip(&grids) {
                    out.occupancy[i] += w * g.occupancy[i];
                    out.height[i] += w * g.height[i];
                }
            }
        }
    }
    Ok(out)
}

fn softmax_weights(grids: &[&FeatureGrid], cell: usize, weights: &mut [f64]) {
    let max = grids.iter().map(|g| g.occupancy[cell]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (w, g) in weights.iter_mut().zip(grids) {
        *w = ((g.occupancy[cell] - max) / SOFTMAX_KAPPA).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

fn fuse_backward(agents: &[FeatureGrid], upstream: &GridGradient, variant: &PerceptionVariant) -> Vec<GridGradient> {
    if agents.len() == 1 || variant.fusion == FusionRule::Sum {
        return vec![upstream.clone(); agents.len()];
    }
    let spec = agents[0].spec;
    let refs: Vec<&FeatureGrid> = agents.iter().collect();
    let mut grads: Vec<GridGradient> = agents.iter().map(|_| GridGradient::zeros(&spec)).collect();
    let mut weights = vec![0.0; agents.len()];
    for i in 0..spec.len() {
        let (go, gh) = (upstream.occupancy[i], upstream.height[i]);
        if go == 0.0 && gh == 0.0 {
            continue;
        }
        softmax_weights(&refs, i, &mut weights);
        let v: Vec<f64> = agents.iter().map(|a| go * a.occupancy[i] + gh * a.height[i]).collect();
        let vbar: f64 = weights.iter().zip(&v).map(|(w, v)| w * v).sum();
        for (k, grad) in grads.iter_mut().enumerate() {
            grad.occupancy[i] = go * weights[k] + weights[k] * (v[k] - vbar) / SOFTMAX_KAPPA;
            grad.height[i] = gh * weights[k];
        }
    }
    grads
}

/// `s = 1 - exp(-alpha * occupancy)` per cell.
pub fn score_map(grid: &FeatureGrid, variant: &PerceptionVariant) -> ScoreMap {
    ScoreMap {
        spec: grid.spec,
        values: grid.occupancy.iter().map(|&o| -(-variant.alpha * o).exp_m1()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub confidence: f64,
}

struct Peak {
    index: usize,
    score: f64,
    occupancy: f64,
}

/// Evaluation-only detection head: thresholded local maxima of the fused
/// occupancy, a template fit for center and heading, and greedy NMS in
/// confidence order.
pub fn detect(score: &ScoreMap, grid: &FeatureGrid, variant: &PerceptionVariant) -> Result<Vec<Detection>, PerceptionError> {
    grid.check_same_shape(&FeatureGrid::zeros(score.spec))?;
    let spec = grid.spec;
    let occ = &grid.occupancy;
    let mut peaks = Vec::new();
    for iy in 0..spec.ny {
        for ix in 0..spec.nx {
            let idx = spec.index(ix, iy);
            let s = score.values[idx];
            if s < variant.threshold {
                continue;
            }
            let mut is_max = true;
            'nbr: for ny in iy.saturating_sub(1)..=(iy + 1).min(spec.ny - 1) {
                for nx in ix.saturating_sub(1)..=(ix + 1).min(spec.nx - 1) {
                    let n = spec.index(nx, ny);
                    if n != idx && (occ[n] > occ[idx] || (occ[n] == occ[idx] && n < idx)) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                peaks.push(Peak { index: idx, score: s, occupancy: occ[idx] });
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.occupancy.total_cmp(&a.occupancy))
            .then(a.index.cmp(&b.index))
    });

    let mut kept: Vec<Detection> = Vec::new();
    for peak in peaks {
        let (center, yaw) = fit_template(grid, peak.index, variant);
        let suppressed = kept.iter().any(|d| {
            let dx = d.bbox.center[0] - center[0];
            let dy = d.bbox.center[1] - center[1];
            (dx * dx + dy * dy).sqrt() < variant.nms_radius
        });
        if !suppressed {
            let dims = variant.template_dims;
            kept.push(Detection {
                bbox: Box3D::new([center[0], center[1], 0.5 * dims[2]], dims, yaw),
                confidence: peak.score.clamp(0.0, 1.0),
            });
        }
    }
    Ok(kept)
}

/// Bilinear interpolation of the occupancy channel; zero outside the grid.
fn occupancy_at(grid: &FeatureGrid, x: f64, y: f64) -> f64 {
    let spec = grid.spec;
    let fx = (x + RANGE_X) / spec.cell_size - 0.5;
    let fy = (y + RANGE_Y) / spec.cell_size - 0.5;
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let (ix, iy) = (x0 + dx, y0 + dy);
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < spec.nx && (iy as usize) < spec.ny {
                acc += wx * wy * grid.occupancy[spec.index(ix as usize, iy as usize)];
            }
        }
    }
    acc
}

/// Template samples `(u, v, weight)` in box coordinates: +1 inside the
/// footprint grown by the splat width, -1 in a ring of the same width
/// around it.
fn template_samples(variant: &PerceptionVariant) -> Vec<(f64, f64, f64)> {
    let m = variant.splat_sigma;
    let (hl, hw) = (0.5 * variant.template_dims[0] + m, 0.5 * variant.template_dims[1] + m);
    let h = 0.5 * variant.cell_size;
    let nu = ((hl + m) / h).ceil() as i64;
    let nv = ((hw + m) / h).ceil() as i64;
    let mut out = Vec::new();
    for i in -nu..=nu {
        for j in -nv..=nv {
            let (u, v) = (i as f64 * h, j as f64 * h);
            let weight = if u.abs() <= hl && v.abs() <= hw { 1.0 } else { -1.0 };
            out.push((u, v, weight));
        }
    }
    out
}

fn template_response(grid: &FeatureGrid, samples: &[(f64, f64, f64)], center: [f64; 2], yaw: f64) -> f64 {
    let (s, c) = yaw.to_radians().sin_cos();
    samples
        .iter()
        .map(|&(u, v, w)| w * occupancy_at(grid, center[0] + c * u - s * v, center[1] + s * u + c * v))
        .sum()
}

/// Coarse-to-fine search for the template pose (center, yaw in degrees)
/// around the peak at `index`. The moment estimate seeds the search and wins
/// ties.
fn fit_template(grid: &FeatureGrid, index: usize, variant: &PerceptionVariant) -> ([f64; 2], f64) {
    let samples = template_samples(variant);
    let (seed, seed_yaw) = window_moments(grid, index);
    let mut best = (template_response(grid, &samples, seed, seed_yaw), seed, seed_yaw);
    let search = |offsets: &[f64], yaws: &[f64], around: ([f64; 2], f64), best: &mut (f64, [f64; 2], f64)| {
        for &dyaw in yaws {
            for &ox in offsets {
                for &oy in offsets {
                    let center = [around.0[0] + ox, around.0[1] + oy];
                    let yaw = around.1 + dyaw;
                    let r = template_response(grid, &samples, center, yaw);
                    if r > best.0 {
                        *best = (r, center, yaw);
                    }
                }
            }
        }
    };
    let coarse: Vec<f64> = [0, -1, 1, -2, 2, -3, 3, -4, 4].iter().map(|&k| 0.5 * k as f64).collect();
    let coarse_yaw: Vec<f64> = [0, -1, 1, -2, 2, -3, 3, -4, 4, -5, 5, 6].iter().map(|&k| 15.0 * k as f64).collect();
    search(&coarse, &coarse_yaw, (seed, seed_yaw), &mut best);
    let fine = [0.0, -0.125, 0.125, -0.25, 0.25];
    let fine_yaw = [0.0, -3.75, 3.75, -7.5, 7.5];
    let around = (best.1, best.2);
    search(&fine, &fine_yaw, around, &mut best);
    (best.1, wrap_degrees(best.2))
}

/// Occupancy-weighted centroid and principal-axis heading (degrees) over the
/// 5x5 window around `index`.
fn window_moments(grid: &FeatureGrid, index: usize) -> ([f64; 2], f64) {
    let spec = grid.spec;
    let (ix, iy) = spec.coords(index);
    let cells = || {
        (iy.saturating_sub(2)..=(iy + 2).min(spec.ny - 1)).flat_map(move |y| {
            (ix.saturating_sub(2)..=(ix + 2).min(spec.nx - 1)).map(move |x| (spec.cell_center(x, y), spec.index(x, y)))
        })
    };
    let mut total = 0.0;
    let mut mean = [0.0; 2];
    for (c, i) in cells() {
        let w = grid.occupancy[i];
        total += w;
        mean[0] += w * c[0];
        mean[1] += w * c[1];
    }
    if total <= 0.0 {
        return (spec.cell_center(ix, iy), 0.0);
    }
    mean = [mean[0] / total, mean[1] / total];
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for (c, i) in cells() {
        let w = grid.occupancy[i] / total;
        let (dx, dy) = (c[0] - mean[0], c[1] - mean[1]);
        cxx += w * dx * dx;
        cyy += w * dy * dy;
        cxy += w * dx * dy;
    }
    let yaw = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    (mean, yaw.to_degrees())
}

/// Forward record of one `project -> encode -> fuse -> score` evaluation.
///
/// Holds the inputs and every intermediate needed by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTape {
    variant: PerceptionVariant,
    ego_pose: Pose6D,
    cav_poses: Vec<Pose6D>,
    ego_cloud: PointCloud,
    cav_clouds: Vec<PointCloud>,
    projected: Vec<PointCloud>,
    /// Ego grid first, then one grid per CAV.
    agent_grids: Vec<FeatureGrid>,
    fused: FeatureGrid,
    score: ScoreMap,
}

impl PipelineTape {
    pub fn score(&self) -> &ScoreMap {
        &self.score
    }

    pub fn fused(&self) -> &FeatureGrid {
        &self.fused
    }

    pub fn ego_grid(&self) -> &FeatureGrid {
        &self.agent_grids[0]
    }

    pub fn cav_grids(&self) -> &[FeatureGrid] {
        &self.agent_grids[1..]
    }

    /// CAV clouds projected into the ego frame.
    pub fn projected(&self) -> &[PointCloud] {
        &self.projected
    }

    pub fn variant(&self) -> &PerceptionVariant {
        &self.variant
    }

    pub fn n_cavs(&self) -> usize {
        self.cav_poses.len()
    }

    /// Re-runs the forward pass from the recorded inputs.
    pub fn replay(&self) -> Result<PipelineTape, PerceptionError> {
        forward(&self.ego_cloud, &self.cav_clouds, &self.ego_pose, &self.cav_poses, &self.variant)
    }

    pub fn detect(&self) -> Result<Vec<Detection>, PerceptionError> {
        detect(&self.score, &self.fused, &self.variant)
    }
}

/// Projects every CAV cloud into the ego frame, encodes, fuses and scores.
pub fn forward(
    ego_cloud: &PointCloud,
    cav_clouds: &[PointCloud],
    ego_pose: &Pose6D,
    cav_poses: &[Pose6D],
    variant: &PerceptionVariant,
) -> Result<PipelineTape, PerceptionError> {
    variant.validate()?;
    if cav_clouds.len() != cav_poses.len() {
        return Err(PerceptionError::LengthMismatch {
            what: "CAV poses",
            expected: cav_clouds.len(),
            got: cav_poses.len(),
        });
    }
    let projected: Vec<PointCloud> = cav_clouds
        .iter()
        .zip(cav_poses)
        .map(|(c, g)| transform_cloud(&htm_extract(ego_pose, g), c))
        .collect();
    let mut agent_grids = Vec::with_capacity(projected.len() + 1);
    agent_grids.push(encode(ego_cloud, variant)?);
    for p in &projected {
        agent_grids.push(encode(p, variant)?);
    }
    let fused = fuse(&agent_grids[0], &agent_grids[1..], variant)?;
    let score = score_map(&fused, variant);
    Ok(PipelineTape {
        variant: variant.clone(),
        ego_pose: *ego_pose,
        cav_poses: cav_poses.to_vec(),
        ego_cloud: ego_cloud.clone(),
        cav_clouds: cav_clouds.to_vec(),
        projected,
        agent_grids,
        fused,
        score,
    })
}

/// Upstream gradients of a scalar with respect to pipeline outputs. Absent
/// entries are treated as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Upstream {
    /// d/d score, one entry per cell.
    pub score: Option<Vec<f64>>,
    /// d/d encoded CAV grids, one per CAV.
    pub cav_grids: Option<Vec<GridGradient>>,
    /// d/d projected CAV points, one list per CAV.
    pub cav_points: Option<Vec<Vec<[f64; 3]>>>,
}

/// Vector-Jacobian product from `upstream` down to each CAV pose.
pub fn backward(tape: &PipelineTape, upstream: &Upstream) -> Result<Vec<[f64; POSE_DIM]>, PerceptionError> {
    let spec = tape.fused.spec;
    let n = tape.n_cavs();
    let check = |what, expected, got| {
        if expected != got {
            Err(PerceptionError::LengthMismatch { what, expected, got })
        } else {
            Ok(())
        }
    };
    if let Some(s) = &upstream.score {
        check("score gradient", spec.len(), s.len())?;
    }
    if let Some(g) = &upstream.cav_grids {
        check("CAV grid gradients", n, g.len())?;
        for gg in g {
            check("CAV grid gradient occupancy", spec.len(), gg.occupancy.len())?;
            check("CAV grid gradient height", spec.len(), gg.height.len())?;
        }
    }
    if let Some(p) = &upstream.cav_points {
        check("CAV point gradients", n, p.len())?;
        for (pts, cloud) in p.iter().zip(&tape.projected) {
            check("CAV point gradient", cloud.len(), pts.len())?;
        }
    }

    let mut grid_grads: Vec<GridGradient> = match &upstream.score {
        Some(ds) => {
            let alpha = tape.variant.alpha;
            let fused_grad = GridGradient {
                occupancy: ds
                    .iter()
                    .zip(&tape.fused.occupancy)
                    .map(|(g, &o)| g * alpha * (-alpha * o).exp())
                    .collect(),
                height: vec![0.0; spec.len()],
            };
            fuse_backward(&tape.agent_grids, &fused_grad, &tape.variant).split_off(1)
        }
        None => (0..n).map(|_| GridGradient::zeros(&spec)).collect(),
    };
    if let Some(extra) = &upstream.cav_grids {
        for (g, e) in grid_grads.iter_mut().zip(extra) {
            g.add_assign(e);
        }
    }

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut point_grads = encode_backward(&tape.projected[k], &grid_grads[k], &tape.variant);
        if let Some(extra) = &upstream.cav_points {
            for (g, e) in point_grads.iter_mut().zip(&extra[k]) {
                for i in 0..3 {
                    g[i] += e[i];
                }
            }
        }
        let jac = transform_jacobian(&tape.ego_pose, &tape.cav_poses[k], &tape.cav_clouds[k]);
        out.push(jac.vjp(&point_grads));
    }
    Ok(out)
}

/// Row-major CSV dump of one grid channel, preceded by a header line
/// declaring extent and cell size.
pub fn grid_to_csv(spec: &GridSpec, values: &[f64]) -> String {
    let mut out = format!(
        "# x_min={},x_max={},y_min={},y_max={},cell_size={},nx={},ny={}\n",
        -RANGE_X, RANGE_X, -RANGE_Y, RANGE_Y, spec.cell_size, spec.nx, spec.ny
    );
    for row in values.chunks(spec.nx) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
