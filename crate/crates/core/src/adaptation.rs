//! Calibration helpers: choosing the frontal camera, aligning a monocular
//! mesh to a calibrated rig, and fitting cameras that look at the subject.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{matrix_to_rot6d, rot6d_to_matrix, Camera, GeometryError, Rig, SimilarityTransform, MIN_DEPTH};
use crate::raster::{interpolate_point, Mesh, RasterError, RasterMap};

/// Default stride of the grid of frontal pixels that must map back onto
/// themselves.
pub const DEFAULT_SELF_STRIDE: usize = 4;

#[derive(Debug, Error)]
pub enum AdaptationError {
    #[error("orientation vector is zero")]
    ZeroOrientation,
    #[error("pixel ({x}, {y}) does not hit the mesh")]
    NoIntersection { x: f64, y: f64 },
    #[error("no usable matches")]
    EmptyMatchSet,
    #[error("need at least 4 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("view {0} is not in the rig")]
    UnknownView(i64),
    #[error("viewing direction is parallel to the up vector")]
    DegenerateUp,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn geometry_err(e: GeometryError) -> AdaptationError {
    match e {
        GeometryError::DegenerateUp => AdaptationError::DegenerateUp,
        other => AdaptationError::Geometry(other),
    }
}

/// Index of the camera whose direction from the pelvis best agrees with the
/// body orientation. Exact ties go to the lowest camera id.
pub fn select_frontal_view(rig: &Rig, pelvis: &Vector3<f64>, orientation: &Vector3<f64>) -> Result<i64, AdaptationError> {
    let d_norm = orientation.norm();
    if d_norm < 1e-9 {
        return Err(AdaptationError::ZeroOrientation);
    }
    if rig.is_empty() {
        return Err(AdaptationError::InvalidArgument("rig has no cameras".into()));
    }
    let mut best: Option<(f64, i64)> = None;
    for (id, cam) in rig.ids().iter().zip(rig.cameras()) {
        let gc = cam.center() - pelvis;
        let n = gc.norm();
        let cos = if n > 0.0 { orientation.dot(&gc) / (d_norm * n) } else { f64::NEG_INFINITY };
        best = match best {
            Some((b, bid)) if b > cos || (b == cos && bid < *id) => Some((b, bid)),
            _ => Some((cos, *id)),
        };
    }
    Ok(best.expect("rig is non-empty").1)
}

/// Pixel correspondences between the frontal view and other views, all in
/// `[0, 1]` normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub frontal_view: i64,
    pub pairs: Vec<MatchPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub view: i64,
    pub p: [f64; 2],
    pub q: [f64; 2],
}

impl MatchSet {
    pub fn validate(&self) -> Result<(), AdaptationError> {
        for (i, m) in self.pairs.iter().enumerate() {
            if m.p.iter().chain(&m.q).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(AdaptationError::InvalidArgument(format!("pair {i} has a coordinate outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, AdaptationError> {
        let m: MatchSet = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("match set serializes")
    }

    pub fn load(path: &Path) -> Result<Self, AdaptationError> {
        let s = std::fs::read_to_string(path)
            .map_err(|source| AdaptationError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&s)
    }
}

/// Outcome of [`fit_transform`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationResult {
    pub transform: SimilarityTransform,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mesh point seen by a normalized frontal pixel in the monocular raster.
pub fn surface_point(pixel: &Vector2<f64>, raster: &RasterMap, mesh: &Mesh) -> Result<Vector3<f64>, AdaptationError> {
    let miss = AdaptationError::NoIntersection { x: pixel.x, y: pixel.y };
    let x = (pixel.x * raster.width() as f64).floor();
    let y = (pixel.y * raster.height() as f64).floor();
    if !(x >= 0.0 && y >= 0.0) {
        return Err(miss);
    }
    // p = 1 lands on the last row/column
    let x = (x as usize).min(raster.width() - 1);
    let y = (y as usize).min(raster.height() - 1);
    let (face, bary) = raster.hit(x, y).ok_or(miss)?;
    Ok(interpolate_point(mesh, face as i64, &bary)?)
}

/// Projection normalized by the camera's image size.
fn project_normalized(camera: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let p = camera.project_point(point)?;
    Ok(Vector2::new(p.x / camera.width() as f64, p.y / camera.height() as f64))
}

/// Frontal pixel to the mesh, through the transform, into `camera`.
pub fn reproject(
    pixel: &Vector2<f64>,
    raster: &RasterMap,
    mesh: &Mesh,
    transform: &SimilarityTransform,
    camera: &Camera,
) -> Result<Vector2<f64>, AdaptationError> {
    let p = surface_point(pixel, raster, mesh)?;
    Ok(project_normalized(camera, &transform.apply(&p)?)?)
}

/// One residual term: a mesh point, the camera it must land in, and where.
#[derive(Debug, Clone, Copy)]
struct Term {
    point: Vector3<f64>,
    view: usize,
    target: Vector2<f64>,
}

/// The terms of the alignment objective, resolved against the raster.
#[derive(Debug, Clone)]
pub struct AdaptationProblem {
    cameras: Vec<Camera>,
    frontal: usize,
    terms: Vec<Term>,
    self_terms: usize,
}

impl AdaptationProblem {
    /// Resolves matches against the raster. Matches whose frontal pixel
    /// misses the mesh are dropped; frontal pixels on a `stride` grid
    /// contribute self-alignment terms.
    pub fn new(
        matches: &MatchSet,
        raster: &RasterMap,
        mesh: &Mesh,
        rig: &Rig,
        stride: usize,
    ) -> Result<Self, AdaptationError> {
        matches.validate()?;
        if stride == 0 {
            return Err(AdaptationError::InvalidArgument("stride must be at least 1".into()));
        }
        let frontal = rig.index_of(matches.frontal_view).ok_or(AdaptationError::UnknownView(matches.frontal_view))?;
        let mut terms = Vec::new();
        for y in (0..raster.height()).step_by(stride) {
            for x in (0..raster.width()).step_by(stride) {
                if let Some((face, bary)) = raster.hit(x, y) {
                    let target = Vector2::new(
                        (x as f64 + 0.5) / raster.width() as f64,
                        (y as f64 + 0.5) / raster.height() as f64,
                    );
                    terms.push(Term { point: interpolate_point(mesh, face as i64, &bary)?, view: frontal, target });
                }
            }
        }
        let self_terms = terms.len();
        for m in &matches.pairs {
            let view = rig.index_of(m.view).ok_or(AdaptationError::UnknownView(m.view))?;
            match surface_point(&Vector2::new(m.p[0], m.p[1]), raster, mesh) {
                Ok(point) => terms.push(Term { point, view, target: Vector2::new(m.q[0], m.q[1]) }),
                Err(AdaptationError::NoIntersection { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if terms.len() == self_terms {
            return Err(AdaptationError::EmptyMatchSet);
        }
        Ok(Self { cameras: rig.cameras().to_vec(), frontal, terms, self_terms })
    }

    pub fn match_terms(&self) -> usize {
        self.terms.len() - self.self_terms
    }

    pub fn self_terms(&self) -> usize {
        self.self_terms
    }

    /// `R_0 = (diag(1, -1, -1) R_frontal)^-1`, unit scale, zero translation.
    pub fn initial_transform(&self) -> SimilarityTransform {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let r0 = (flip * self.cameras[self.frontal].r()).transpose();
        SimilarityTransform { scale: [1.0; 3], rot6d: matrix_to_rot6d(&r0), translation: [0.0; 3] }
    }

    /// Residual vectors `target - projection` of the match terms.
    pub fn match_residuals(&self, transform: &SimilarityTransform) -> Result<Vec<Vector2<f64>>, AdaptationError> {
        let r = transform.rotation()?;
        self.terms[self.self_terms..]
            .iter()
            .map(|t| Ok(t.target - project_normalized(&self.cameras[t.view], &transform.apply_with(&r, &t.point))?))
            .collect()
    }

    /// Objective value; infinite when a point falls behind a camera.
    pub fn loss(&self, params: &[f64; 12]) -> f64 {
        let tf = SimilarityTransform::from_params(params);
        let Ok(r) = rot6d_to_matrix(&tf.rot6d) else {
            return f64::INFINITY;
        };
        let parts: Vec<f64> = self
            .terms
            .par_iter()
            .map(|t| match project_normalized(&self.cameras[t.view], &tf.apply_with(&r, &t.point)) {
                Ok(p) => (t.target - p).norm_squared(),
                Err(_) => f64::INFINITY,
            })
            .collect();
        tree_sum(&parts)
    }

    /// Objective value and its gradient with respect to `(s, c1, c2, t)`.
    pub fn loss_and_gradient(&self, params: &[f64; 12]) -> Result<(f64, [f64; 12]), AdaptationError> {
        let tf = SimilarityTransform::from_params(params);
        let r = rot6d_to_matrix(&tf.rot6d)?;
        let s = Vector3::from(tf.scale);
        // per term: loss, d/ds (3), d/dR (9, column-major), d/dt (3)
        let parts: Vec<[f64; 16]> = self
            .terms
            .par_iter()
            .map(|t| {
                let cam = &self.cameras[t.view];
                let sp = s.component_mul(&t.point);
                let x = r * sp + Vector3::from(tf.translation);
                let kr = cam.k() * cam.r();
                let u = kr * x + cam.k() * cam.t();
                if cam.to_camera(&x).z <= MIN_DEPTH {
                    let mut out = [0.0; 16];
                    out[0] = f64::INFINITY;
                    return out;
                }
                let (w, h) = (cam.width() as f64, cam.height() as f64);
                let n = Vector2::new(u.x / u.z / w, u.y / u.z / h);
                let res = t.target - n;
                let jn = Matrix2x3::new(
                    1.0 / (w * u.z),
                    0.0,
                    -u.x / (w * u.z * u.z),
                    0.0,
                    1.0 / (h * u.z),
                    -u.y / (h * u.z * u.z),
                );
                let g_x = (jn * kr).transpose() * (-2.0 * res);
                let g_r = g_x * sp.transpose();
                let g_s = (r.transpose() * g_x).component_mul(&t.point);
                let mut out = [0.0; 16];
                out[0] = res.norm_squared();
                out[1..4].copy_from_slice(g_s.as_slice());
                out[4..13].copy_from_slice(g_r.as_slice());
                out[13..16].copy_from_slice(g_x.as_slice());
                out
            })
            .collect();
        let total: Vec<f64> = (0..16).map(|k| tree_sum(&parts.iter().map(|p| p[k]).collect::<Vec<_>>())).collect();
        let g_r = Matrix3::from_column_slice(&total[4..13]);
        let g6 = rot6d_backward(&tf.rot6d, &g_r);
        let mut grad = [0.0; 12];
        grad[..3].copy_from_slice(&total[1..4]);
        grad[3..9].copy_from_slice(&g6);
        grad[9..].copy_from_slice(&total[13..16]);
        Ok((total[0], grad))
    }
}

/// Pairwise summation in a fixed tree order.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => tree_sum(&values[..n / 2]) + tree_sum(&values[n / 2..]),
    }
}

/// Pulls a gradient with respect to the rotation matrix back onto the 6D
/// parameters through Gram-Schmidt.
fn rot6d_backward(rot6d: &[f64; 6], g: &Matrix3<f64>) -> [f64; 6] {
    let a1 = Vector3::new(rot6d[0], rot6d[1], rot6d[2]);
    let a2 = Vector3::new(rot6d[3], rot6d[4], rot6d[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u2 = a2 - b1.dot(&a2) * b1;
    let n2 = u2.norm();
    let b2 = u2 / n2;
    let (g1, g2, g3) = (g.column(0).into_owned(), g.column(1).into_owned(), g.column(2).into_owned());
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= b1.dot(&a2) * gu2 + b1.dot(&gu2) * a2;
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}

/// Gradient descent settings shared by the fitting routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub initial_step: f64,
    /// Step multiplier after an accepted step; 1 keeps the step fixed.
    pub growth: f64,
    /// Propose each step from the last two iterates (Barzilai-Borwein)
    /// instead of growing the previous one. Backtracking still applies.
    pub two_point_step: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { max_iterations: 5000, gradient_tolerance: 1e-8, initial_step: 1.0, growth: 1.0, two_point_step: false }
    }
}

/// Result of [`descend`].
#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome<const P: usize> {
    pub params: [f64; P],
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss after every accepted step, starting with the initial loss.
    pub history: Vec<f64>,
}

/// Gradient descent with backtracking: a step that raises the loss is
/// halved and retried, so accepted losses never increase.
pub fn descend<const P: usize>(
    start: [f64; P],
    config: &DescentConfig,
    mut eval: impl FnMut(&[f64; P]) -> Option<(f64, [f64; P])>,
    mut loss_only: impl FnMut(&[f64; P]) -> f64,
) -> DescentOutcome<P> {
    let mut x = start;
    let (mut loss, mut grad) = eval(&x).unwrap_or((f64::INFINITY, [0.0; P]));
    let mut history = vec![loss];
    let mut step = config.initial_step;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < config.gradient_tolerance {
            converged = true;
            break;
        }
        if !loss.is_finite() || step < 1e-300 {
            break;
        }
        iterations += 1;
        let mut trial = x;
        for (t, g) in trial.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        let trial_loss = loss_only(&trial);
        if trial_loss <= loss {
            match eval(&trial) {
                Some((l, g)) => {
                    let (mut ss, mut sy) = (0.0, 0.0);
                    for i in 0..P {
                        let dx = trial[i] - x[i];
                        ss += dx * dx;
                        sy += dx * (g[i] - grad[i]);
                    }
                    x = trial;
                    loss = l;
                    grad = g;
                    history.push(loss);
                    step = if config.two_point_step && sy > 0.0 { ss / sy } else { step * config.growth };
                }
                None => step *= 0.5,
            }
        } else {
            step *= 0.5;
        }
    }
    DescentOutcome { params: x, loss, iterations, converged, history }
}

/// Optimizer settings for [`fit_transform`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub descent: DescentConfig,
    pub self_stride: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            descent: DescentConfig { initial_step: 1e-2, two_point_step: true, ..DescentConfig::default() },
            self_stride: DEFAULT_SELF_STRIDE,
        }
    }
}

/// Fits the similarity transform aligning the monocular mesh with the rig.
pub fn fit_transform(
    matches: &MatchSet,
    raster: &RasterMap,
    mesh: &Mesh,
    rig: &Rig,
    config: &FitConfig,
) -> Result<AdaptationResult, AdaptationError> {
    let problem = AdaptationProblem::new(matches, raster, mesh, rig, config.self_stride)?;
    Ok(fit_problem(&problem, &config.descent))
}

/// Runs the optimizer on an already resolved problem.
pub fn fit_problem(problem: &AdaptationProblem, config: &DescentConfig) -> AdaptationResult {
    let start = problem.initial_transform().to_params();
    let out = descend(start, config, |p| problem.loss_and_gradient(p).ok(), |p| problem.loss(p));
    AdaptationResult {
        transform: SimilarityTransform::from_params(&out.params),
        final_loss: out.loss,
        iterations: out.iterations,
        converged: out.converged,
    }
}

/// Settings for [`fit_frontal_camera`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontalFitConfig {
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    /// Starting eye position; `None` starts `initial_distance` in front of
    /// the pelvis along +z.
    pub initial_eye: Option<Vector3<f64>>,
    pub initial_distance: f64,
    pub descent: DescentConfig,
    pub finite_difference_step: f64,
}

impl Default for FrontalFitConfig {
    fn default() -> Self {
        Self {
            fov: 0.5,
            width: 1024,
            height: 1024,
            initial_eye: None,
            initial_distance: 3.0,
            descent: DescentConfig {
                initial_step: 1e-4,
                gradient_tolerance: 1e-10,
                two_point_step: true,
                ..DescentConfig::default()
            },
            finite_difference_step: 1e-6,
        }
    }
}

const WORLD_UP: Vector3<f64> = Vector3::new(0.0, 1.0, 0.0);

/// Finds the eye position of a fixed-FoV camera aimed at the pelvis that
/// best reproduces the 2D keypoints (mean squared pixel error).
pub fn fit_frontal_camera(
    keypoints_3d: &[Vector3<f64>],
    keypoints_2d: &[Vector2<f64>],
    pelvis: &Vector3<f64>,
    config: &FrontalFitConfig,
) -> Result<Camera, AdaptationError> {
    if keypoints_3d.len() != keypoints_2d.len() {
        return Err(AdaptationError::InvalidArgument("3D and 2D keypoint counts differ".into()));
    }
    if keypoints_3d.len() < 4 {
        return Err(AdaptationError::TooFewKeypoints(keypoints_3d.len()));
    }
    let start = config.initial_eye.unwrap_or(pelvis + Vector3::new(0.0, 0.0, config.initial_distance));
    let camera_at = |eye: &[f64; 3]| {
        Camera::look_at(Vector3::from(*eye), *pelvis, WORLD_UP, config.fov, config.width, config.height)
    };
    camera_at(&start.into()).map_err(geometry_err)?;
    let loss = |eye: &[f64; 3]| -> f64 {
        let Ok(cam) = camera_at(eye) else {
            return f64::INFINITY;
        };
        let mut sum = 0.0;
        for (p3, p2) in keypoints_3d.iter().zip(keypoints_2d) {
            match cam.project_point(p3) {
                Ok(p) => sum += (p - p2).norm_squared(),
                Err(_) => return f64::INFINITY,
            }
        }
        sum / keypoints_3d.len() as f64
    };
    let h = config.finite_difference_step;
    let eval = |eye: &[f64; 3]| {
        let l = loss(eye);
        if !l.is_finite() {
            return None;
        }
        let mut g = [0.0; 3];
        for i in 0..3 {
            let (mut a, mut b) = (*eye, *eye);
            a[i] += h;
            b[i] -= h;
            g[i] = (loss(&a) - loss(&b)) / (2.0 * h);
        }
        g.iter().all(|v| v.is_finite()).then_some((l, g))
    };
    let out = descend(start.into(), &config.descent, eval, loss);
    camera_at(&out.params).map_err(geometry_err)
}

/// `n` cameras evenly spaced in azimuth on a circle around the pelvis, all
/// aimed at it. Camera 0 sits on the +z side.
pub fn sample_orbit_cameras(
    pelvis: &Vector3<f64>,
    distance: f64,
    elevation: f64,
    fov: f64,
    n: usize,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>, AdaptationError> {
    if n == 0 || !(distance > 0.0) {
        return Err(AdaptationError::InvalidArgument("orbit needs n >= 1 and a positive distance".into()));
    }
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64;
            let dir = Vector3::new(elevation.cos() * az.sin(), elevation.sin(), elevation.cos() * az.cos());
            Camera::look_at(pelvis + distance * dir, *pelvis, WORLD_UP, fov, width, height).map_err(geometry_err)
        })
        .collect()
}

/// Joint hierarchy for pose perturbation: `parents[j]` is `None` for roots.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTree {
    pub parents: Vec<Option<usize>>,
    pub is_hand: Vec<bool>,
}

/// Noise levels used for pose-robustness experiments.
pub const MAIN_JOINT_SIGMA: f64 = 0.06;
pub const HAND_JOINT_SIGMA: f64 = 0.2;

/// Rotates every joint's subtree by a random axis-angle rotation about the
/// joint's parent, with per-component Gaussian noise of `sigma_main` or
/// `sigma_hand`. Parents must precede their children.
pub fn perturb_joints(
    tree: &JointTree,
    positions: &[Vector3<f64>],
    sigma_main: f64,
    sigma_hand: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vector3<f64>>, AdaptationError> {
    let n = positions.len();
    if tree.parents.len() != n || tree.is_hand.len() != n {
        return Err(AdaptationError::InvalidArgument("joint tree size differs from joint count".into()));
    }
    if tree.parents.iter().enumerate().any(|(j, p)| p.is_some_and(|p| p >= j)) {
        return Err(AdaptationError::InvalidArgument("parents must precede their children".into()));
    }
    let main = Normal::new(0.0, sigma_main).map_err(|e| AdaptationError::InvalidArgument(e.to_string()))?;
    let hand = Normal::new(0.0, sigma_hand).map_err(|e| AdaptationError::InvalidArgument(e.to_string()))?;
    let mut global = vec![Matrix3::identity(); n];
    let mut out = positions.to_vec();
    for j in 0..n {
        let dist = if tree.is_hand[j] { &hand } else { &main };
        let aa = Vector3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng));
        let local = nalgebra::Rotation3::new(aa).into_inner();
        match tree.parents[j] {
            None => global[j] = local,
            Some(p) => {
                out[j] = out[p] + global[p] * (positions[j] - positions[p]);
                global[j] = global[p] * local;
            }
        }
    }
    Ok(out)
}

/// Mean per-joint position error.
pub fn mpjpe(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len().max(1) as f64
}
