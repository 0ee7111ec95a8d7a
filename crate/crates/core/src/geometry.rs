//! Pinhole cameras, similarity transforms, the 6D rotation parameterization and
//! harmonic pose embeddings.
//!
//! Conventions used throughout the crate:
//!
//! - world to camera is `P_cam = R * P + T` (OpenCV style: x right, y down,
//!   z forward);
//! - pixel origin is the top-left image corner and pixel `(i, j)` has its
//!   center at `(i + 0.5, j + 0.5)`;
//! - all geometry is `f64`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point counts as behind (or on) the image plane.
pub const MIN_DEPTH: f64 = 1e-12;

const ORTHONORMAL_TOL: f64 = 1e-6;
const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth {0:e}")]
    NonPositiveDepth(f64),
    #[error("degenerate rot6d input")]
    DegenerateRotation,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid similarity transform: {0}")]
    InvalidTransform(String),
    #[error("viewing direction is parallel to the up vector")]
    DegenerateUp,
    #[error("rig error: {0}")]
    Rig(String),
}

/// A calibrated perspective camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: u32,
    height: u32,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be at least 1x1".into()));
        }
        if k.iter().chain(r.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite entry".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidCamera(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self { k, r, t, width, height })
    }

    /// Intrinsics from focal lengths and principal point, no skew.
    pub fn from_parts(
        focal: (f64, f64),
        principal: (f64, f64),
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(focal.0, 0.0, principal.0, 0.0, focal.1, principal.1, 0.0, 0.0, 1.0);
        Self::new(k, r, t, width, height)
    }

    /// Camera at `eye` looking at `target`, with the image "up" following `up`.
    ///
    /// The focal length is derived from a horizontal field of view and the
    /// principal point sits at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fov > 0.0 && fov < PI) {
            return Err(GeometryError::InvalidCamera(format!("field of view {fov} out of (0, pi)")));
        }
        let r = look_at_rotation(eye, target, up)?;
        let f = 0.5 * width as f64 / (0.5 * fov).tan();
        let t = -(r * eye);
        Self::from_parts((f, f), (0.5 * width as f64, 0.5 * height as f64), r, t, width, height)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn t(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.k[(0, 0)], self.k[(1, 1)])
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.k[(0, 2)], self.k[(1, 2)])
    }

    /// World point to camera frame.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.r * point + self.t
    }

    /// `[K (R P + T)]_xy` after the homogeneous division.
    pub fn project_point(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let cam = self.to_camera(point);
        if !(cam.z > MIN_DEPTH) {
            return Err(GeometryError::NonPositiveDepth(cam.z));
        }
        let h = self.k * cam;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Optical center in world coordinates, `-R^T T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// World-space direction (not normalized) of the ray through a continuous
    /// pixel position. Its camera-frame z component is exactly 1 before the
    /// rotation, so a ray parameter equals the camera-frame depth.
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let skew = self.k[(0, 1)];
        let y = (pixel.y - cy) / fy;
        let x = (pixel.x - cx - skew * y) / fx;
        self.r.transpose() * Vector3::new(x, y, 1.0)
    }

    /// Same pose, intrinsics rescaled so that pixel coordinates map onto
    /// `[-1, 1]^2` via `x_ndc = (2x - W) / W`.
    pub fn normalize_to_ndc(&self) -> NdcCamera {
        let sx = 2.0 / self.width as f64;
        let sy = 2.0 / self.height as f64;
        let mut k = self.k;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] = k[(0, 2)] * sx - 1.0;
        k[(1, 1)] *= sy;
        k[(1, 2)] = k[(1, 2)] * sy - 1.0;
        NdcCamera { k, r: self.r, t: self.t }
    }

    /// Pixel coordinates to NDC for this camera's image size.
    pub fn pixel_to_ndc(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let w = self.width as f64;
        let h = self.height as f64;
        Vector2::new((2.0 * pixel.x - w) / w, (2.0 * pixel.y - h) / h)
    }

    pub(crate) fn with_intrinsics(&self, k: Matrix3<f64>, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(k, self.r, self.t, width, height)
    }
}

/// Camera whose intrinsics produce NDC coordinates instead of pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NdcCamera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl NdcCamera {
    pub fn project_point(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let cam = self.r * point + self.t;
        if !(cam.z > MIN_DEPTH) {
            return Err(GeometryError::NonPositiveDepth(cam.z));
        }
        let h = self.k * cam;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }
}

/// World-to-camera rotation for a camera at `eye` looking at `target`.
///
/// Rows are the camera x (right), y (down) and z (forward) axes expressed in
/// world coordinates.
pub fn look_at_rotation(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
) -> Result<Matrix3<f64>, GeometryError> {
    let forward = target - eye;
    let norm = forward.norm();
    if !(norm > DEGENERATE_TOL) {
        return Err(GeometryError::InvalidCamera("eye coincides with target".into()));
    }
    let z = forward / norm;
    let x = z.cross(&up);
    let xn = x.norm();
    if xn < DEGENERATE_TOL * up.norm().max(1.0) {
        return Err(GeometryError::DegenerateUp);
    }
    let x = x / xn;
    let y = z.cross(&x);
    Ok(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

/// Gram-Schmidt orthonormalization of two 3-vectors into a rotation whose
/// columns are `b1`, `b2`, `b1 x b2`.
pub fn rot6d_to_matrix(rot6d: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a1 = Vector3::new(rot6d[0], rot6d[1], rot6d[2]);
    let a2 = Vector3::new(rot6d[3], rot6d[4], rot6d[5]);
    let n1 = a1.norm();
    if !(n1 >= DEGENERATE_TOL) {
        return Err(GeometryError::DegenerateRotation);
    }
    let b1 = a1 / n1;
    if !(b1.cross(&a2).norm() >= DEGENERATE_TOL) {
        return Err(GeometryError::DegenerateRotation);
    }
    let u2 = a2 - b1.dot(&a2) * b1;
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// The first two columns of a rotation, which `rot6d_to_matrix` maps back
/// onto the same rotation.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Per-axis scale, then rotation, then translation: `TF(P) = R (S P) + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: [f64; 3],
    pub rot6d: [f64; 6],
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub fn new(scale: [f64; 3], rot6d: [f64; 6], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let tf = Self { scale, rot6d, translation };
        tf.validate()?;
        Ok(tf)
    }

    pub fn identity() -> Self {
        Self { scale: [1.0; 3], rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], translation: [0.0; 3] }
    }

    pub fn from_rotation(scale: [f64; 3], rotation: &Matrix3<f64>, translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(scale, matrix_to_rot6d(rotation), translation)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GeometryError::InvalidTransform("scale components must be positive".into()));
        }
        if self.translation.iter().chain(self.rot6d.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite parameter".into()));
        }
        rot6d_to_matrix(&self.rot6d).map(|_| ())
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>, GeometryError> {
        rot6d_to_matrix(&self.rot6d)
    }

    pub fn apply(&self, point: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
        let r = self.rotation()?;
        Ok(self.apply_with(&r, point))
    }

    pub(crate) fn apply_with(&self, rotation: &Matrix3<f64>, point: &Vector3<f64>) -> Vector3<f64> {
        let scaled = Vector3::new(point.x * self.scale[0], point.y * self.scale[1], point.z * self.scale[2]);
        rotation * scaled + Vector3::from(self.translation)
    }

    /// Flat 12-scalar parameter vector `(s, c1, c2, t)`.
    pub fn to_params(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        p[..3].copy_from_slice(&self.scale);
        p[3..9].copy_from_slice(&self.rot6d);
        p[9..].copy_from_slice(&self.translation);
        p
    }

    pub fn from_params(p: &[f64; 12]) -> Self {
        Self {
            scale: [p[0], p[1], p[2]],
            rot6d: [p[3], p[4], p[5], p[6], p[7], p[8]],
            translation: [p[9], p[10], p[11]],
        }
    }
}

/// Harmonic embedding of a small vector of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbedding {
    values: Vec<f64>,
}

impl ViewEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }

    /// Wraps raw values; used when embeddings come from outside the harmonic
    /// encoder (for example a constant placeholder in tests).
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// `[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`, with
/// each group holding all `k` inputs. Output length is `(2L + 1) k`.
pub fn harmonic_embed(values: &[f64], bands: usize) -> ViewEmbedding {
    let bands = bands.max(1);
    let mut out = Vec::with_capacity((2 * bands + 1) * values.len());
    out.extend_from_slice(values);
    let mut freq = 1.0;
    for _ in 0..bands {
        out.extend(values.iter().map(|v| (freq * v).sin()));
        out.extend(values.iter().map(|v| (freq * v).cos()));
        freq *= 2.0;
    }
    ViewEmbedding { values: out }
}

pub const DEFAULT_EMBED_BANDS: usize = 4;

/// `(azimuth, elevation, ln distance)` of the camera center around `origin`.
///
/// Azimuth is measured in the x-z plane from +z towards +x; elevation is the
/// angle above that plane (towards +y).
pub fn camera_pose_scalars(camera: &Camera, origin: &Vector3<f64>) -> [f64; 3] {
    let rel = camera.center() - origin;
    let dist = rel.norm().max(MIN_DEPTH);
    let azimuth = rel.x.atan2(rel.z);
    let elevation = (rel.y / dist).clamp(-1.0, 1.0).asin();
    [azimuth, elevation, dist.ln()]
}

pub fn camera_pose_embedding(camera: &Camera, origin: &Vector3<f64>, bands: usize) -> ViewEmbedding {
    harmonic_embed(&camera_pose_scalars(camera, origin), bands)
}

/// Ordered set of cameras with user-facing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    ids: Vec<i64>,
    cameras: Vec<Camera>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    views: Vec<RigViewFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RigViewFile {
    id: i64,
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    #[serde(rename = "T")]
    t: [f64; 3],
    width: u32,
    height: u32,
}

fn rows_to_matrix(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| rows[i][j])
}

fn matrix_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl Rig {
    pub fn new(ids: Vec<i64>, cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        if ids.len() != cameras.len() {
            return Err(GeometryError::Rig("id count differs from camera count".into()));
        }
        if cameras.is_empty() {
            return Err(GeometryError::Rig("rig has no views".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeometryError::Rig("duplicate view id".into()));
        }
        Ok(Self { ids, cameras })
    }

    /// Rig with ids `0..n` in order.
    pub fn from_cameras(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        let ids = (0..cameras.len() as i64).collect();
        Self::new(ids, cameras)
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.ids.iter().position(|v| *v == id)
    }

    pub fn camera(&self, id: i64) -> Option<&Camera> {
        self.index_of(id).map(|i| &self.cameras[i])
    }

    pub fn from_json_str(s: &str) -> Result<Self, GeometryError> {
        let file: RigFile = serde_json::from_str(s).map_err(|e| GeometryError::Rig(e.to_string()))?;
        let mut ids = Vec::with_capacity(file.views.len());
        let mut cameras = Vec::with_capacity(file.views.len());
        for v in file.views {
            let cam = Camera::new(rows_to_matrix(&v.k), rows_to_matrix(&v.r), Vector3::from(v.t), v.width, v.height)
                .map_err(|e| GeometryError::Rig(format!("view {}: {e}", v.id)))?;
            ids.push(v.id);
            cameras.push(cam);
        }
        Self::new(ids, cameras)
    }

    pub fn to_json_string(&self) -> String {
        let views = self
            .ids
            .iter()
            .zip(&self.cameras)
            .map(|(id, c)| RigViewFile {
                id: *id,
                k: matrix_to_rows(&c.k),
                r: matrix_to_rows(&c.r),
                t: [c.t.x, c.t.y, c.t.z],
                width: c.width,
                height: c.height,
            })
            .collect();
        serde_json::to_string_pretty(&RigFile { views }).expect("rig serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let s = std::fs::read_to_string(path).map_err(|e| GeometryError::Rig(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s).map_err(|e| GeometryError::Rig(format!("{}: {e}", path.display())))
    }
}
