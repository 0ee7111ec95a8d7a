//! Pelvis-centered square crops and keypoint conditioning images.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::ScaleFeatures;
use crate::geometry::{Camera, GeometryError};

/// Crop radius as a multiple of the largest vertical keypoint offset.
pub const CROP_MARGIN: f64 = 1.3;
/// Skeleton drawing: joint disc radius and bone width, in pixels.
pub const JOINT_RADIUS: f64 = 4.0;
pub const BONE_WIDTH: f64 = 2.0;
/// Joint colors, cycled by joint index.
pub const JOINT_COLORS: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0],
    [0.5, 0.0, 1.0],
    [1.0, 0.0, 1.0],
];

#[derive(Debug, Error)]
pub enum DataprepError {
    #[error("keypoints have no vertical extent around the pelvis")]
    ZeroExtent,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Square crop window of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub view: i64,
    pub center: [f64; 2],
    pub radius: f64,
    pub output_size: u32,
}

impl CropSpec {
    pub fn new(view: i64, center: [f64; 2], radius: f64, output_size: u32) -> Result<Self, DataprepError> {
        if !(radius > 0.0 && radius.is_finite()) || output_size == 0 || !center.iter().all(|c| c.is_finite()) {
            return Err(DataprepError::InvalidArgument("crop needs a positive radius and output size".into()));
        }
        Ok(Self { view, center, radius, output_size })
    }

    /// Top-left corner of the window in source pixels.
    pub fn origin(&self) -> Vector2<f64> {
        Vector2::new(self.center[0] - self.radius, self.center[1] - self.radius)
    }

    /// Source-to-output pixel scale.
    pub fn scale(&self) -> f64 {
        self.output_size as f64 / (2.0 * self.radius)
    }
}

/// Crop centered on the projected pelvis with radius `1.3 * max |dy|` over
/// the keypoints.
pub fn compute_crop(
    view: i64,
    camera: &Camera,
    keypoints: &[Vector3<f64>],
    pelvis: &Vector3<f64>,
    output_size: u32,
) -> Result<CropSpec, DataprepError> {
    if keypoints.is_empty() {
        return Err(DataprepError::InvalidArgument("no keypoints".into()));
    }
    let c = camera.project_point(pelvis)?;
    let mut extent = 0.0f64;
    for k in keypoints {
        extent = extent.max((camera.project_point(k)?.y - c.y).abs());
    }
    if extent < 1e-9 {
        return Err(DataprepError::ZeroExtent);
    }
    CropSpec::new(view, [c.x, c.y], CROP_MARGIN * extent, output_size)
}

/// The camera of the cropped and resized image.
pub fn apply_crop_to_intrinsics(camera: &Camera, crop: &CropSpec) -> Result<Camera, DataprepError> {
    let s = crop.scale();
    let o = crop.origin();
    let window = Matrix3::new(s, 0.0, -o.x * s, 0.0, s, -o.y * s, 0.0, 0.0, 1.0);
    Ok(camera.with_intrinsics(window * camera.k(), crop.output_size, crop.output_size)?)
}

/// A keypoint as seen by one camera. `pixel` is `None` behind the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectedKeypoint {
    pub pixel: Option<[f64; 2]>,
    pub visible: bool,
}

/// Every keypoint in every camera; visible means in front and inside the image.
pub fn project_keypoints(cameras: &[Camera], keypoints: &[Vector3<f64>]) -> Vec<Vec<ProjectedKeypoint>> {
    cameras
        .par_iter()
        .map(|cam| {
            keypoints
                .iter()
                .map(|k| match cam.project_point(k) {
                    Ok(p) => ProjectedKeypoint {
                        pixel: Some([p.x, p.y]),
                        visible: p.x >= 0.0 && p.y >= 0.0 && p.x < cam.width() as f64 && p.y < cam.height() as f64,
                    },
                    Err(_) => ProjectedKeypoint { pixel: None, visible: false },
                })
                .collect()
        })
        .collect()
}

/// Keypoints file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointsFile {
    pub joints: Vec<[f64; 3]>,
    pub pelvis_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    /// Joint index pairs drawn as bones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bones: Option<Vec<[usize; 2]>>,
}

impl KeypointsFile {
    pub fn from_json_str(s: &str) -> Result<Self, DataprepError> {
        let k: KeypointsFile = serde_json::from_str(s)?;
        let n = k.joints.len();
        if k.pelvis_index >= n {
            return Err(DataprepError::InvalidArgument(format!("pelvis_index {} out of {n} joints", k.pelvis_index)));
        }
        if k.names.as_ref().is_some_and(|names| names.len() != n) {
            return Err(DataprepError::InvalidArgument("names must match joints".into()));
        }
        if k.bones.iter().flatten().any(|b| b[0] >= n || b[1] >= n) {
            return Err(DataprepError::InvalidArgument("bone refers to a missing joint".into()));
        }
        if k.joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataprepError::InvalidArgument("non-finite joint coordinate".into()));
        }
        Ok(k)
    }

    pub fn load(path: &Path) -> Result<Self, DataprepError> {
        let s = std::fs::read_to_string(path)
            .map_err(|source| DataprepError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("keypoints serialize")
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|j| Vector3::from(*j)).collect()
    }

    pub fn pelvis(&self) -> Vector3<f64> {
        Vector3::from(self.joints[self.pelvis_index])
    }
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + t * ab)).norm()
}

/// Draws visible joints as discs and bones between visible joints as
/// segments on a black `[3, height, width]` image in `[0, 1]`.
pub fn render_skeleton(keypoints: &[ProjectedKeypoint], bones: &[[usize; 2]], width: usize, height: usize) -> ScaleFeatures {
    let mut img = ScaleFeatures::zeros(3, height, width);
    let plane = width * height;
    let visible = |j: usize| keypoints.get(j).filter(|k| k.visible).and_then(|k| k.pixel).map(|p| Vector2::new(p[0], p[1]));
    let mut paint = |pred: &dyn Fn(Vector2<f64>) -> bool, color: [f32; 3], lo: Vector2<f64>, hi: Vector2<f64>| {
        let x0 = lo.x.floor().max(0.0) as usize;
        let y0 = lo.y.floor().max(0.0) as usize;
        let x1 = (hi.x.ceil().max(0.0) as usize).min(width);
        let y1 = (hi.y.ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if pred(Vector2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    for (c, v) in color.iter().enumerate() {
                        img.data[c * plane + y * width + x] = *v;
                    }
                }
            }
        }
    };
    let half = 0.5 * BONE_WIDTH;
    for &[a, b] in bones {
        if let (Some(pa), Some(pb)) = (visible(a), visible(b)) {
            let pad = Vector2::repeat(half + 1.0);
            let color = JOINT_COLORS[b % JOINT_COLORS.len()];
            paint(&|p| segment_distance(p, pa, pb) <= half, color, pa.inf(&pb) - pad, pa.sup(&pb) + pad);
        }
    }
    for j in 0..keypoints.len() {
        if let Some(c) = visible(j) {
            let pad = Vector2::repeat(JOINT_RADIUS + 1.0);
            paint(&|p| (p - c).norm() <= JOINT_RADIUS, JOINT_COLORS[j % JOINT_COLORS.len()], c - pad, c + pad);
        }
    }
    img
}
