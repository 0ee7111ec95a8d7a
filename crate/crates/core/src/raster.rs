//! CPU ray-cast rasterization of triangle meshes and aggregation of
//! high-resolution hits down to feature-map resolution.
//!
//! Every raster pixel shoots one ray through its center. The nearest hit
//! (smallest positive depth) wins; hits within [`DEPTH_TIE_EPS`] of each other
//! resolve to the lower face index. Back faces are not culled.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, MIN_DEPTH};
use crate::tensor_io::{Tensor, TensorError};

pub const DEPTH_TIE_EPS: f64 = 1e-9;
pub const MIN_FACE_AREA: f64 = 1e-12;
pub const BARY_SUM_TOL: f64 = 1e-6;

/// Default ratio between raster resolution and the largest feature resolution.
pub const DEFAULT_RASTER_FACTOR: u32 = 8;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("face index {0} out of range")]
    FaceOutOfRange(i64),
    #[error("barycentric weights sum to {0}, expected 1")]
    InvalidBary(f64),
    #[error("raster {raster_w}x{raster_h} is not an integer multiple of feature map {feature_w}x{feature_h}")]
    NonDivisibleResolution { raster_w: usize, raster_h: usize, feature_w: usize, feature_h: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("obj parse error at line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Triangle mesh with 0-based face indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
}

/// Counters collected while reading an OBJ file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ObjStats {
    pub vertices: usize,
    pub faces: usize,
    /// Lines of any other type (normals, texture coordinates, groups, ...).
    pub ignored_lines: usize,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self, RasterError> {
        if let Some(v) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(RasterError::InvalidMesh(format!("vertex {v} is not finite")));
        }
        let n = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&idx| idx as usize >= n) {
                return Err(RasterError::InvalidMesh(format!("face {i} references a missing vertex")));
            }
            let [a, b, c] = f.map(|idx| vertices[idx as usize]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if !(area > MIN_FACE_AREA) {
                return Err(RasterError::InvalidMesh(format!("face {i} is degenerate (area {area:e})")));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_vertices(&self, face: usize) -> [Vector3<f64>; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    pub fn transformed(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Result<Self, RasterError> {
        Self::new(self.vertices.iter().map(f).collect(), self.faces.clone())
    }

    /// Parses the `v x y z` / `f i j k` subset of Wavefront OBJ. Face entries
    /// may carry `/vt/vn` suffixes, which are dropped; negative (relative)
    /// indices are resolved against the vertices read so far.
    pub fn from_obj_str(src: &str) -> Result<(Self, ObjStats), RasterError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut stats = ObjStats::default();
        for (lineno, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let err = |msg: String| RasterError::Obj { line: lineno + 1, msg };
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if coords.len() != 3 {
                        return Err(err("vertex needs three coordinates".into()));
                    }
                    vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|e| err(format!("bad face index {t:?}: {e}")))?;
                            let resolved = match i {
                                0 => return Err(err("face indices are 1-based".into())),
                                i if i > 0 => i - 1,
                                i => vertices.len() as i64 + i,
                            };
                            u32::try_from(resolved).map_err(|_| err(format!("face index {i} out of range")))
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() != 3 {
                        return Err(err(format!("only triangles are supported, got {} indices", idx.len())));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => stats.ignored_lines += 1,
            }
        }
        stats.vertices = vertices.len();
        stats.faces = faces.len();
        Ok((Self::new(vertices, faces)?, stats))
    }

    pub fn load_obj(path: &Path) -> Result<(Self, ObjStats), RasterError> {
        Self::from_obj_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for f in &self.faces {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        s
    }
}

/// Parallel-ray frontal camera of the kind monocular reconstruction uses:
/// rays travel along -z, image x follows world +x and image y follows world -y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthographicCamera {
    /// World (x, y) seen at the image center.
    pub center: Vector2<f64>,
    /// Half the world-space width covered by the image.
    pub half_extent: f64,
    pub width: u32,
    pub height: u32,
}

impl OrthographicCamera {
    fn pixels_per_unit(&self) -> f64 {
        0.5 * self.width as f64 / self.half_extent
    }

    /// Image position (in this camera's pixels) of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let s = self.pixels_per_unit();
        Vector2::new(
            (p.x - self.center.x) * s + 0.5 * self.width as f64,
            -(p.y - self.center.y) * s + 0.5 * self.height as f64,
        )
    }

    pub fn unproject_xy(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let s = self.pixels_per_unit();
        Vector2::new(
            (pixel.x - 0.5 * self.width as f64) / s + self.center.x,
            -(pixel.y - 0.5 * self.height as f64) / s + self.center.y,
        )
    }
}

/// Per-pixel rasterization result.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    face_index: Vec<i32>,
    bary: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl RasterMap {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, mask: vec![false; n], face_index: vec![-1; n], bary: vec![[0.0; 3]; n], depth: vec![0.0; n] }
    }

    /// Builds a raster from raw parts, checking the per-pixel invariants.
    pub fn from_parts(
        width: usize,
        height: usize,
        mask: Vec<bool>,
        face_index: Vec<i32>,
        bary: Vec<[f64; 3]>,
        depth: Vec<f64>,
    ) -> Result<Self, RasterError> {
        let n = width * height;
        if mask.len() != n || face_index.len() != n || bary.len() != n || depth.len() != n {
            return Err(RasterError::InvalidRaster("buffer length does not match dimensions".into()));
        }
        for i in 0..n {
            if mask[i] {
                let b = bary[i];
                let sum: f64 = b.iter().sum();
                if face_index[i] < 0 || b.iter().any(|x| *x < -1e-9) || (sum - 1.0).abs() > BARY_SUM_TOL || !(depth[i] > 0.0) {
                    return Err(RasterError::InvalidRaster(format!("pixel {i} has an invalid hit record")));
                }
            } else if face_index[i] != -1 || bary[i] != [0.0; 3] {
                return Err(RasterError::InvalidRaster(format!("pixel {i} is unmasked but carries a hit")));
            }
        }
        Ok(Self { width, height, mask, face_index, bary, depth })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn face_index(&self) -> &[i32] {
        &self.face_index
    }

    pub fn bary(&self) -> &[[f64; 3]] {
        &self.bary
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn hit(&self, x: usize, y: usize) -> Option<(usize, [f64; 3])> {
        let i = y * self.width + x;
        self.mask[i].then(|| (self.face_index[i] as usize, self.bary[i]))
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Writes `mask.mtnsr` (u8 [H, W]), `face.mtnsr` (i32 [H, W]),
    /// `bary.mtnsr` (f64 [H, W, 3]) and `depth.mtnsr` (f64 [H, W]).
    pub fn save_dir(&self, dir: &Path) -> Result<(), RasterError> {
        std::fs::create_dir_all(dir)?;
        let (h, w) = (self.height, self.width);
        Tensor::u8(vec![h, w], self.mask.iter().map(|m| *m as u8).collect())?.save(&dir.join("mask.mtnsr"))?;
        Tensor::i32(vec![h, w], self.face_index.clone())?.save(&dir.join("face.mtnsr"))?;
        Tensor::f64(vec![h, w, 3], self.bary.iter().flatten().copied().collect())?.save(&dir.join("bary.mtnsr"))?;
        Tensor::f64(vec![h, w], self.depth.clone())?.save(&dir.join("depth.mtnsr"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, RasterError> {
        let mask = Tensor::load(&dir.join("mask.mtnsr"))?;
        let dims = mask.dims().to_vec();
        if dims.len() != 2 {
            return Err(RasterError::InvalidRaster("mask must be rank 2".into()));
        }
        let (h, w) = (dims[0], dims[1]);
        let face = Tensor::load(&dir.join("face.mtnsr"))?;
        face.expect_dims(&[h, w])?;
        let bary = Tensor::load(&dir.join("bary.mtnsr"))?;
        bary.expect_dims(&[h, w, 3])?;
        let depth = Tensor::load(&dir.join("depth.mtnsr"))?;
        depth.expect_dims(&[h, w])?;
        Self::from_parts(
            w,
            h,
            mask.into_u8()?.into_iter().map(|m| m != 0).collect(),
            face.into_i32()?,
            bary.into_f64()?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            depth.into_f64()?,
        )
    }
}

/// Möller-Trumbore ray/triangle test without back-face culling. Returns the
/// ray parameter and the barycentric weights of `(a, b, c)`.
pub fn intersect_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    tri: &[Vector3<f64>; 3],
) -> Option<(f64, [f64; 3])> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - tri[0];
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    Some((t, [1.0 - u - v, u, v]))
}

trait RayModel: Sync {
    /// Ray through a continuous raster position; the parameter along the ray
    /// is the reported depth.
    fn ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>);
    /// Conservative raster-space bounding box of a triangle, or `None` when
    /// the triangle cannot be bounded (straddles the camera plane).
    fn bounds(&self, tri: &[Vector3<f64>; 3]) -> Option<[f64; 4]>;
}

struct PerspectiveRays<'a> {
    camera: &'a Camera,
    origin: Vector3<f64>,
    sx: f64,
    sy: f64,
}

impl RayModel for PerspectiveRays<'_> {
    fn ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        (self.origin, self.camera.pixel_ray(&Vector2::new(px * self.sx, py * self.sy)))
    }

    fn bounds(&self, tri: &[Vector3<f64>; 3]) -> Option<[f64; 4]> {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for v in tri {
            if self.camera.to_camera(v).z <= MIN_DEPTH {
                return None;
            }
            let p = self.camera.project_point(v).ok()?;
            let (x, y) = (p.x / self.sx, p.y / self.sy);
            b = [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)];
        }
        Some(b)
    }
}

struct OrthoRays {
    camera: OrthographicCamera,
    origin_z: f64,
    sx: f64,
    sy: f64,
}

impl RayModel for OrthoRays {
    fn ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let xy = self.camera.unproject_xy(&Vector2::new(px * self.sx, py * self.sy));
        (Vector3::new(xy.x, xy.y, self.origin_z), -Vector3::z())
    }

    fn bounds(&self, tri: &[Vector3<f64>; 3]) -> Option<[f64; 4]> {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for v in tri {
            let p = self.camera.project(v);
            let (x, y) = (p.x / self.sx, p.y / self.sy);
            b = [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)];
        }
        Some(b)
    }
}

/// Ray-casts `mesh` through `camera` into a `width x height` raster. The
/// raster may be finer than the camera image; raster pixel centers map onto
/// the camera image proportionally.
pub fn rasterize_mesh(mesh: &Mesh, camera: &Camera, width: usize, height: usize) -> Result<RasterMap, RasterError> {
    let rays = PerspectiveRays {
        camera,
        origin: camera.center(),
        sx: camera.width() as f64 / width as f64,
        sy: camera.height() as f64 / height as f64,
    };
    rasterize_with(mesh, &rays, width, height)
}

/// Parallel-ray variant used for monocular (orthographic) reconstructions.
/// Depth is measured from a plane one unit in front of the mesh's largest z.
pub fn rasterize_orthographic(
    mesh: &Mesh,
    camera: &OrthographicCamera,
    width: usize,
    height: usize,
) -> Result<RasterMap, RasterError> {
    let zmax = mesh.vertices.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
    let rays = OrthoRays {
        camera: *camera,
        origin_z: zmax + 1.0,
        sx: camera.width as f64 / width as f64,
        sy: camera.height as f64 / height as f64,
    };
    rasterize_with(mesh, &rays, width, height)
}

fn rasterize_with(mesh: &Mesh, rays: &dyn RayModel, width: usize, height: usize) -> Result<RasterMap, RasterError> {
    if mesh.faces.is_empty() {
        return Err(RasterError::EmptyMesh);
    }
    if width == 0 || height == 0 {
        return Err(RasterError::InvalidRaster("raster size must be at least 1x1".into()));
    }
    let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.faces.len()).map(|f| mesh.face_vertices(f)).collect();

    // Integer pixel ranges per face, padded by one pixel.
    let spans: Vec<Option<[usize; 4]>> = tris
        .iter()
        .map(|tri| match rays.bounds(tri) {
            None => Some([0, width - 1, 0, height - 1]),
            Some([x0, x1, y0, y1]) => {
                let lo_x = (x0.floor() - 1.0).max(0.0);
                let hi_x = (x1.ceil() + 1.0).min(width as f64 - 1.0);
                let lo_y = (y0.floor() - 1.0).max(0.0);
                let hi_y = (y1.ceil() + 1.0).min(height as f64 - 1.0);
                (lo_x <= hi_x && lo_y <= hi_y).then(|| [lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize])
            }
        })
        .collect();

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (f, span) in spans.iter().enumerate() {
        if let Some([_, _, y0, y1]) = span {
            for row in &mut rows[*y0..=*y1] {
                row.push(f as u32);
            }
        }
    }

    let mut out = RasterMap::empty(width, height);
    let RasterMap { mask, face_index, bary, depth, .. } = &mut out;
    mask.par_chunks_mut(width)
        .zip(face_index.par_chunks_mut(width))
        .zip(bary.par_chunks_mut(width))
        .zip(depth.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (((mask, face), bary), depth))| {
            let candidates = &rows[y];
            for x in 0..width {
                let (origin, dir) = rays.ray(x as f64 + 0.5, y as f64 + 0.5);
                let mut best: Option<(f64, u32, [f64; 3])> = None;
                for &f in candidates {
                    let [x0, x1, _, _] = spans[f as usize].expect("binned faces have spans");
                    if x < x0 || x > x1 {
                        continue;
                    }
                    if let Some((t, b)) = intersect_triangle(&origin, &dir, &tris[f as usize]) {
                        if t <= MIN_DEPTH {
                            continue;
                        }
                        if best.is_none_or(|(bt, _, _)| t < bt - DEPTH_TIE_EPS) {
                            best = Some((t, f, b));
                        }
                    }
                }
                if let Some((t, f, b)) = best {
                    mask[x] = true;
                    face[x] = f as i32;
                    bary[x] = b;
                    depth[x] = t;
                }
            }
        });
    Ok(out)
}

/// `l1 V1 + l2 V2 + l3 V3` over the vertices of `face_index`.
pub fn interpolate_point(mesh: &Mesh, face_index: i64, bary: &[f64; 3]) -> Result<Vector3<f64>, RasterError> {
    if face_index < 0 || face_index as usize >= mesh.faces.len() {
        return Err(RasterError::FaceOutOfRange(face_index));
    }
    let sum: f64 = bary.iter().sum();
    if !((sum - 1.0).abs() <= BARY_SUM_TOL) {
        return Err(RasterError::InvalidBary(sum));
    }
    let [a, b, c] = mesh.face_vertices(face_index as usize);
    Ok(a * bary[0] + b * bary[1] + c * bary[2])
}

/// Intersection points and masks pooled to feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedRaster {
    width: usize,
    height: usize,
    point: Vec<Vector3<f64>>,
    mask: Vec<bool>,
    count: Vec<u32>,
    source_factor: usize,
}

impl AggregatedRaster {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.point
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Number of valid high-resolution samples behind each feature pixel.
    pub fn counts(&self) -> &[u32] {
        &self.count
    }

    pub fn source_factor(&self) -> usize {
        self.source_factor
    }

    /// An aggregate where every pixel misses the mesh.
    pub fn all_masked(width: usize, height: usize, source_factor: usize) -> Self {
        let n = width * height;
        Self { width, height, point: vec![Vector3::zeros(); n], mask: vec![false; n], count: vec![0; n], source_factor }
    }

    /// Writes `point.mtnsr` (f64 [H, W, 3]), `mask.mtnsr` (u8 [H, W]),
    /// `count.mtnsr` (i32 [H, W]) and `factor.mtnsr` (i32 [1]).
    pub fn save_dir(&self, dir: &Path) -> Result<(), RasterError> {
        std::fs::create_dir_all(dir)?;
        let (h, w) = (self.height, self.width);
        Tensor::f64(vec![h, w, 3], self.point.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?
            .save(&dir.join("point.mtnsr"))?;
        Tensor::u8(vec![h, w], self.mask.iter().map(|m| *m as u8).collect())?.save(&dir.join("mask.mtnsr"))?;
        Tensor::i32(vec![h, w], self.count.iter().map(|c| *c as i32).collect())?.save(&dir.join("count.mtnsr"))?;
        Tensor::i32(vec![1], vec![self.source_factor as i32])?.save(&dir.join("factor.mtnsr"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, RasterError> {
        let mask = Tensor::load(&dir.join("mask.mtnsr"))?;
        let dims = mask.dims().to_vec();
        if dims.len() != 2 {
            return Err(RasterError::InvalidRaster("mask must be rank 2".into()));
        }
        let (h, w) = (dims[0], dims[1]);
        let point = Tensor::load(&dir.join("point.mtnsr"))?;
        point.expect_dims(&[h, w, 3])?;
        let count = Tensor::load(&dir.join("count.mtnsr"))?;
        count.expect_dims(&[h, w])?;
        let factor = Tensor::load(&dir.join("factor.mtnsr"))?;
        factor.expect_dims(&[1])?;
        let mask: Vec<bool> = mask.into_u8()?.into_iter().map(|m| m != 0).collect();
        let point: Vec<Vector3<f64>> =
            point.into_f64()?.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let count: Vec<u32> = count.into_i32()?.into_iter().map(|c| c.max(0) as u32).collect();
        for i in 0..mask.len() {
            if mask[i] != (count[i] > 0) || (!mask[i] && point[i] != Vector3::zeros()) {
                return Err(RasterError::InvalidRaster(format!("aggregate pixel {i} is inconsistent")));
            }
        }
        Ok(Self { width: w, height: h, point, mask, count, source_factor: factor.into_i32()?[0].max(1) as usize })
    }
}

/// Mean of the valid samples and logical-or of their validity. Returns the
/// pooled point, mask and the number of valid samples.
pub fn aggregate_samples<'a>(samples: impl IntoIterator<Item = (bool, &'a Vector3<f64>)>) -> (Vector3<f64>, bool, u32) {
    let mut sum = Vector3::zeros();
    let mut count = 0u32;
    for (valid, p) in samples {
        if valid {
            sum += p;
            count += 1;
        }
    }
    if count == 0 {
        (Vector3::zeros(), false, 0)
    } else {
        (sum / count as f64, true, count)
    }
}

/// Pools a high-resolution raster to `feature_width x feature_height`. The
/// same raster can be pooled to several target resolutions.
pub fn aggregate_raster(
    raster: &RasterMap,
    mesh: &Mesh,
    feature_width: usize,
    feature_height: usize,
) -> Result<AggregatedRaster, RasterError> {
    let non_divisible = || RasterError::NonDivisibleResolution {
        raster_w: raster.width,
        raster_h: raster.height,
        feature_w: feature_width,
        feature_h: feature_height,
    };
    if feature_width == 0 || feature_height == 0 || raster.width % feature_width != 0 || raster.height % feature_height != 0 {
        return Err(non_divisible());
    }
    let factor = raster.width / feature_width;
    if raster.height / feature_height != factor {
        return Err(non_divisible());
    }

    let hits: Vec<Vector3<f64>> = (0..raster.mask.len())
        .into_par_iter()
        .map(|i| {
            if raster.mask[i] {
                interpolate_point(mesh, raster.face_index[i] as i64, &raster.bary[i])
            } else {
                Ok(Vector3::zeros())
            }
        })
        .collect::<Result<_, _>>()?;

    let pooled: Vec<(Vector3<f64>, bool, u32)> = (0..feature_width * feature_height)
        .into_par_iter()
        .map(|idx| {
            let (fx, fy) = (idx % feature_width, idx / feature_width);
            let region = (0..factor).flat_map(|dy| {
                let row = (fy * factor + dy) * raster.width + fx * factor;
                (row..row + factor).map(|i| (raster.mask[i], &hits[i]))
            });
            aggregate_samples(region)
        })
        .collect();

    let mut out = AggregatedRaster::all_masked(feature_width, feature_height, factor);
    for (idx, (p, m, c)) in pooled.into_iter().enumerate() {
        if m {
            let (fx, fy) = (idx % feature_width, idx / feature_width);
            let (lo, hi) = region_bounds(raster, &hits, fx, fy, factor);
            let tol = 1e-12 * (1.0 + lo.abs().max().max(hi.abs().max()));
            if (0..3).any(|k| p[k] < lo[k] - tol || p[k] > hi[k] + tol) {
                return Err(RasterError::InvalidRaster(format!("pooled point at ({fx}, {fy}) escapes its region")));
            }
        }
        out.point[idx] = p;
        out.mask[idx] = m;
        out.count[idx] = c;
    }
    Ok(out)
}

fn region_bounds(
    raster: &RasterMap,
    hits: &[Vector3<f64>],
    fx: usize,
    fy: usize,
    factor: usize,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for dy in 0..factor {
        let row = (fy * factor + dy) * raster.width + fx * factor;
        for i in row..row + factor {
            if raster.mask[i] {
                lo = lo.inf(&hits[i]);
                hi = hi.sup(&hits[i]);
            }
        }
    }
    (lo, hi)
}
