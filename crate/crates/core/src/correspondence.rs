//! Cross-view pixel correspondence.
//!
//! Each pooled intersection point is projected into every view and its
//! continuous feature-map position is expanded into the four integer
//! neighbours `{floor x, ceil x} x {floor y, ceil y}`. Feature pixel `i` has
//! its center at `i + 0.5`, so positions are shifted by half a pixel before
//! rounding; a point landing exactly on a pixel center therefore yields four
//! copies of that pixel.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, MIN_DEPTH};
use crate::raster::{AggregatedRaster, Mesh, RasterError};
use crate::tensor_io::{Tensor, TensorError};

/// Number of integer samples per projected point.
pub const GRID_SAMPLES: usize = 4;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("aggregates disagree on feature resolution: {0}")]
    ResolutionMismatch(String),
    #[error("{cameras} cameras given for {views} views")]
    ViewCountMismatch { cameras: usize, views: usize },
    #[error("invalid depth range ({near}, {far})")]
    InvalidDepthRange { near: f64, far: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Four integer `(x, y)` sample positions with per-entry validity. Entries
/// are ordered `(floor x, floor y), (ceil x, floor y), (floor x, ceil y),
/// (ceil x, ceil y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleIndexSet {
    pub indices: [[i32; 2]; GRID_SAMPLES],
    pub valid: [bool; GRID_SAMPLES],
}

impl SampleIndexSet {
    pub const INVALID: Self = Self { indices: [[0, 0]; GRID_SAMPLES], valid: [false; GRID_SAMPLES] };

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Valid entries as flat row-major offsets into a `width`-wide map.
    pub fn valid_offsets(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        self.indices
            .iter()
            .zip(self.valid)
            .filter(|(_, v)| *v)
            .map(move |(ix, _)| ix[1] as usize * width + ix[0] as usize)
    }
}

/// Floor/ceil neighbours of a continuous index-space position. Out-of-bounds
/// entries are flagged, never clamped; non-finite input gives an all-invalid
/// set.
pub fn grid_sample_indices(pixel: &Vector2<f64>, width: usize, height: usize) -> SampleIndexSet {
    if !(pixel.x.is_finite() && pixel.y.is_finite()) {
        return SampleIndexSet::INVALID;
    }
    let xs = [pixel.x.floor(), pixel.x.ceil()];
    let ys = [pixel.y.floor(), pixel.y.ceil()];
    let mut set = SampleIndexSet::INVALID;
    for (k, (x, y)) in [(xs[0], ys[0]), (xs[1], ys[0]), (xs[0], ys[1]), (xs[1], ys[1])].into_iter().enumerate() {
        // `as` saturates, and saturated values are out of bounds anyway
        set.indices[k] = [x as i32, y as i32];
        set.valid[k] = x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
    }
    set
}

/// Continuous feature-map coordinates of a point in every view.
///
/// `feature_scale[v]` converts view `v` image pixels to feature pixels. Views
/// where the point is not in front of the camera get `(NaN, NaN)`.
pub fn project_to_views(point: &Vector3<f64>, cameras: &[Camera], feature_scale: &[(f64, f64)]) -> Vec<Vector2<f64>> {
    cameras
        .iter()
        .zip(feature_scale)
        .map(|(cam, (sx, sy))| match cam.project_point(point) {
            Ok(p) => Vector2::new(p.x * sx, p.y * sy),
            Err(_) => Vector2::new(f64::NAN, f64::NAN),
        })
        .collect()
}

/// Image-pixel to feature-pixel scale for each camera.
pub fn feature_scales(cameras: &[Camera], feature_width: usize, feature_height: usize) -> Vec<(f64, f64)> {
    cameras
        .iter()
        .map(|c| (feature_width as f64 / c.width() as f64, feature_height as f64 / c.height() as f64))
        .collect()
}

/// Sample indices for a continuous feature-map position in pixel-corner
/// convention.
pub fn sample_feature_position(pos: &Vector2<f64>, width: usize, height: usize) -> SampleIndexSet {
    grid_sample_indices(&Vector2::new(pos.x - 0.5, pos.y - 0.5), width, height)
}

/// For every `(target view, feature pixel)`, the sample sets into every source
/// view plus the pixel's intersection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceTable {
    n_views: usize,
    width: usize,
    height: usize,
    sets: Vec<SampleIndexSet>,
    mask: Vec<bool>,
}

impl CorrespondenceTable {
    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Number of `(target view, pixel)` rows.
    pub fn rows(&self) -> usize {
        self.n_views * self.pixels()
    }

    /// Source-view sample sets for one target pixel, indexed by source view.
    pub fn entry(&self, target: usize, pixel: usize) -> &[SampleIndexSet] {
        let row = target * self.pixels() + pixel;
        &self.sets[row * self.n_views..(row + 1) * self.n_views]
    }

    pub fn mask(&self, target: usize, pixel: usize) -> bool {
        self.mask[target * self.pixels() + pixel]
    }

    pub fn masks(&self) -> &[bool] {
        &self.mask
    }

    /// Builds a table from raw rows. `sets` is laid out
    /// `[target view][pixel][source view]` and `mask` `[target view][pixel]`.
    /// Rows with a false mask must be all-invalid and valid indices must lie
    /// inside the map.
    pub fn from_parts(
        n_views: usize,
        width: usize,
        height: usize,
        sets: Vec<SampleIndexSet>,
        mask: Vec<bool>,
    ) -> Result<Self, CorrespondenceError> {
        let rows = n_views * width * height;
        if mask.len() != rows || sets.len() != rows * n_views {
            return Err(CorrespondenceError::InvalidArgument("table buffers do not match dimensions".into()));
        }
        for (row, chunk) in sets.chunks_exact(n_views.max(1)).enumerate() {
            for set in chunk {
                for k in 0..GRID_SAMPLES {
                    if !set.valid[k] {
                        continue;
                    }
                    if !mask[row] {
                        return Err(CorrespondenceError::InvalidArgument(format!("row {row} is masked but has valid samples")));
                    }
                    let [x, y] = set.indices[k];
                    if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
                        return Err(CorrespondenceError::InvalidArgument(format!("row {row} has an out-of-bounds valid sample")));
                    }
                }
            }
        }
        Ok(Self { n_views, width, height, sets, mask })
    }

    /// A table whose every row misses the mesh.
    pub fn all_masked(n_views: usize, width: usize, height: usize) -> Self {
        let rows = n_views * width * height;
        Self { n_views, width, height, sets: vec![SampleIndexSet::INVALID; rows * n_views], mask: vec![false; rows] }
    }

    /// Reorders source and target views: new view `i` is old view `order[i]`.
    pub fn permute_views(&self, order: &[usize]) -> Self {
        let mut out = Self::all_masked(self.n_views, self.width, self.height);
        let px = self.pixels();
        for (new_t, &old_t) in order.iter().enumerate() {
            for p in 0..px {
                out.mask[new_t * px + p] = self.mask[old_t * px + p];
                let row = (new_t * px + p) * self.n_views;
                let src = self.entry(old_t, p);
                for (new_s, &old_s) in order.iter().enumerate() {
                    out.sets[row + new_s] = src[old_s];
                }
            }
        }
        out
    }

    /// Keeps only the target view's own samples in each row.
    pub fn restrict_to_own_view(&self) -> Self {
        let mut out = self.clone();
        let px = self.pixels();
        for t in 0..self.n_views {
            for p in 0..px {
                let row = (t * px + p) * self.n_views;
                for s in 0..self.n_views {
                    if s != t {
                        out.sets[row + s] = SampleIndexSet::INVALID;
                    }
                }
            }
        }
        out
    }

    /// Writes `index.mtnsr` (i32 [N, H, W, N, 4, 2]), `valid.mtnsr`
    /// (u8 [N, H, W, N, 4]) and `mask.mtnsr` (u8 [N, H, W]).
    pub fn save_dir(&self, dir: &Path) -> Result<(), CorrespondenceError> {
        std::fs::create_dir_all(dir)?;
        let (n, h, w) = (self.n_views, self.height, self.width);
        let index: Vec<i32> = self.sets.iter().flat_map(|s| s.indices.iter().flatten().copied()).collect();
        let valid: Vec<u8> = self.sets.iter().flat_map(|s| s.valid.map(u8::from)).collect();
        Tensor::i32(vec![n, h, w, n, GRID_SAMPLES, 2], index)?.save(&dir.join("index.mtnsr"))?;
        Tensor::u8(vec![n, h, w, n, GRID_SAMPLES], valid)?.save(&dir.join("valid.mtnsr"))?;
        Tensor::u8(vec![n, h, w], self.mask.iter().map(|m| *m as u8).collect())?.save(&dir.join("mask.mtnsr"))?;
        Ok(())
    }

    /// Loads a table; when `mask.mtnsr` is absent the mask is taken to be
    /// "any valid sample in the row".
    pub fn load_dir(dir: &Path) -> Result<Self, CorrespondenceError> {
        let index = Tensor::load(&dir.join("index.mtnsr"))?;
        let d = index.dims().to_vec();
        if d.len() != 6 || d[0] != d[3] || d[4] != GRID_SAMPLES || d[5] != 2 {
            return Err(CorrespondenceError::InvalidArgument(format!("bad index tensor shape {d:?}")));
        }
        let (n, h, w) = (d[0], d[1], d[2]);
        let valid = Tensor::load(&dir.join("valid.mtnsr"))?;
        valid.expect_dims(&[n, h, w, n, GRID_SAMPLES])?;
        let index = index.into_i32()?;
        let valid = valid.into_u8()?;
        let sets: Vec<SampleIndexSet> = index
            .chunks_exact(2 * GRID_SAMPLES)
            .zip(valid.chunks_exact(GRID_SAMPLES))
            .map(|(ix, v)| {
                let mut s = SampleIndexSet::INVALID;
                for k in 0..GRID_SAMPLES {
                    s.indices[k] = [ix[2 * k], ix[2 * k + 1]];
                    s.valid[k] = v[k] != 0;
                }
                s
            })
            .collect();
        let mask_path = dir.join("mask.mtnsr");
        let mask = if mask_path.exists() {
            let m = Tensor::load(&mask_path)?;
            m.expect_dims(&[n, h, w])?;
            m.into_u8()?.into_iter().map(|v| v != 0).collect()
        } else {
            sets.chunks_exact(n).map(|row| row.iter().any(|s| s.valid_count() > 0)).collect()
        };
        Self::from_parts(n, w, h, sets, mask)
    }
}

/// Projects every pooled intersection point of every view into all views.
///
/// The target view is included among the source views.
pub fn build_correspondence_table(
    aggregates: &[AggregatedRaster],
    cameras: &[Camera],
) -> Result<CorrespondenceTable, CorrespondenceError> {
    let n = aggregates.len();
    if n == 0 {
        return Err(CorrespondenceError::InvalidArgument("no views".into()));
    }
    if cameras.len() != n {
        return Err(CorrespondenceError::ViewCountMismatch { cameras: cameras.len(), views: n });
    }
    let (w, h) = (aggregates[0].width(), aggregates[0].height());
    if let Some(bad) = aggregates.iter().position(|a| a.width() != w || a.height() != h) {
        return Err(CorrespondenceError::ResolutionMismatch(format!(
            "view 0 is {w}x{h}, view {bad} is {}x{}",
            aggregates[bad].width(),
            aggregates[bad].height()
        )));
    }
    let scales = feature_scales(cameras, w, h);
    let px = w * h;
    let rows: Vec<(bool, Vec<SampleIndexSet>)> = (0..n * px)
        .into_par_iter()
        .map(|row| {
            let (t, p) = (row / px, row % px);
            let agg = &aggregates[t];
            if !agg.mask()[p] {
                return (false, vec![SampleIndexSet::INVALID; n]);
            }
            let sets = project_to_views(&agg.points()[p], cameras, &scales)
                .iter()
                .map(|pos| sample_feature_position(pos, w, h))
                .collect();
            (true, sets)
        })
        .collect();
    let mut table = CorrespondenceTable::all_masked(n, w, h);
    for (row, (m, sets)) in rows.into_iter().enumerate() {
        table.mask[row] = m;
        table.sets[row * n..(row + 1) * n].copy_from_slice(&sets);
    }
    Ok(table)
}

/// Per-pixel depth samples along target-view rays, each projected into all
/// views.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarCandidates {
    n_views: usize,
    target_view: usize,
    width: usize,
    height: usize,
    depths: Vec<f64>,
    depth_range: (f64, f64),
    /// `[pixel][depth][view]`
    sets: Vec<SampleIndexSet>,
}

impl EpipolarCandidates {
    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn target_view(&self) -> usize {
        self.target_view
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.depth_range
    }

    pub fn samples_per_ray(&self) -> usize {
        self.depths.len()
    }

    /// Key candidates per pixel, `N K d`.
    pub fn candidates_per_pixel(&self) -> usize {
        self.n_views * self.depths.len() * GRID_SAMPLES
    }

    /// Sample sets for one pixel, `[depth][view]` flattened.
    pub fn pixel(&self, pixel: usize) -> &[SampleIndexSet] {
        let stride = self.depths.len() * self.n_views;
        &self.sets[pixel * stride..(pixel + 1) * stride]
    }

    pub fn total_candidates(&self) -> usize {
        self.sets.len() * GRID_SAMPLES
    }
}

/// Uniform depths over `[near, far]`; a single sample sits at the midpoint.
pub fn epipolar_depths(near: f64, far: f64, samples: usize) -> Vec<f64> {
    if samples == 1 {
        return vec![0.5 * (near + far)];
    }
    (0..samples).map(|k| near + (far - near) * k as f64 / (samples - 1) as f64).collect()
}

pub fn build_epipolar_candidates(
    cameras: &[Camera],
    target_view: usize,
    depth_range: (f64, f64),
    samples: usize,
    feature_res: (usize, usize),
) -> Result<EpipolarCandidates, CorrespondenceError> {
    let (near, far) = depth_range;
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(CorrespondenceError::InvalidDepthRange { near, far });
    }
    if samples == 0 {
        return Err(CorrespondenceError::InvalidArgument("need at least one depth sample".into()));
    }
    let target = cameras
        .get(target_view)
        .ok_or_else(|| CorrespondenceError::InvalidArgument(format!("target view {target_view} out of range")))?;
    let (w, h) = feature_res;
    let n = cameras.len();
    let depths = epipolar_depths(near, far, samples);
    let scales = feature_scales(cameras, w, h);
    let (tx, ty) = (target.width() as f64 / w as f64, target.height() as f64 / h as f64);
    let center = target.center();
    let sets: Vec<SampleIndexSet> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|p| {
            let pixel = Vector2::new((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let ray = target.pixel_ray(&Vector2::new(pixel.x * tx, pixel.y * ty));
            let scales = &scales;
            depths.iter().flat_map(move |z| {
                let point = center + ray * *z;
                project_to_views(&point, cameras, scales)
                    .into_iter()
                    .map(|pos| sample_feature_position(&pos, w, h))
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    Ok(EpipolarCandidates { n_views: n, target_view, width: w, height: h, depths, depth_range, sets })
}

/// Depth extent of the mesh in front of `camera`, widened by 10% on both
/// ends. `None` when no vertex is in front of the camera.
pub fn mesh_depth_range(mesh: &Mesh, camera: &Camera) -> Option<(f64, f64)> {
    let (lo, hi) = mesh
        .vertices()
        .iter()
        .map(|v| camera.to_camera(v).z)
        .filter(|z| *z > MIN_DEPTH)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)));
    if !lo.is_finite() {
        return None;
    }
    let far = 1.1 * hi;
    let near = (0.9 * lo).max(MIN_DEPTH);
    Some((near, if far > near { far } else { near * 1.1 + 1e-9 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn cam(t: Vector3<f64>) -> Camera {
        Camera::from_parts((1000.0, 1000.0), (512.0, 512.0), Matrix3::identity(), t, 1024, 1024).unwrap()
    }

    #[test]
    fn grid_sample_examples() {
        let s = grid_sample_indices(&Vector2::new(2.3, 4.7), 16, 16);
        assert_eq!(s.indices, [[2, 4], [3, 4], [2, 5], [3, 5]]);
        assert_eq!(s.valid, [true; 4]);

        let s = grid_sample_indices(&Vector2::new(2.0, 4.0), 16, 16);
        assert_eq!(s.indices, [[2, 4]; 4]);
        assert_eq!(s.valid, [true; 4]);

        let s = grid_sample_indices(&Vector2::new(-0.5, 3.0), 16, 16);
        assert_eq!(s.indices, [[-1, 3], [0, 3], [-1, 3], [0, 3]]);
        assert_eq!(s.valid, [false, true, false, true]);

        let s = grid_sample_indices(&Vector2::new(15.5, 0.0), 16, 16);
        assert_eq!(s.valid, [true, false, true, false]);
        assert_eq!(grid_sample_indices(&Vector2::new(f64::NAN, 1.0), 16, 16), SampleIndexSet::INVALID);
        assert_eq!(grid_sample_indices(&Vector2::new(1e300, 1.0), 16, 16).valid_count(), 0);
    }

    #[test]
    fn projection_examples() {
        let cams = [cam(Vector3::zeros()), cam(Vector3::new(-0.2, 0.0, 0.0))];
        let p = project_to_views(&Vector3::new(0.0, 0.0, 2.0), &cams, &[(1.0, 1.0); 2]);
        assert!((p[0] - Vector2::new(512.0, 512.0)).norm() < 1e-9);
        assert!((p[1] - Vector2::new(412.0, 512.0)).norm() < 1e-9);

        let behind = [cam(Vector3::zeros()), cam(Vector3::new(0.0, 0.0, -3.0))];
        let p = project_to_views(&Vector3::new(0.0, 0.0, 2.0), &behind, &[(1.0, 1.0); 2]);
        assert!(p[0].x.is_finite() && !p[1].x.is_finite());

        let p = project_to_views(&Vector3::new(0.0, 0.0, 2.0), &cams[..1], &[(1.0 / 64.0, 1.0 / 64.0)]);
        assert!((p[0] - Vector2::new(8.0, 8.0)).norm() < 1e-12);
    }

    #[test]
    fn masked_aggregate_gives_invalid_rows() {
        let aggs = vec![AggregatedRaster::all_masked(4, 4, 8); 2];
        let cams = [cam(Vector3::zeros()), cam(Vector3::new(-0.2, 0.0, 0.0))];
        let t = build_correspondence_table(&aggs, &cams).unwrap();
        assert_eq!(t.rows(), 32);
        for row in 0..32 {
            assert!(!t.masks()[row]);
            assert!(t.entry(row / 16, row % 16).iter().all(|s| s.valid_count() == 0));
        }
        assert!(matches!(
            build_correspondence_table(&aggs, &cams[..1]),
            Err(CorrespondenceError::ViewCountMismatch { .. })
        ));
        let mixed = vec![AggregatedRaster::all_masked(4, 4, 8), AggregatedRaster::all_masked(8, 8, 4)];
        assert!(matches!(build_correspondence_table(&mixed, &cams), Err(CorrespondenceError::ResolutionMismatch(_))));
    }

    #[test]
    fn epipolar_depth_schedule() {
        assert_eq!(epipolar_depths(1.0, 3.0, 3), vec![1.0, 2.0, 3.0]);
        assert_eq!(epipolar_depths(1.0, 3.0, 1), vec![2.0]);
        let cams = [cam(Vector3::zeros()), cam(Vector3::new(-0.2, 0.0, 0.0))];
        assert!(matches!(
            build_epipolar_candidates(&cams, 0, (2.0, 2.0), 1, (4, 4)),
            Err(CorrespondenceError::InvalidDepthRange { .. })
        ));
        assert!(build_epipolar_candidates(&cams, 0, (0.0, 2.0), 1, (4, 4)).is_err());
    }

    #[test]
    fn epipolar_counts() {
        let cams: Vec<Camera> = (0..4).map(|i| cam(Vector3::new(-0.1 * i as f64, 0.0, 0.0))).collect();
        let e = build_epipolar_candidates(&cams, 1, (1.0, 3.0), 8, (8, 8)).unwrap();
        assert_eq!(e.candidates_per_pixel(), 128);
        assert_eq!(e.total_candidates(), 64 * 4 * 8 * 4);
        // the target's own ray projects onto the pixel itself at every depth
        let own = &e.pixel(9)[1];
        assert!(own.indices.contains(&[1, 1]));
    }
}
