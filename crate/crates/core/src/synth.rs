//! Seeded synthetic meshes, rigs and problem instances for tests, benchmarks
//! and the demo pipeline.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use thiserror::Error;

use crate::adaptation::{sample_orbit_cameras, AdaptationError, JointTree, MatchPair, MatchSet};
use crate::dataprep::KeypointsFile;
use crate::correspondence::{
    build_correspondence_table, build_epipolar_candidates, mesh_depth_range, CorrespondenceError, CorrespondenceTable,
    EpipolarCandidates,
};
use crate::fusion::{stream_seed, FeatureStack};
use crate::geometry::{camera_pose_embedding, Camera, GeometryError, Rig, SimilarityTransform, ViewEmbedding, DEFAULT_EMBED_BANDS};
use crate::raster::{aggregate_raster, rasterize_mesh, AggregatedRaster, Mesh, RasterError, RasterMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error("mesh is not in front of view {0}")]
    MeshBehindView(usize),
}

/// Latitude/longitude sphere with `rings` bands and `segments` slices,
/// scaled per axis and displaced by a smooth seeded radial bump field.
/// Has `2 * segments * (rings - 1)` faces.
pub fn blob_mesh(center: Vector3<f64>, radii: Vector3<f64>, rings: usize, segments: usize, bumpiness: f64, seed: u64) -> Mesh {
    let rings = rings.max(2);
    let segments = segments.max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(Vector3<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (dir, rng.random_range(1.0..3.0), rng.random_range(0.0..TAU))
        })
        .collect();
    let bump = |u: &Vector3<f64>| 1.0 + bumpiness * waves.iter().map(|(d, f, ph)| (f * d.dot(u) + ph).sin()).sum::<f64>() / 4.0;

    let mut vertices = vec![center + Vector3::new(0.0, radii.y * bump(&Vector3::y()), 0.0)];
    for i in 1..rings {
        let theta = PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = TAU * j as f64 / segments as f64;
            let u = Vector3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            vertices.push(center + bump(&u) * radii.component_mul(&u));
        }
    }
    vertices.push(center - Vector3::new(0.0, radii.y * bump(&-Vector3::y()), 0.0));
    let bottom = vertices.len() as u32 - 1;
    let ring_start = |i: usize| 1 + ((i - 1) * segments) as u32;
    let mut faces = Vec::new();
    for j in 0..segments as u32 {
        let jn = (j + 1) % segments as u32;
        faces.push([0, ring_start(1) + jn, ring_start(1) + j]);
    }
    for i in 1..rings - 1 {
        let (a, b) = (ring_start(i), ring_start(i + 1));
        for j in 0..segments as u32 {
            let jn = (j + 1) % segments as u32;
            faces.push([a + j, a + jn, b + j]);
            faces.push([a + jn, b + jn, b + j]);
        }
    }
    let last = ring_start(rings - 1);
    for j in 0..segments as u32 {
        let jn = (j + 1) % segments as u32;
        faces.push([bottom, last + j, last + jn]);
    }
    Mesh::new(vertices, faces).expect("blob mesh is well formed")
}

/// The standard subject: a 200-face body-sized blob centered at `center`.
pub fn subject_mesh(center: Vector3<f64>, seed: u64) -> Mesh {
    blob_mesh(center, Vector3::new(0.35, 0.8, 0.25), 11, 10, 0.15, seed)
}

/// `n_faces` random triangles inside the box `[-1, 1]^2 x [z_near, z_far]`.
/// Faces too small to pass mesh validation are redrawn.
pub fn random_triangle_soup(n_faces: usize, z_near: f64, z_far: f64, seed: u64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertices = Vec::with_capacity(3 * n_faces);
    while vertices.len() < 3 * n_faces {
        let c = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(z_near..z_far));
        let tri: Vec<Vector3<f64>> = (0..3)
            .map(|_| c + Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)))
            .collect();
        if (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm() > 1e-3 {
            vertices.extend(tri);
        }
    }
    let faces = (0..n_faces as u32).map(|f| [3 * f, 3 * f + 1, 3 * f + 2]).collect();
    Mesh::new(vertices, faces).expect("soup is well formed")
}

/// `n` cameras on a horizontal ring around `target`, aimed at it.
pub fn ring_rig(target: Vector3<f64>, radius: f64, n: usize, fov: f64, size: u32) -> Rig {
    let cams = sample_orbit_cameras(&target, radius, 0.0, fov, n, size, size).expect("ring cameras are valid");
    Rig::from_cameras(cams).expect("ring ids are unique")
}

/// Sixteen-camera ring with the body orientation pointing at camera 5.
pub fn frontal_ring_fixture() -> (Rig, Vector3<f64>, Vector3<f64>) {
    let pelvis = Vector3::new(0.2, 0.9, -0.1);
    let rig = ring_rig(pelvis, 3.0, 16, 0.7, 256);
    let orientation = rig.cameras()[5].center() - pelvis;
    (rig, pelvis, orientation)
}

/// Standing stick figure with its pelvis at `pelvis`, facing +z. Joint 0 is
/// the pelvis; the last four joints are the hands' finger tips.
pub fn stick_figure(pelvis: Vector3<f64>) -> (KeypointsFile, JointTree) {
    let offsets: [([f64; 3], Option<usize>, bool); 17] = [
        ([0.0, 0.0, 0.0], None, false),      // pelvis
        ([0.0, 0.25, 0.0], Some(0), false),  // spine
        ([0.0, 0.5, 0.0], Some(1), false),   // neck
        ([0.0, 0.68, 0.02], Some(2), false), // head
        ([0.18, 0.45, 0.0], Some(2), false), // left shoulder
        ([0.42, 0.3, 0.02], Some(4), false), // left elbow
        ([0.55, 0.12, 0.05], Some(5), false), // left wrist
        ([-0.18, 0.45, 0.0], Some(2), false),
        ([-0.42, 0.3, 0.02], Some(7), false),
        ([-0.55, 0.12, 0.05], Some(8), false),
        ([0.1, -0.05, 0.0], Some(0), false), // left hip
        ([0.12, -0.45, 0.02], Some(10), false),
        ([0.12, -0.85, 0.0], Some(11), false),
        ([-0.1, -0.05, 0.0], Some(0), false),
        ([-0.12, -0.45, 0.02], Some(13), false),
        ([0.6, 0.04, 0.07], Some(6), true),
        ([-0.6, 0.04, 0.07], Some(9), true),
    ];
    let joints = offsets.iter().map(|(o, _, _)| [pelvis.x + o[0], pelvis.y + o[1], pelvis.z + o[2]]).collect();
    let parents: Vec<Option<usize>> = offsets.iter().map(|(_, p, _)| *p).collect();
    let bones = parents.iter().enumerate().filter_map(|(j, p)| p.map(|p| [p, j])).collect();
    let file = KeypointsFile { joints, pelvis_index: 0, names: None, bones: Some(bones) };
    let tree = JointTree { parents, is_hand: offsets.iter().map(|(_, _, h)| *h).collect() };
    (file, tree)
}

/// Everything a fusion pass needs, built from one seed.
#[derive(Debug, Clone)]
pub struct FusionFixture {
    pub mesh: Mesh,
    pub rig: Rig,
    pub aggregates: Vec<AggregatedRaster>,
    pub table: CorrespondenceTable,
    pub features: FeatureStack,
    pub embeddings: Vec<ViewEmbedding>,
}

/// Subject mesh seen by an `n`-camera ring, rasterized at `raster_factor`
/// times the `size x size` feature resolution, with seeded features.
pub fn fusion_fixture(n: usize, size: usize, channels: usize, raster_factor: usize, seed: u64) -> Result<FusionFixture, SynthError> {
    let center = Vector3::new(0.0, 0.9, 0.0);
    let mesh = subject_mesh(center, seed);
    let image = (size * raster_factor) as u32;
    let rig = ring_rig(center, 3.0, n, 0.6, image);
    let aggregates = rig
        .cameras()
        .iter()
        .map(|cam| {
            let raster = rasterize_mesh(&mesh, cam, size * raster_factor, size * raster_factor)?;
            aggregate_raster(&raster, &mesh, size, size)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = build_correspondence_table(&aggregates, rig.cameras())?;
    let features = FeatureStack::seeded(n, channels, size, size, stream_seed(seed, 10));
    let embeddings = rig.cameras().iter().map(|c| camera_pose_embedding(c, &Vector3::zeros(), DEFAULT_EMBED_BANDS)).collect();
    Ok(FusionFixture { mesh, rig, aggregates, table, features, embeddings })
}

impl FusionFixture {
    /// Epipolar candidates for every view with `samples` depths over the
    /// mesh's depth extent.
    pub fn epipolar(&self, samples: usize) -> Result<Vec<EpipolarCandidates>, SynthError> {
        let res = (self.features.width(), self.features.height());
        (0..self.rig.len())
            .map(|v| {
                let cam = &self.rig.cameras()[v];
                let range = mesh_depth_range(&self.mesh, cam).ok_or(SynthError::MeshBehindView(v))?;
                Ok(build_epipolar_candidates(self.rig.cameras(), v, range, samples, res)?)
            })
            .collect()
    }
}

/// `M = K R` with `K` upper triangular with positive diagonal and `R` a
/// rotation. `M` must have positive determinant.
pub fn rq_decompose(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let mut k = flip * qr.r().transpose() * flip;
    let mut r = flip * qr.q().transpose();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            k.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    (k, r)
}

/// A mesh-alignment problem with a known answer.
#[derive(Debug, Clone)]
pub struct AdaptationInstance {
    /// Mesh in its own (monocular) frame.
    pub mesh: Mesh,
    /// Frontal raster of `mesh` in its own frame.
    pub raster: RasterMap,
    /// Camera that produced `raster`, in the mesh frame.
    pub monocular_camera: Camera,
    /// Calibrated rig; view id 0 is the frontal view.
    pub rig: Rig,
    pub truth: SimilarityTransform,
    pub matches: MatchSet,
}

/// Settings for [`adaptation_instance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConfig {
    pub views: usize,
    pub matches: usize,
    pub noise_sigma: f64,
    pub raster_size: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { views: 4, matches: 200, noise_sigma: 0.0, raster_size: 128 }
    }
}

/// Builds an instance whose frontal camera composed with the true transform
/// reproduces the monocular camera exactly, so the true transform has zero
/// loss when matches are noiseless.
pub fn adaptation_instance(config: &InstanceConfig, seed: u64) -> Result<AdaptationInstance, AdaptationError> {
    if config.views < 2 {
        return Err(AdaptationError::InvalidArgument("need a frontal view and at least one other".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = subject_mesh(Vector3::zeros(), seed);
    let size = config.raster_size as u32;

    // monocular camera on +z looking down -z, image y pointing down
    let r_m = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let eye_m = Vector3::new(0.0, 0.0, 2.6);
    let f_m = 0.5 * size as f64 / 0.4f64.tan();
    let k_m = Matrix3::new(f_m, 0.0, 0.5 * size as f64, 0.0, f_m, 0.5 * size as f64, 0.0, 0.0, 1.0);
    let t_m = -(r_m * eye_m);
    let monocular_camera = Camera::new(k_m, r_m, t_m, size, size)?;
    let raster = rasterize_mesh(&mesh, &monocular_camera, config.raster_size, config.raster_size).map_err(raster_err)?;

    let yaw = rng.random_range(-PI..PI);
    let tilt = Vector3::new(rng.random_range(-0.15..0.15), 0.0, rng.random_range(-0.15..0.15));
    let rot = Rotation3::new(tilt).into_inner() * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
    let scale = [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)];
    let translation = [rng.random_range(-0.5..0.5), rng.random_range(0.7..1.1), rng.random_range(-0.5..0.5)];
    let truth = SimilarityTransform::from_rotation(scale, &rot, translation)?;

    let s_inv = Matrix3::from_diagonal(&Vector3::new(1.0 / scale[0], 1.0 / scale[1], 1.0 / scale[2]));
    let (k1, r1) = rq_decompose(&(k_m * r_m * s_inv * rot.transpose()));
    let lambda = k1[(2, 2)];
    let k1 = k1 / lambda;
    let t1 = k1.try_inverse().ok_or(GeometryError::DegenerateRotation)? * (k_m * t_m) / lambda - r1 * Vector3::from(translation);
    let frontal = Camera::new(k1, r1, t1, size, size)?;

    let target = Vector3::from(translation);
    let c1 = frontal.center() - target;
    let mut cameras = vec![frontal];
    for i in 1..config.views {
        let angle = (i as f64 - 0.5 * config.views as f64) * 0.6 + 0.3;
        let eye = target + Rotation3::from_axis_angle(&Vector3::y_axis(), angle) * c1;
        cameras.push(Camera::look_at(eye, target, Vector3::y(), 0.8, size, size)?);
    }
    let rig = Rig::from_cameras(cameras)?;

    let hits: Vec<(usize, usize)> = (0..config.raster_size * config.raster_size)
        .map(|i| (i % config.raster_size, i / config.raster_size))
        .filter(|&(x, y)| raster.hit(x, y).is_some())
        .collect();
    if hits.is_empty() {
        return Err(AdaptationError::EmptyMatchSet);
    }
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| AdaptationError::InvalidArgument(e.to_string()))?;
    let mut pairs = Vec::with_capacity(config.matches);
    let mut attempts = 0;
    while pairs.len() < config.matches {
        attempts += 1;
        if attempts > 100 * config.matches.max(1) {
            return Err(AdaptationError::InvalidArgument("could not place enough matches".into()));
        }
        let (x, y) = hits[rng.random_range(0..hits.len())];
        let view = 1 + pairs.len() % (config.views - 1);
        let p = Vector2::new((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        let point = crate::adaptation::surface_point(&p, &raster, &mesh)?;
        let cam = &rig.cameras()[view];
        let Ok(q) = cam.project_point(&truth.apply(&point)?) else {
            continue;
        };
        let mut q = Vector2::new(q.x / size as f64, q.y / size as f64);
        if config.noise_sigma > 0.0 {
            q += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        if !(0.0..=1.0).contains(&q.x) || !(0.0..=1.0).contains(&q.y) {
            continue;
        }
        pairs.push(MatchPair { view: view as i64, p: [p.x, p.y], q: [q.x, q.y] });
    }
    Ok(AdaptationInstance { mesh, raster, monocular_camera, rig, truth, matches: MatchSet { frontal_view: 0, pairs } })
}

fn raster_err(e: RasterError) -> AdaptationError {
    AdaptationError::Raster(e)
}
