//! Batch front end: every stage of the pipeline as a subcommand reading and
//! writing the on-disk formats described in FORMATS.md.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meatkit::adaptation::{
    fit_frontal_camera, fit_transform, perturb_joints, sample_orbit_cameras, select_frontal_view, DescentConfig, FitConfig,
    FrontalFitConfig, MatchSet, MAIN_JOINT_SIGMA, HAND_JOINT_SIGMA,
};
use meatkit::bench::alloc::TrackingAllocator;
use meatkit::bench::{run_benchmark, BenchConfig, ComplexityParams, Scheme};
use meatkit::correspondence::{build_correspondence_table, build_epipolar_candidates, mesh_depth_range, EpipolarCandidates};
use meatkit::dataprep::{apply_crop_to_intrinsics, compute_crop, project_keypoints, render_skeleton, CropSpec, KeypointsFile};
use meatkit::fusion::{
    dense_mv_fuse_with_stats, epipolar_fuse_with_stats, keypoint_encode, meat_block, meat_feat_with_stats,
    per_view_self_attention_with_stats, stream_seed, BlockParams, KeypointEncoder, RefContext,
    ResidualEncoder, ScaleFeatures,
};
use meatkit::geometry::{camera_pose_embedding, DEFAULT_EMBED_BANDS};
use meatkit::raster::{aggregate_raster, rasterize_mesh, DEFAULT_RASTER_FACTOR};
use meatkit::synth::{adaptation_instance, fusion_fixture, stick_figure, InstanceConfig};
use meatkit::{
    AggregatedRaster, Camera, CorrespondenceTable, FeatureStack, FusionStats, Mesh, RasterMap, Rig, Tensor, ViewEmbedding,
};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "meatkit", version, about = "Mesh-guided multiview correspondence and attention fusion")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "MEATKIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses one per core. Outputs do not depend on it.
    #[arg(long, global = true, env = "MEATKIT_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-cast a mesh through one rig camera.
    Rasterize(RasterizeArgs),
    /// Pool a raster down to feature resolution.
    Aggregate(AggregateArgs),
    /// Build the cross-view correspondence table.
    Correspond(CorrespondArgs),
    /// Fuse a feature stack across views.
    Fuse(FuseArgs),
    /// Fit the transform aligning a monocular mesh with the rig.
    Adapt(AdaptArgs),
    /// Print the id of the camera the body faces.
    SelectFront(SelectFrontArgs),
    /// Pelvis-centered crops and the matching cameras.
    Crop(CropArgs),
    /// Cameras on a circle around the pelvis.
    Orbit(OrbitArgs),
    /// Attention cost table for each scheme.
    Bench(BenchArgs),
    /// Seeded end-to-end run of the whole pipeline on synthetic data.
    Demo(DemoArgs),
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Camera id in the rig.
    #[arg(long)]
    view: i64,
    /// Raster width; defaults to the camera image width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    /// Raster pixels per feature pixel along each axis.
    #[arg(long, env = "MEATKIT_RASTER_FACTOR", default_value_t = DEFAULT_RASTER_FACTOR as usize)]
    factor: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrespondArgs {
    /// One aggregate directory per rig camera, in rig order.
    #[arg(long = "aggregate", required = true)]
    aggregates: Vec<PathBuf>,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FuseScheme {
    Mesh,
    Dense,
    Epipolar,
    #[value(name = "self")]
    SelfOnly,
}

#[derive(Args)]
struct FuseArgs {
    /// f32 tensor [N, C, H, W].
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long, value_enum, env = "MEATKIT_SCHEME", default_value = "mesh")]
    scheme: FuseScheme,
    /// Correspondence table directory (mesh scheme).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Mesh bounding the epipolar depth range.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Explicit epipolar depth range, overriding --mesh.
    #[arg(long, requires = "far")]
    near: Option<f64>,
    #[arg(long, requires = "near")]
    far: Option<f64>,
    /// Depth samples per ray for the epipolar scheme.
    #[arg(long, env = "MEATKIT_EPIPOLAR_SAMPLES", default_value_t = 8)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    matches: PathBuf,
    /// Frontal raster of the monocular mesh.
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long, env = "MEATKIT_MAX_ITERATIONS", default_value_t = 5000)]
    max_iterations: usize,
    /// Spacing of the self-consistency grid in raster pixels.
    #[arg(long, default_value_t = meatkit::adaptation::DEFAULT_SELF_STRIDE)]
    self_stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectFrontArgs {
    #[arg(long)]
    rig: PathBuf,
    /// Pelvis position as x,y,z.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pelvis: Vector3<f64>,
    /// Body facing direction as x,y,z.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    orientation: Vector3<f64>,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    /// Side of the square output image.
    #[arg(long, env = "MEATKIT_CROP_SIZE", default_value_t = 512)]
    size: u32,
    /// Also render each view's skeleton image.
    #[arg(long)]
    skeletons: bool,
    /// Directory receiving crops.json, rig.json and skeleton images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OrbitArgs {
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pelvis: Vector3<f64>,
    #[arg(long, default_value_t = 3.0)]
    distance: f64,
    /// Angle above the horizontal plane, radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    elevation: f64,
    /// Horizontal field of view, radians.
    #[arg(long, default_value_t = 0.7)]
    fov: f64,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 512)]
    height: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchScheme {
    #[value(name = "self")]
    SelfAttn,
    Dense,
    RowWise,
    Epipolar,
    Mesh,
}

impl From<BenchScheme> for Scheme {
    fn from(s: BenchScheme) -> Self {
        match s {
            BenchScheme::SelfAttn => Scheme::SelfAttn,
            BenchScheme::Dense => Scheme::Dense,
            BenchScheme::RowWise => Scheme::RowWise,
            BenchScheme::Epipolar => Scheme::Epipolar,
            BenchScheme::Mesh => Scheme::Mesh,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Feature map sides to measure.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    sizes: Vec<u64>,
    #[arg(long, default_value_t = 16)]
    views: u64,
    #[arg(long, default_value_t = 8)]
    channels: u64,
    /// Epipolar depth samples.
    #[arg(long, default_value_t = 8)]
    samples: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "self,dense,row-wise,epipolar,mesh")]
    schemes: Vec<BenchScheme>,
    /// Runs estimated to need more than this are reported, not run.
    #[arg(long, env = "MEATKIT_BENCH_BUDGET_MIB", default_value_t = 1024)]
    budget_mib: u64,
    #[arg(long, env = "MEATKIT_RASTER_FACTOR", default_value_t = DEFAULT_RASTER_FACTOR as usize)]
    factor: usize,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the text table here.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Keep wall times in the written artifacts.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
}

/// Exit 1 for bad invocations, 2 for bad data.
enum Failure {
    Usage(String),
    Data(String),
}

type CliResult<T> = Result<T, Failure>;

trait Context<T> {
    fn ctx(self, what: impl Display) -> CliResult<T>;
    /// For errors that already name their file.
    fn plain(self) -> CliResult<T>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn ctx(self, what: impl Display) -> CliResult<T> {
        self.map_err(|e| Failure::Data(format!("{what}: {e}")))
    }

    fn plain(self) -> CliResult<T> {
        self.map_err(|e| Failure::Data(e.to_string()))
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers x,y,z, got '{s}'")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Rasterize(a) => rasterize(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Correspond(a) => correspond(a),
        Command::Fuse(a) => fuse(a, cli.seed),
        Command::Adapt(a) => adapt(a),
        Command::SelectFront(a) => {
            let rig = load_rig(&a.rig)?;
            let id = select_frontal_view(&rig, &a.pelvis, &a.orientation).ctx("select-front")?;
            println!("{id}");
            Ok(())
        }
        Command::Crop(a) => crop(a),
        Command::Orbit(a) => {
            let cams = sample_orbit_cameras(&a.pelvis, a.distance, a.elevation, a.fov, a.views, a.width, a.height)
                .ctx("orbit")?;
            let rig = Rig::from_cameras(cams).ctx("orbit")?;
            write_text(&a.out, &rig.to_json_string())
        }
        Command::Bench(a) => bench(a, cli.seed),
        Command::Demo(a) => demo(&a.out, cli.seed),
    }
}

fn load_rig(path: &Path) -> CliResult<Rig> {
    Rig::load(path).ctx(path.display())
}

fn load_mesh(path: &Path) -> CliResult<Mesh> {
    let (mesh, stats) = Mesh::load_obj(path).ctx(path.display())?;
    if stats.ignored_lines > 0 {
        eprintln!("warning: {}: ignored {} unsupported lines", path.display(), stats.ignored_lines);
    }
    Ok(mesh)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).ctx(dir.display())?;
    }
    fs::write(path, text).ctx(path.display())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn rig_camera(rig: &Rig, id: i64) -> CliResult<&Camera> {
    rig.camera(id).ok_or_else(|| Failure::Data(format!("view {id} is not in the rig")))
}

fn rasterize(a: &RasterizeArgs) -> CliResult<()> {
    let mesh = load_mesh(&a.mesh)?;
    let rig = load_rig(&a.rig)?;
    let cam = rig_camera(&rig, a.view)?;
    let w = a.width.unwrap_or(cam.width() as usize);
    let h = a.height.unwrap_or(cam.height() as usize);
    let raster = rasterize_mesh(&mesh, cam, w, h).ctx("rasterize")?;
    raster.save_dir(&a.out).plain()?;
    println!("{} of {} pixels hit", raster.coverage(), w * h);
    Ok(())
}

fn aggregate(a: &AggregateArgs) -> CliResult<()> {
    let raster = RasterMap::load_dir(&a.raster).plain()?;
    let mesh = load_mesh(&a.mesh)?;
    if a.factor == 0 {
        return Err(Failure::Usage("--factor must be at least 1".into()));
    }
    let agg = aggregate_raster(&raster, &mesh, raster.width() / a.factor.max(1), raster.height() / a.factor.max(1))
        .ctx("aggregate")?;
    agg.save_dir(&a.out).plain()
}

fn correspond(a: &CorrespondArgs) -> CliResult<()> {
    let rig = load_rig(&a.rig)?;
    if a.aggregates.len() != rig.len() {
        return Err(Failure::Data(format!(
            "{} aggregates given for a rig of {} cameras",
            a.aggregates.len(),
            rig.len()
        )));
    }
    let aggs = a
        .aggregates
        .iter()
        .map(|p| AggregatedRaster::load_dir(p).plain())
        .collect::<CliResult<Vec<_>>>()?;
    let table = build_correspondence_table(&aggs, rig.cameras()).ctx("correspond")?;
    table.save_dir(&a.out).plain()
}

fn pose_embeddings(rig: &Rig) -> Vec<ViewEmbedding> {
    rig.cameras().iter().map(|c| camera_pose_embedding(c, &Vector3::zeros(), DEFAULT_EMBED_BANDS)).collect()
}

/// Counts of the cross-view stage and the per-view stage of one fusion.
#[derive(Serialize)]
struct StageStats {
    cross: FusionStats,
    local: FusionStats,
}

/// Cross-view stage of `scheme` (none for `self`), then per-view self
/// attention. Weights are drawn from `seed`.
fn fuse_stack(
    features: &FeatureStack,
    rig: &Rig,
    scheme: FuseScheme,
    table: Option<&CorrespondenceTable>,
    epipolar: Option<&[EpipolarCandidates]>,
    seed: u64,
) -> CliResult<(FeatureStack, StageStats)> {
    let embeddings = pose_embeddings(rig);
    let e = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let c = features.channels();
    let params = BlockParams::seeded(c, e, seed);
    let (x, cross) = match scheme {
        FuseScheme::Mesh => {
            let table = table.ok_or_else(|| Failure::Usage("--scheme mesh needs --table".into()))?;
            meat_feat_with_stats(features, table, &embeddings, &params.feat).ctx("fuse")?
        }
        FuseScheme::Dense => dense_mv_fuse_with_stats(features, &embeddings, &params.feat).ctx("fuse")?,
        FuseScheme::Epipolar => {
            let cands = epipolar.ok_or_else(|| Failure::Usage("--scheme epipolar needs --mesh or --near/--far".into()))?;
            epipolar_fuse_with_stats(features, cands, &embeddings, &params.feat).ctx("fuse")?
        }
        FuseScheme::SelfOnly => (features.clone(), FusionStats::default()),
    };
    let (out, local) = per_view_self_attention_with_stats(&x, &params.self_attn).ctx("fuse")?;
    Ok((out, StageStats { cross, local }))
}

fn epipolar_candidates(
    rig: &Rig,
    mesh: Option<&Mesh>,
    range: Option<(f64, f64)>,
    samples: usize,
    res: (usize, usize),
) -> CliResult<Vec<EpipolarCandidates>> {
    (0..rig.len())
        .map(|v| {
            let r = match (range, mesh) {
                (Some(r), _) => r,
                (None, Some(m)) => mesh_depth_range(m, &rig.cameras()[v])
                    .ok_or_else(|| Failure::Data(format!("mesh is not in front of view {}", rig.ids()[v])))?,
                (None, None) => return Err(Failure::Usage("--scheme epipolar needs --mesh or --near/--far".into())),
            };
            build_epipolar_candidates(rig.cameras(), v, r, samples, res).ctx("epipolar candidates")
        })
        .collect()
}

fn fuse(a: &FuseArgs, seed: u64) -> CliResult<()> {
    let rig = load_rig(&a.rig)?;
    let t = Tensor::load(&a.features).plain()?;
    let features = FeatureStack::from_tensor(t, Some(rig.ids().to_vec())).ctx(a.features.display())?;
    let table = match &a.table {
        Some(p) => Some(CorrespondenceTable::load_dir(p).plain()?),
        None => None,
    };
    let cands = if a.scheme == FuseScheme::Epipolar {
        let mesh = a.mesh.as_deref().map(load_mesh).transpose()?;
        let range = a.near.zip(a.far);
        Some(epipolar_candidates(&rig, mesh.as_ref(), range, a.samples, (features.width(), features.height()))?)
    } else {
        None
    };
    let (out, stats) = fuse_stack(&features, &rig, a.scheme, table.as_ref(), cands.as_deref(), seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).ctx(dir.display())?;
    }
    out.save(&a.out).plain()?;
    let c = &stats.cross;
    println!(
        "cross-view q {} kv {} map {} passthrough {}/{}",
        c.q_elements, c.kv_elements, c.attn_map_elements, c.passthrough_queries, c.queries
    );
    Ok(())
}

fn adapt(a: &AdaptArgs) -> CliResult<()> {
    let matches = MatchSet::load(&a.matches).ctx(a.matches.display())?;
    let raster = RasterMap::load_dir(&a.raster).plain()?;
    let mesh = load_mesh(&a.mesh)?;
    let rig = load_rig(&a.rig)?;
    let mut config = FitConfig { self_stride: a.self_stride, ..FitConfig::default() };
    config.descent.max_iterations = a.max_iterations;
    let result = fit_transform(&matches, &raster, &mesh, &rig, &config).ctx("adapt")?;
    write_text(&a.out, &to_json(&result))?;
    println!("loss {:.6e} after {} iterations", result.final_loss, result.iterations);
    Ok(())
}

/// One crop per camera plus the cropped cameras (same ids).
fn crops_for(rig: &Rig, keypoints: &KeypointsFile, size: u32) -> CliResult<(Vec<CropSpec>, Rig)> {
    let points = keypoints.points();
    let pelvis = keypoints.pelvis();
    let mut crops = Vec::with_capacity(rig.len());
    let mut cams = Vec::with_capacity(rig.len());
    for (&id, cam) in rig.ids().iter().zip(rig.cameras()) {
        let crop = compute_crop(id, cam, &points, &pelvis, size).ctx(format_args!("crop of view {id}"))?;
        cams.push(apply_crop_to_intrinsics(cam, &crop).ctx(format_args!("crop of view {id}"))?);
        crops.push(crop);
    }
    Ok((crops, Rig::new(rig.ids().to_vec(), cams).ctx("cropped rig")?))
}

fn skeleton_images(rig: &Rig, keypoints: &KeypointsFile) -> Vec<ScaleFeatures> {
    let bones = keypoints.bones.clone().unwrap_or_default();
    project_keypoints(rig.cameras(), &keypoints.points())
        .iter()
        .zip(rig.cameras())
        .map(|(kps, cam)| render_skeleton(kps, &bones, cam.width() as usize, cam.height() as usize))
        .collect()
}

fn save_image(img: &ScaleFeatures, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(dir.display())?;
    }
    Tensor::f32(vec![img.channels, img.height, img.width], img.data.clone())
        .ctx(path.display())?
        .save(path)
        .ctx(path.display())
}

fn crop(a: &CropArgs) -> CliResult<()> {
    let rig = load_rig(&a.rig)?;
    let kps = KeypointsFile::load(&a.keypoints).ctx(a.keypoints.display())?;
    let (crops, cropped) = crops_for(&rig, &kps, a.size)?;
    fs::create_dir_all(&a.out).ctx(a.out.display())?;
    write_text(&a.out.join("crops.json"), &to_json(&crops))?;
    write_text(&a.out.join("rig.json"), &cropped.to_json_string())?;
    if a.skeletons {
        for (id, img) in cropped.ids().iter().zip(skeleton_images(&cropped, &kps)) {
            save_image(&img, &a.out.join(format!("skeleton_{id}.mtnsr")))?;
        }
    }
    Ok(())
}

fn bench(a: &BenchArgs, seed: u64) -> CliResult<()> {
    let sizes = a
        .sizes
        .iter()
        .map(|&s| ComplexityParams::new(a.views, s, a.channels, a.samples))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let schemes: Vec<Scheme> = a.schemes.iter().map(|&s| s.into()).collect();
    let config = BenchConfig { seed, budget_bytes: a.budget_mib.saturating_mul(1 << 20), raster_factor: a.factor };
    let report = run_benchmark(&schemes, &sizes, &config).ctx("bench")?;
    print!("{}", report.to_table(true, true));
    if let Some(p) = &a.json {
        write_text(p, &(report.to_json(a.timings, true) + "\n"))?;
    }
    if let Some(p) = &a.table {
        write_text(p, &report.to_table(a.timings, true))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DemoSummary {
    seed: u64,
    fusion: Vec<(String, StageStats)>,
    frontal_view: i64,
    fitted_frontal_eye: [f64; 3],
    adaptation_final_loss: f64,
    adaptation_iterations: usize,
    adaptation_rotation_error_deg: f64,
    perturbed_mpjpe: f64,
}

/// Seeded synthetic run through every stage. All artifacts depend only on
/// the seed.
fn demo(out: &Path, seed: u64) -> CliResult<()> {
    fs::create_dir_all(out).ctx(out.display())?;
    let (n, size, channels, factor) = (4, 8, 8, DEFAULT_RASTER_FACTOR as usize);

    // fusion pipeline
    let dir = out.join("fusion");
    let fx = fusion_fixture(n, size, channels, factor, seed).ctx("fusion fixture")?;
    write_text(&dir.join("mesh.obj"), &fx.mesh.to_obj_string())?;
    write_text(&dir.join("rig.json"), &fx.rig.to_json_string())?;
    for (&id, cam) in fx.rig.ids().iter().zip(fx.rig.cameras()) {
        let raster = rasterize_mesh(&fx.mesh, cam, size * factor, size * factor).ctx("rasterize")?;
        raster.save_dir(&dir.join(format!("raster/view_{id}"))).plain()?;
    }
    for (id, agg) in fx.rig.ids().iter().zip(&fx.aggregates) {
        agg.save_dir(&dir.join(format!("aggregate/view_{id}"))).plain()?;
    }
    fx.table.save_dir(&dir.join("table")).plain()?;
    fx.features.save(&dir.join("features.mtnsr")).plain()?;
    let emb: Vec<f32> = fx.embeddings.iter().flat_map(|e| e.to_f32()).collect();
    let e = fx.embeddings[0].len();
    Tensor::f32(vec![n, e], emb).ctx("embeddings")?.save(&dir.join("embeddings.mtnsr")).plain()?;
    let cands = fx.epipolar(8).ctx("epipolar candidates")?;
    let mut fusion_stats = Vec::new();
    for (scheme, name) in [
        (FuseScheme::SelfOnly, "self"),
        (FuseScheme::Mesh, "mesh"),
        (FuseScheme::Dense, "dense"),
        (FuseScheme::Epipolar, "epipolar"),
    ] {
        let (fused, stats) = fuse_stack(&fx.features, &fx.rig, scheme, Some(&fx.table), Some(&cands), seed)?;
        fused.save(&dir.join(format!("fused_{name}.mtnsr"))).plain()?;
        fusion_stats.push((name.to_string(), stats));
    }

    // encoders and the full block against a reference view
    let enc = out.join("encoders");
    let image = ScaleFeatures::seeded(3, size * 4, size * 4, stream_seed(seed, 20));
    save_image(&image, &enc.join("reference_image.mtnsr"))?;
    let pyramid = ResidualEncoder::seeded(3, channels, 3, stream_seed(seed, 21)).encode(&image).ctx("reference encoder")?;
    for s in pyramid.scales() {
        save_image(s, &enc.join(format!("reference_{}x{}.mtnsr", s.width, s.height)))?;
    }
    let reference = RefContext { ref_view: 0, embedding: fx.embeddings[0].clone() };
    let block = meat_block(&fx.features, &fx.table, &pyramid, &fx.embeddings, &reference, &BlockParams::seeded(channels, e, seed))
        .ctx("fusion block")?;
    block.save(&dir.join("block.mtnsr")).plain()?;

    // data preparation on a stick figure seen by an orbit rig
    let prep = out.join("dataprep");
    let pelvis = Vector3::new(0.1, 0.95, -0.2);
    let (kps, tree) = stick_figure(pelvis);
    write_text(&prep.join("keypoints.json"), &(kps.to_json_string() + "\n"))?;
    let orbit = Rig::from_cameras(sample_orbit_cameras(&pelvis, 3.0, 0.1, 0.7, 8, 256, 256).ctx("orbit")?).ctx("orbit")?;
    write_text(&prep.join("orbit_rig.json"), &orbit.to_json_string())?;
    let facing = Vector3::new(0.3, 0.0, 1.0);
    let frontal = select_frontal_view(&orbit, &pelvis, &facing).ctx("select-front")?;
    write_text(&prep.join("frontal.json"), &to_json(&serde_json::json!({ "view": frontal })))?;
    let (crops, cropped) = crops_for(&orbit, &kps, 64)?;
    write_text(&prep.join("crops.json"), &to_json(&crops))?;
    write_text(&prep.join("cropped_rig.json"), &cropped.to_json_string())?;
    let skeletons = skeleton_images(&cropped, &kps);
    let kp_encoder = KeypointEncoder::new(16, channels, stream_seed(seed, 30));
    for (id, img) in cropped.ids().iter().zip(&skeletons) {
        save_image(img, &prep.join(format!("skeleton_{id}.mtnsr")))?;
    }
    let kp_features = keypoint_encode(&skeletons[0], &kp_encoder).ctx("keypoint encoder")?;
    save_image(&kp_features, &prep.join("keypoint_features.mtnsr"))?;

    let frontal_cam = rig_camera(&orbit, frontal)?;
    let points = kps.points();
    let kp2d: Vec<Vector2<f64>> = points.iter().map(|p| frontal_cam.project_point(p)).collect::<Result<_, _>>().ctx("projection")?;
    let fit_cfg = FrontalFitConfig {
        fov: 0.7,
        width: 256,
        height: 256,
        descent: DescentConfig { max_iterations: 500, ..FrontalFitConfig::default().descent },
        ..FrontalFitConfig::default()
    };
    let fitted = fit_frontal_camera(&points, &kp2d, &pelvis, &fit_cfg).ctx("frontal camera fit")?;
    write_text(&prep.join("fitted_frontal.json"), &Rig::new(vec![frontal], vec![fitted.clone()]).ctx("rig")?.to_json_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 40));
    let perturbed = perturb_joints(&tree, &points, MAIN_JOINT_SIGMA, HAND_JOINT_SIGMA, &mut rng).ctx("perturbation")?;
    let perturbed_file = KeypointsFile { joints: perturbed.iter().map(|p| [p.x, p.y, p.z]).collect(), ..kps.clone() };
    write_text(&prep.join("perturbed_keypoints.json"), &(perturbed_file.to_json_string() + "\n"))?;

    // mesh alignment
    let adapt_dir = out.join("adaptation");
    let inst = adaptation_instance(&InstanceConfig { raster_size: 64, ..InstanceConfig::default() }, stream_seed(seed, 50))
        .ctx("adaptation instance")?;
    write_text(&adapt_dir.join("mesh.obj"), &inst.mesh.to_obj_string())?;
    inst.raster.save_dir(&adapt_dir.join("raster")).plain()?;
    write_text(&adapt_dir.join("rig.json"), &inst.rig.to_json_string())?;
    write_text(&adapt_dir.join("matches.json"), &(inst.matches.to_json_string() + "\n"))?;
    write_text(&adapt_dir.join("truth.json"), &to_json(&inst.truth))?;
    let mut fit = FitConfig::default();
    fit.descent.max_iterations = 3000;
    let result = fit_transform(&inst.matches, &inst.raster, &inst.mesh, &inst.rig, &fit).ctx("adapt")?;
    write_text(&adapt_dir.join("result.json"), &to_json(&result))?;
    let rot_err = {
        let a = result.transform.rotation().ctx("fitted rotation")?;
        let b = inst.truth.rotation().ctx("true rotation")?;
        let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos().to_degrees()
    };

    // cost table, without the run-dependent columns
    let bench_dir = out.join("bench");
    let sizes = [4u64, 8]
        .iter()
        .map(|&s| ComplexityParams::new(n as u64, s, channels as u64, 4))
        .collect::<Result<Vec<_>, _>>()
        .ctx("bench sizes")?;
    let config = BenchConfig { seed, budget_bytes: 64 << 20, raster_factor: factor };
    let report = run_benchmark(&Scheme::ALL, &sizes, &config).ctx("bench")?;
    write_text(&bench_dir.join("report.json"), &(report.to_json(false, false) + "\n"))?;
    write_text(&bench_dir.join("table.txt"), &report.to_table(false, false))?;

    let summary = DemoSummary {
        seed,
        fusion: fusion_stats,
        frontal_view: frontal,
        fitted_frontal_eye: fitted.center().into(),
        adaptation_final_loss: result.final_loss,
        adaptation_iterations: result.iterations,
        adaptation_rotation_error_deg: rot_err,
        perturbed_mpjpe: meatkit::adaptation::mpjpe(&points, &perturbed),
    };
    write_text(&out.join("summary.json"), &to_json(&summary))?;
    println!("demo artifacts written to {}", out.display());
    Ok(())
}
