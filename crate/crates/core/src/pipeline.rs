//! End-to-end orchestration: datasets on disk or synthesized in memory,
//! fragment scheduling, the learned / averaging / classical runs, output
//! artifacts and mesh evaluation.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{backproject_features, EncoderWeights, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::{metrics_2d, metrics_3d, sample_mesh, MetricsReport2D, MetricsReport3D, DEFAULT_TAU, SAMPLES_PER_M2};
use crate::geom::{load_poses, project, save_poses, Intrinsics, Pose, Vec3};
use crate::gstf::{
    classical_fusion_step, fuse_fragment_global_with, DepthView, FragmentLevels, GlobalVolumes, GstfParams,
    DEFAULT_OCCUPANCY_THRESHOLD, DEFAULT_TRUNCATION,
};
use crate::image::{DepthMap, Image};
use crate::lstf::{fuse_views, ExplicitWeightParams, FusionMode, LstfParams, DEFAULT_FRAGMENT_SIZE};
use crate::nn::{Initializer, WeightStore};
use crate::priors::{
    make_prior, read_prior_file, simulate_slam_priors, write_prior_file, GeometryPrior, DEFAULT_CONFIDENCE_DECAY,
    MAX_PRIOR_DEPTH,
};
use crate::surface::{marching_cubes, marching_cubes_with, read_ply, render_depth, write_ply, Mesh, MissingCorner};
use crate::synth::{make_trajectory, raycast_depth, render_color, OrbitParams, Scene, TrajectoryMode};
use crate::volume::{allocate_fragment_keys, write_tsdf_dump, GridSpec, SparseVolume, TsdfVoxel, FINEST_LEVEL, NUM_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Learned,
    #[serde(alias = "averaging")]
    AveragingAblation,
    #[serde(alias = "classical")]
    ClassicalOracle,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidParameter(format!("unknown mode '{s}'")))
    }
}

/// Which depth the classical path integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalInput {
    #[default]
    Depth,
    Priors,
}

/// Synthetic capture settings used when the input is a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub trajectory: TrajectoryMode,
    pub orbit: OrbitParams,
    pub prior_points: usize,
    pub prior_noise_m: f64,
    pub prior_error_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 27,
            width: 64,
            height: 48,
            fx: 48.0,
            fy: 48.0,
            trajectory: TrajectoryMode::Orbit,
            orbit: OrbitParams::default(),
            prior_points: 200,
            prior_noise_m: 0.01,
            prior_error_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) * 0.5,
            (self.height as f64 - 1.0) * 0.5,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory; takes precedence over `scene`.
    pub dataset: Option<PathBuf>,
    /// Scene file synthesized on the fly with `synth`.
    pub scene: Option<PathBuf>,
    pub synth: SynthConfig,
    pub fragment_size: usize,
    pub finest_voxel_m: f64,
    pub origin: [f64; 3],
    pub truncation_m: f64,
    pub occupancy_threshold: f32,
    pub confidence_decay: f64,
    pub explicit_weight: ExplicitWeightParams,
    pub max_depth_m: f64,
    pub mode: Mode,
    pub classical_input: ClassicalInput,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            scene: None,
            synth: SynthConfig::default(),
            fragment_size: DEFAULT_FRAGMENT_SIZE,
            finest_voxel_m: 0.04,
            origin: [0.0; 3],
            truncation_m: DEFAULT_TRUNCATION,
            occupancy_threshold: DEFAULT_OCCUPANCY_THRESHOLD,
            confidence_decay: DEFAULT_CONFIDENCE_DECAY,
            explicit_weight: ExplicitWeightParams::default(),
            max_depth_m: MAX_PRIOR_DEPTH,
            mode: Mode::Learned,
            classical_input: ClassicalInput::Depth,
            weights: None,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.fragment_size == 0 {
            return bad("fragment size must be at least 1");
        }
        let positive = [
            ("finest voxel size", self.finest_voxel_m),
            ("truncation", self.truncation_m),
            ("confidence decay", self.confidence_decay),
            ("sigma base", self.explicit_weight.sigma_base),
            ("error reference", self.explicit_weight.error_ref),
            ("max depth", self.max_depth_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return bad("occupancy threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::with_finest(Vec3::from(self.origin), self.finest_voxel_m)
    }

    /// Loads the dataset directory or synthesizes the scene.
    pub fn load_input(&self) -> Result<Dataset> {
        match (&self.dataset, &self.scene) {
            (Some(dir), _) => Dataset::load(dir, self.confidence_decay),
            (None, Some(scene)) => {
                Dataset::synthesize(&Scene::load(scene)?, &self.synth, self.seed, self.confidence_decay)
            }
            (None, None) => Err(Error::InvalidParameter("either a dataset or a scene is required".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: Pose,
    pub prior: GeometryPrior,
    /// Dense ground-truth depth, when available.
    pub depth: Option<DepthMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub gt_mesh: Option<Mesh>,
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

fn in_frame<T>(frame: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Frame {
        frame,
        message: e.to_string(),
    })
}

impl Dataset {
    /// Layout: `intrinsics.txt`, `poses.txt`, `frames/%06d.pgm`,
    /// `priors/%06d.txt`, optional `depth/%06d.pgm` (millimeters) and
    /// `gt_mesh.ply`.
    pub fn load(dir: &Path, confidence_decay: f64) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::parse(dir, "dataset directory not found"));
        }
        let intrinsics = Intrinsics::load(&dir.join("intrinsics.txt"))?;
        let poses = load_poses(&dir.join("poses.txt"))?;
        let frame_dir = dir.join("frames");
        let n_images = match fs::read_dir(&frame_dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "pgm" || x == "ppm"))
                .count(),
            Err(e) => return Err(Error::parse(&frame_dir, e.to_string())),
        };
        if n_images != poses.len() {
            return Err(Error::InvalidParameter(format!(
                "{} poses but {n_images} frames in {}",
                poses.len(),
                frame_dir.display()
            )));
        }
        let mut frames = Vec::with_capacity(poses.len());
        for (i, pose) in poses.into_iter().enumerate() {
            let pgm = frame_dir.join(frame_name(i, "pgm"));
            let path = if pgm.exists() { pgm } else { frame_dir.join(frame_name(i, "ppm")) };
            let image = in_frame(i, Image::load_pnm_rgb(&path))?;
            if (image.width, image.height) != (intrinsics.width, intrinsics.height) {
                return Err(Error::Frame {
                    frame: i,
                    message: format!("image is {}x{}, intrinsics say {}x{}", image.width, image.height, intrinsics.width, intrinsics.height),
                });
            }
            let (depth, error) = in_frame(i, read_prior_file(&dir.join("priors").join(frame_name(i, "txt"))))?;
            let prior = in_frame(i, make_prior(&depth, &error, confidence_decay))?;
            if (prior.width(), prior.height()) != (intrinsics.width, intrinsics.height) {
                return Err(Error::Frame {
                    frame: i,
                    message: "prior size differs from the image size".into(),
                });
            }
            let dpath = dir.join("depth").join(frame_name(i, "pgm"));
            let depth = if dpath.exists() {
                Some(in_frame(i, DepthMap::load_mm_pgm(&dpath))?)
            } else {
                None
            };
            frames.push(Frame { image, pose, prior, depth });
        }
        let mesh_path = dir.join("gt_mesh.ply");
        let gt_mesh = if mesh_path.exists() {
            Some(read_ply(&mut BufReader::new(fs::File::open(&mesh_path)?))?)
        } else {
            None
        };
        Ok(Self { intrinsics, frames, gt_mesh })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "priors", "depth"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        fs::write(dir.join("intrinsics.txt"), self.intrinsics.to_line() + "\n")?;
        let poses: Vec<Pose> = self.frames.iter().map(|f| f.pose).collect();
        save_poses(&dir.join("poses.txt"), &poses)?;
        for (i, f) in self.frames.iter().enumerate() {
            f.image.save_gray_pgm(&dir.join("frames").join(frame_name(i, "pgm")))?;
            write_prior_file(&dir.join("priors").join(frame_name(i, "txt")), &f.prior.depth, &f.prior.error)?;
            if let Some(d) = &f.depth {
                d.save_mm_pgm(&dir.join("depth").join(frame_name(i, "pgm")))?;
            }
        }
        if let Some(m) = &self.gt_mesh {
            write_ply(m, &mut BufWriter::new(fs::File::create(dir.join("gt_mesh.ply"))?))?;
        }
        Ok(())
    }

    /// Renders a trajectory through `scene`: gray images, exact depth,
    /// simulated sparse priors and the scene mesh.
    pub fn synthesize(scene: &Scene, cfg: &SynthConfig, seed: u64, confidence_decay: f64) -> Result<Self> {
        let k = cfg.intrinsics()?;
        let traj = make_trajectory(cfg.frames, cfg.trajectory, &cfg.orbit, seed)?;
        let frames = traj
            .poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let depth = raycast_depth(scene, &k, pose);
                let image = render_color(scene, &k, pose);
                let n = cfg.prior_points.min(depth.count_present());
                let frame_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
                let (sd, err) = simulate_slam_priors(&depth, n, cfg.prior_noise_m, cfg.prior_error_scale, frame_seed)?;
                let prior = make_prior(&sd, &err, confidence_decay)?;
                Ok(Frame {
                    image,
                    pose: *pose,
                    prior,
                    depth: Some(depth),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics: k,
            frames,
            gt_mesh: Some(scene.to_mesh()),
        })
    }

    pub fn cameras(&self, range: Range<usize>) -> Vec<(Intrinsics, Pose)> {
        self.frames[range].iter().map(|f| (self.intrinsics, f.pose)).collect()
    }
}

/// Consecutive fragments of `size` frames; the last may be shorter.
pub fn schedule_fragments(n_frames: usize, size: usize) -> Result<Vec<Range<usize>>> {
    if n_frames == 0 {
        return Err(Error::EmptySequence);
    }
    if size == 0 {
        return Err(Error::InvalidParameter("fragment size must be at least 1".into()));
    }
    Ok((0..n_frames)
        .step_by(size)
        .map(|s| s..(s + size).min(n_frames))
        .collect())
}

/// All learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub lstf: LstfParams,
    pub gstf: GstfParams,
}

impl ModelWeights {
    pub fn seeded(seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        Self {
            encoder: EncoderWeights::new(&mut init),
            lstf: LstfParams::new(&mut init),
            gstf: GstfParams::new(&mut init),
        }
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        self.encoder.export(&mut store);
        self.lstf.export(&mut store);
        self.gstf.export(&mut store);
        store
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let mut w = Self::seeded(0);
        w.encoder.import(store)?;
        w.lstf.import(store)?;
        w.gstf.import(store)?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = WeightStore::read(&mut BufReader::new(fs::File::open(path)?))?;
        Self::from_store(&store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().write(&mut BufWriter::new(fs::File::create(path)?))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FragmentTiming {
    pub fragment: usize,
    pub first_frame: usize,
    pub frames: usize,
    pub encode_ms: f64,
    pub backproject_ms: f64,
    pub lstf_ms: f64,
    pub gstf_ms: f64,
    pub surface_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub fragments: Vec<FragmentTiming>,
    pub frames: usize,
    pub total_ms: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentRecord {
    pub frames: Range<usize>,
    /// Learned modes: per-level candidate and fused keys.
    pub levels: Option<FragmentLevels>,
    /// Voxels written to the global model by this fragment.
    pub updated_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub mesh: Mesh,
    /// TSDF volumes in level order (classical runs hold only the finest).
    pub tsdf: Vec<SparseVolume<TsdfVoxel>>,
    pub global: Option<GlobalVolumes>,
    pub fragments: Vec<FragmentRecord>,
    pub timing: TimingReport,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline(cfg: &RunConfig, data: &Dataset, weights: Option<&ModelWeights>) -> Result<RunOutput> {
    cfg.validate()?;
    let fragments = schedule_fragments(data.frames.len(), cfg.fragment_size)?;
    let start = Instant::now();
    let mut out = match cfg.mode {
        Mode::ClassicalOracle => run_classical(cfg, data, &fragments)?,
        Mode::Learned | Mode::AveragingAblation => {
            let seeded;
            let w = match weights {
                Some(w) => w,
                None => {
                    seeded = ModelWeights::seeded(cfg.seed);
                    &seeded
                }
            };
            run_learned(cfg, data, &fragments, w)?
        }
    };
    out.timing.frames = data.frames.len();
    out.timing.total_ms = ms_since(start);
    out.timing.fps = if out.timing.total_ms > 0.0 {
        data.frames.len() as f64 / (out.timing.total_ms / 1e3)
    } else {
        0.0
    };
    Ok(out)
}

fn run_classical(cfg: &RunConfig, data: &Dataset, fragments: &[Range<usize>]) -> Result<RunOutput> {
    let spec = cfg.grid_spec();
    let mut volume = SparseVolume::new(FINEST_LEVEL);
    let mut records = Vec::new();
    let mut timing = TimingReport::default();
    for (fi, range) in fragments.iter().enumerate() {
        let t = Instant::now();
        let views = range
            .clone()
            .map(|i| {
                let f = &data.frames[i];
                let depth = match cfg.classical_input {
                    ClassicalInput::Depth => f.depth.as_ref().ok_or(Error::Frame {
                        frame: i,
                        message: "classical fusion needs a dense depth map".into(),
                    })?,
                    ClassicalInput::Priors => &f.prior.depth,
                };
                Ok(DepthView {
                    intrinsics: &data.intrinsics,
                    pose: &f.pose,
                    depth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let updated = classical_fusion_step(&views, &mut volume, &spec, cfg.truncation_m, cfg.max_depth_m)?;
        timing.fragments.push(FragmentTiming {
            fragment: fi,
            first_frame: range.start,
            frames: range.len(),
            gstf_ms: ms_since(t),
            ..Default::default()
        });
        records.push(FragmentRecord {
            frames: range.clone(),
            levels: None,
            updated_voxels: updated,
        });
    }
    let t = Instant::now();
    // unobserved corners are left out rather than read as free space
    let mesh = marching_cubes_with(&volume, &spec, MissingCorner::Skip);
    if let Some(last) = timing.fragments.last_mut() {
        last.surface_ms = ms_since(t);
    }
    Ok(RunOutput {
        mesh,
        tsdf: vec![volume],
        global: None,
        fragments: records,
        timing,
    })
}

fn run_learned(cfg: &RunConfig, data: &Dataset, fragments: &[Range<usize>], w: &ModelWeights) -> Result<RunOutput> {
    let spec = cfg.grid_spec();
    let fusion = match cfg.mode {
        Mode::AveragingAblation => FusionMode::Averaging,
        _ => FusionMode::Attention,
    };
    let k = &data.intrinsics;
    let mut global = GlobalVolumes::default();
    let mut records = Vec::new();
    let mut timing = TimingReport::default();
    for (fi, range) in fragments.iter().enumerate() {
        let frames = &data.frames[range.clone()];
        let t = Instant::now();
        type Pyramid = [FeatureMap; NUM_LEVELS];
        let encoded: Vec<(Pyramid, Pyramid)> = frames
            .par_iter()
            .enumerate()
            .map(|(j, f)| {
                in_frame(range.start + j, w.encoder.encode_image(&f.image))
                    .and_then(|c| Ok((c, in_frame(range.start + j, w.encoder.encode_prior(&f.prior))?)))
            })
            .collect::<Result<_>>()?;
        let encode_ms = ms_since(t);

        let t = Instant::now();
        let level0: Vec<_> = allocate_fragment_keys(&spec, 0, &data.cameras(range.clone()), cfg.max_depth_m)?
            .into_iter()
            .collect();
        let mut backproject_ms = ms_since(t);
        let mut lstf_ms = 0.0;
        let priors: Vec<&GeometryPrior> = frames.iter().map(|f| &f.prior).collect();

        let t_fuse = Instant::now();
        let levels = fuse_fragment_global_with(&mut global, &w.gstf, cfg.occupancy_threshold, level0, |level, candidates| {
            let l = level as usize;
            let t = Instant::now();
            let views = frames
                .iter()
                .zip(&encoded)
                .map(|(f, (color, geo))| backproject_features(&color[l], &geo[l], k, &f.pose, candidates, &spec))
                .collect::<Result<Vec<_>>>()?;
            backproject_ms += ms_since(t);
            let t = Instant::now();
            let fv = fuse_views(level, candidates, &views, &priors, &w.lstf.levels[l], &cfg.explicit_weight, fusion)?;
            lstf_ms += ms_since(t);
            Ok(fv)
        })?;
        let fuse_ms = ms_since(t_fuse);
        let gstf_ms = (fuse_ms - backproject_ms - lstf_ms).max(0.0);
        timing.fragments.push(FragmentTiming {
            fragment: fi,
            first_frame: range.start,
            frames: range.len(),
            encode_ms,
            backproject_ms,
            lstf_ms,
            gstf_ms,
            surface_ms: 0.0,
        });
        records.push(FragmentRecord {
            frames: range.clone(),
            updated_voxels: levels.total_fused(),
            levels: Some(levels),
        });
    }
    let t = Instant::now();
    let mesh = marching_cubes(&global.tsdf[FINEST_LEVEL as usize], &spec);
    if let Some(last) = timing.fragments.last_mut() {
        last.surface_ms = ms_since(t);
    }
    Ok(RunOutput {
        mesh,
        tsdf: global.tsdf.to_vec(),
        global: Some(global),
        fragments: records,
        timing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FragmentSummary {
    first_frame: usize,
    frames: usize,
    updated_voxels: usize,
    fused_per_level: Option<[usize; NUM_LEVELS]>,
}

/// Writes `mesh.ply`, `tsdf_level{l}.sstv`, `timing.json` and
/// `fragments.json` into `dir`.
pub fn write_outputs(out: &RunOutput, spec: &GridSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_ply(&out.mesh, &mut BufWriter::new(fs::File::create(dir.join("mesh.ply"))?))?;
    for vol in &out.tsdf {
        let path = dir.join(format!("tsdf_level{}.sstv", vol.level()));
        write_tsdf_dump(&mut BufWriter::new(fs::File::create(path)?), spec, vol)?;
    }
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&out.timing)?)?;
    let summary: Vec<FragmentSummary> = out
        .fragments
        .iter()
        .map(|f| FragmentSummary {
            first_frame: f.frames.start,
            frames: f.frames.len(),
            updated_voxels: f.updated_voxels,
            fused_per_level: f.levels.as_ref().map(|l| std::array::from_fn(|i| l.fused[i].len())),
        })
        .collect();
    fs::write(dir.join("fragments.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// One ground-truth view used for culling and 2D metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau_m: f64,
    pub samples_per_m2: f64,
    pub seed: u64,
    /// Points deeper than this in every view are culled.
    pub max_depth_m: f64,
    /// Points more than this behind the ground-truth surface are culled.
    pub occlusion_margin_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau_m: DEFAULT_TAU,
            samples_per_m2: SAMPLES_PER_M2,
            seed: 0,
            max_depth_m: MAX_PRIOR_DEPTH,
            occlusion_margin_m: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "3d")]
    pub metrics_3d: MetricsReport3D,
    /// Mean over views with valid ground truth.
    #[serde(rename = "2d")]
    pub metrics_2d: Option<MetricsReport2D>,
    pub per_view: Vec<MetricsReport2D>,
    pub pred_points: usize,
    pub gt_points: usize,
}

/// Ground-truth views from a dataset; frames without depth render the
/// ground-truth mesh instead.
pub fn eval_views(data: &Dataset) -> Vec<EvalView> {
    data.frames
        .iter()
        .filter_map(|f| {
            let depth = match (&f.depth, &data.gt_mesh) {
                (Some(d), _) => d.clone(),
                (None, Some(m)) => render_depth(m, &data.intrinsics, &f.pose),
                (None, None) => return None,
            };
            Some(EvalView {
                intrinsics: data.intrinsics,
                pose: f.pose,
                depth,
            })
        })
        .collect()
}

/// Keeps points seen by at least one view: inside the image, within
/// `max_depth`, and not hidden behind the ground-truth surface.
pub fn cull_points(points: &[Vec3], views: &[EvalView], max_depth: f64, margin: f64) -> Vec<Vec3> {
    if views.is_empty() {
        return points.to_vec();
    }
    points
        .par_iter()
        .filter(|p| {
            views.iter().any(|v| {
                let Some((px, z)) = project(&v.intrinsics, &v.pose, p) else {
                    return false;
                };
                let Some((x, y)) = px.nearest(v.depth.width, v.depth.height) else {
                    return false;
                };
                z <= max_depth && v.depth.get(x, y).is_some_and(|d| z <= d + margin)
            })
        })
        .copied()
        .collect()
}

/// 3D metrics on culled surface samples of both meshes (same sampling seed)
/// and 2D metrics of the predicted mesh rendered into every view.
pub fn evaluate(pred: &Mesh, gt: &Mesh, views: &[EvalView], cfg: &EvalConfig) -> Result<EvalReport> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted mesh"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth mesh"));
    }
    let cull = |m: &Mesh| {
        cull_points(
            &sample_mesh(m, cfg.samples_per_m2, cfg.seed),
            views,
            cfg.max_depth_m,
            cfg.occlusion_margin_m,
        )
    };
    let (pred_pts, gt_pts) = (cull(pred), cull(gt));
    let metrics_3d = metrics_3d(&pred_pts, &gt_pts, cfg.tau_m)?;
    let per_view: Vec<MetricsReport2D> = views
        .iter()
        .filter_map(|v| metrics_2d(&render_depth(pred, &v.intrinsics, &v.pose), &v.depth, None).ok())
        .collect();
    let metrics_2d = (!per_view.is_empty()).then(|| {
        let n = per_view.len() as f64;
        let mean = |f: fn(&MetricsReport2D) -> f64| per_view.iter().map(f).sum::<f64>() / n;
        MetricsReport2D {
            abs_rel: mean(|m| m.abs_rel),
            abs_diff_m: mean(|m| m.abs_diff_m),
            sq_rel_m: mean(|m| m.sq_rel_m),
            rmse_m: mean(|m| m.rmse_m),
            delta_125: mean(|m| m.delta_125),
            coverage: mean(|m| m.coverage),
        }
    });
    Ok(EvalReport {
        metrics_3d,
        metrics_2d,
        per_view,
        pred_points: pred_pts.len(),
        gt_points: gt_pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduling() {
        assert!(matches!(schedule_fragments(0, 9), Err(Error::EmptySequence)));
        assert_eq!(schedule_fragments(0, 9).unwrap_err().to_string(), "empty sequence");
        assert_eq!(schedule_fragments(10, 9).unwrap(), vec![0..9, 9..10]);
        assert_eq!(schedule_fragments(9, 9).unwrap(), vec![0..9]);
        assert_eq!(schedule_fragments(3, 1).unwrap(), vec![0..1, 1..2, 2..3]);
        for n in 1..40 {
            let f = schedule_fragments(n, 9).unwrap();
            let flat: Vec<usize> = f.iter().flat_map(|r| r.clone()).collect();
            assert_eq!(flat, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mode_names() {
        assert_eq!("learned".parse::<Mode>().unwrap(), Mode::Learned);
        assert_eq!("averaging-ablation".parse::<Mode>().unwrap(), Mode::AveragingAblation);
        assert_eq!("averaging".parse::<Mode>().unwrap(), Mode::AveragingAblation);
        assert_eq!("classical-oracle".parse::<Mode>().unwrap(), Mode::ClassicalOracle);
        assert_eq!("classical".parse::<Mode>().unwrap(), Mode::ClassicalOracle);
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: RunConfig = serde_json::from_str(r#"{"mode":"classical-oracle","seed":3}"#).unwrap();
        assert_eq!(cfg.fragment_size, 9);
        assert_eq!(cfg.mode, Mode::ClassicalOracle);
        cfg.validate().unwrap();
        let bad = RunConfig {
            fragment_size: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            truncation_m: -1.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn weights_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::seeded(5);
        let path = dir.path().join("w.sstw");
        w.save(&path).unwrap();
        assert_eq!(ModelWeights::load(&path).unwrap(), w);
    }
}
