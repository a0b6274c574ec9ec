//! Scaling benchmark for the global fusion stage.
//!
//! Scene scale is varied through image width at fixed focal length, which
//! widens the horizontal field of view and so grows the frustum volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, Dataset, Mode, ModelWeights, RunConfig, RunOutput, SynthConfig};
use crate::synth::Scene;
use crate::volume::NUM_LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Image widths, one per scale; multiples of 4.
    pub widths: Vec<usize>,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    pub seed: u64,
    /// Runs per scale; the fastest is reported.
    pub repeats: usize,
    /// Allowed time ratio per unit voxel ratio (1.25 allows 2.5 at 2x).
    pub slack: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64],
            height: 24,
            focal: 48.0,
            frames: 3,
            seed: 0,
            repeats: 3,
            slack: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub width: usize,
    pub active_voxels: usize,
    pub level_voxels: [usize; NUM_LEVELS],
    pub encode_ms: f64,
    pub backproject_ms: f64,
    pub lstf_ms: f64,
    pub gstf_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Last row over first row.
    pub voxel_ratio: f64,
    pub gstf_time_ratio: f64,
    pub allowed_time_ratio: f64,
    pub scaling_ok: bool,
    /// One-thread and default-pool runs agree bit for bit.
    pub deterministic: bool,
}

fn run_config(cfg: &BenchConfig, width: usize) -> RunConfig {
    RunConfig {
        mode: Mode::Learned,
        seed: cfg.seed,
        synth: SynthConfig {
            frames: cfg.frames,
            width,
            height: cfg.height,
            fx: cfg.focal,
            fy: cfg.focal,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    }
}

fn same_outputs(a: &RunOutput, b: &RunOutput) -> bool {
    a.mesh == b.mesh && a.tsdf == b.tsdf && a.global == b.global && a.fragments == b.fragments
}

pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.widths.len() < 2 {
        return Err(Error::InvalidParameter("bench needs at least two scales".into()));
    }
    let scene = Scene::desk_room();
    let weights = ModelWeights::seeded(cfg.seed);
    let mut rows = Vec::new();
    let mut first_output = None;
    for &width in &cfg.widths {
        let run_cfg = run_config(cfg, width);
        let data = Dataset::synthesize(&scene, &run_cfg.synth, cfg.seed, run_cfg.confidence_decay)?;
        let mut best: Option<BenchRow> = None;
        for _ in 0..cfg.repeats.max(1) {
            let out = run_pipeline(&run_cfg, &data, Some(&weights))?;
            let mut level_voxels = [0usize; NUM_LEVELS];
            for f in &out.fragments {
                if let Some(l) = &f.levels {
                    for (i, k) in l.fused.iter().enumerate() {
                        level_voxels[i] += k.len();
                    }
                }
            }
            let sum = |g: fn(&crate::pipeline::FragmentTiming) -> f64| out.timing.fragments.iter().map(g).sum::<f64>();
            let row = BenchRow {
                width,
                active_voxels: level_voxels.iter().sum(),
                level_voxels,
                encode_ms: sum(|t| t.encode_ms),
                backproject_ms: sum(|t| t.backproject_ms),
                lstf_ms: sum(|t| t.lstf_ms),
                gstf_ms: sum(|t| t.gstf_ms),
            };
            if best.as_ref().is_none_or(|b| row.gstf_ms < b.gstf_ms) {
                best = Some(row);
            }
            if first_output.is_none() {
                first_output = Some((run_cfg.clone(), data.clone(), out));
            }
        }
        rows.push(best.expect("at least one repeat"));
    }

    let (run_cfg, data, parallel) = first_output.expect("at least one scale");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let serial = pool.install(|| run_pipeline(&run_cfg, &data, Some(&weights)))?;
    let deterministic = same_outputs(&serial, &parallel);

    let (a, b) = (&rows[0], &rows[rows.len() - 1]);
    let voxel_ratio = b.active_voxels as f64 / a.active_voxels.max(1) as f64;
    let gstf_time_ratio = b.gstf_ms / a.gstf_ms.max(1e-9);
    let allowed_time_ratio = cfg.slack * voxel_ratio;
    Ok(BenchReport {
        scaling_ok: gstf_time_ratio <= allowed_time_ratio,
        rows,
        voxel_ratio,
        gstf_time_ratio,
        allowed_time_ratio,
        deterministic,
    })
}
