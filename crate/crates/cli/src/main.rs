use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fragrecon::bench::{bench, BenchConfig};
use fragrecon::pipeline::{
    eval_views, evaluate, run_pipeline, write_outputs, Dataset, EvalConfig, Mode, ModelWeights, RunConfig, SynthConfig,
};
use fragrecon::surface::read_ply;
use fragrecon::synth::Scene;
use fragrecon::Error;

#[derive(Parser)]
#[command(name = "fragrecon", version, about = "Incremental fragment-based 3D reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a scene file (or the built-in room).
    SynthGen {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// JSON capture settings (frames, width, height, fx, fy, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a dataset or scene and write mesh, volumes and timing.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// learned | averaging-ablation | classical-oracle
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        fragment_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a predicted mesh against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mesh; defaults to the dataset's gt_mesh.ply.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Dataset providing views for culling and 2D metrics.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure global fusion scaling and determinism.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input() {
            Failure::Input(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_report(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

fn load_mesh(path: &Path) -> Result<fragrecon::surface::Mesh, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(read_ply(&mut BufReader::new(file))?)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthGen {
            scene,
            config,
            frames,
            seed,
            out,
        } => {
            let scene = match scene {
                Some(p) => Scene::load(&p)?,
                None => Scene::desk_room(),
            };
            let mut synth: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(n) = frames {
                synth.frames = n;
            }
            let data = Dataset::synthesize(&scene, &synth, seed, fragrecon::priors::DEFAULT_CONFIDENCE_DECAY)?;
            data.save(&out)?;
            scene.save(&out.join("scene.json"))?;
            eprintln!("wrote {} frames to {}", data.frames.len(), out.display());
        }
        Command::Run {
            config,
            dataset,
            scene,
            mode,
            weights,
            fragment_size,
            seed,
            out,
        } => {
            let mut cfg: RunConfig = match config {
                Some(p) => read_json(&p)?,
                None => RunConfig::default(),
            };
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            if scene.is_some() {
                cfg.scene = scene;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if weights.is_some() {
                cfg.weights = weights;
            }
            if let Some(n) = fragment_size {
                cfg.fragment_size = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            cfg.validate()?;
            let data = cfg.load_input()?;
            let model = match (&cfg.weights, cfg.mode) {
                (_, Mode::ClassicalOracle) => None,
                (Some(p), _) => Some(ModelWeights::load(p)?),
                (None, _) => Some(ModelWeights::seeded(cfg.seed)),
            };
            let output = run_pipeline(&cfg, &data, model.as_ref())?;
            write_outputs(&output, &cfg.grid_spec(), &cfg.out)?;
            if let Some(m) = &model {
                m.save(&cfg.out.join("weights.sstw"))?;
            }
            eprintln!(
                "{} frames, {} fragments, {} triangles -> {}",
                data.frames.len(),
                output.fragments.len(),
                output.mesh.triangles.len(),
                cfg.out.display()
            );
            write_report(&output.timing, None)?;
        }
        Command::Eval {
            pred,
            gt,
            dataset,
            config,
            tau,
            seed,
            out,
        } => {
            let mut ec: EvalConfig = match config {
                Some(p) => read_json(&p)?,
                None => EvalConfig::default(),
            };
            if let Some(t) = tau {
                ec.tau_m = t;
            }
            if let Some(s) = seed {
                ec.seed = s;
            }
            let data = match &dataset {
                Some(d) => Some(Dataset::load(d, fragrecon::priors::DEFAULT_CONFIDENCE_DECAY)?),
                None => None,
            };
            let gt_mesh = match (&gt, &data) {
                (Some(p), _) => load_mesh(p)?,
                (None, Some(d)) => d
                    .gt_mesh
                    .clone()
                    .ok_or_else(|| Failure::Input("dataset has no gt_mesh.ply; pass --gt".into()))?,
                (None, None) => return Err(Failure::Input("need --gt or --dataset".into())),
            };
            let views = data.as_ref().map(eval_views).unwrap_or_default();
            let report = evaluate(&load_mesh(&pred)?, &gt_mesh, &views, &ec)?;
            write_report(&report, out.as_deref())?;
        }
        Command::Bench { config, seed, out } => {
            let mut bc: BenchConfig = match config {
                Some(p) => read_json(&p)?,
                None => BenchConfig::default(),
            };
            if let Some(s) = seed {
                bc.seed = s;
            }
            let report = bench(&bc)?;
            write_report(&report, out.as_deref())?;
            if !report.scaling_ok {
                return Err(Failure::Internal(format!(
                    "global fusion time ratio {:.3} exceeds {:.3}",
                    report.gstf_time_ratio, report.allowed_time_ratio
                )));
            }
            if !report.deterministic {
                return Err(Failure::Internal("single-threaded and parallel outputs differ".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
