//! Commands behind the `rado` binary.

pub mod config;

use config::{Baseline, RunConfig, SynthSettings};
use rado::autodiff::{load_checkpoint, save_checkpoint};
use rado::baselines::icp_odometry;
use rado::evaluation::{export_plot_data, kitti_metrics, pose_loss, MetricReport, Trajectory};
use rado::lie::Pose;
use rado::neural_opt::{diagnostics_json_lines, Model};
use rado::pointcloud::{
    load_dataset, read_pose_file, synth_sequence, write_dataset, write_pose_file, Frame, SceneSpec,
    SyntheticScene, TrajectorySpec,
};
use rado::tracker::{sample_windows, track_sequence, train_toy, EpochLog, ScheduleCounters, TRAIN_FRAMES};
use rado::verify::{self, Check, Scope, SuiteOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rado::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 2 for usage or data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<rado::pointcloud::CloudError> for CliError {
    fn from(e: rado::pointcloud::CloudError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<rado::autodiff::CheckpointError> for CliError {
    fn from(e: rado::autodiff::CheckpointError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

/// Writes the effective config and a manifest listing the produced files.
fn finish_run(out: &Path, cfg: &RunConfig, command: &str, files: &[&str]) -> CliResult<()> {
    write_text(&out.join("effective_config.toml"), &cfg.to_toml())?;
    let manifest = serde_json::json!({
        "command": command,
        "config": "effective_config.toml",
        "outputs": files,
    });
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))
}

/// One synthetic sequence; speed and turn rate vary per index when ranges are set.
pub fn synth_frames(s: &SynthSettings, seed: u64, index: usize) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(index as u64));
    let step = match s.step_range {
        Some([lo, hi]) if hi > lo => rng.random_range(lo..hi),
        _ => s.step,
    };
    let yaw_rate = match s.yaw_rate_range {
        Some([lo, hi]) if hi > lo => rng.random_range(lo..hi),
        _ => s.yaw_rate,
    };
    let spec = SceneSpec {
        seed: rng.random(),
        ..s.scene
    };
    let traj = TrajectorySpec {
        frames: s.frames,
        step,
        yaw_rate,
    };
    synth_sequence(&SyntheticScene::generate(&spec, &traj), s.frames)
}

/// Writes one dataset per sequence (`seq_NNN/` when there are several).
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let out = required(&cfg.out, "out")?;
    if cfg.synth.frames < 2 {
        return Err(CliError::Usage("synthetic sequences need at least 2 frames".into()));
    }
    let mut dirs = Vec::new();
    for k in 0..cfg.synth.sequences {
        let dir = if cfg.synth.sequences == 1 {
            out.clone()
        } else {
            out.join(format!("seq_{k:03}"))
        };
        let frames = synth_frames(&cfg.synth, cfg.seed, k);
        let manifest = serde_json::json!({
            "command": "synth",
            "config": "effective_config.toml",
            "seed": cfg.seed,
            "sequence": k,
            "frames": frames.len(),
        });
        write_dataset(&dir, &frames, &manifest)?;
        write_text(&dir.join("effective_config.toml"), &cfg.to_toml())?;
        dirs.push(dir);
    }
    if cfg.synth.sequences > 1 {
        let names: Vec<String> = (0..cfg.synth.sequences).map(|k| format!("seq_{k:03}/")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        finish_run(out, cfg, "synth", &refs)?;
    }
    Ok(dirs)
}

fn load_model(dir: &Path) -> CliResult<(Model, rado::autodiff::ParamStore)> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", dir.display())));
    }
    let (store, arch) = load_checkpoint(dir)?;
    let model = Model::from_architecture(&arch)
        .map_err(|e| CliError::Usage(format!("bad architecture in {}: {e}", dir.display())))?;
    Ok((model, store))
}

pub struct OdometryOutput {
    pub poses: Vec<Pose>,
    pub counters: Option<ScheduleCounters>,
}

/// Tracks a dataset and writes `trajectory.txt` and `diagnostics.jsonl`.
pub fn cmd_odometry(cfg: &RunConfig) -> CliResult<OdometryOutput> {
    let out = required(&cfg.out, "out")?;
    let data = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let origin = data
        .ground_truth
        .as_ref()
        .and_then(|g| g.first().copied())
        .unwrap_or_else(Pose::identity);
    let (poses, diagnostics, counters) = match cfg.baseline {
        Baseline::Icp => (icp_odometry(&data.frames, &origin, &cfg.icp)?, String::new(), None),
        Baseline::None => {
            let (model, store) = load_model(required(&cfg.checkpoint, "checkpoint")?)?;
            let (poses, counters, reports) = track_sequence(&model, &store, &cfg.tracker, &data.frames, origin)?;
            (poses, diagnostics_json_lines(&reports), Some(counters))
        }
    };
    create_dir(out)?;
    write_pose_file(&out.join("trajectory.txt"), &poses)?;
    let mut diag = diagnostics;
    if let Some(c) = &counters {
        diag.push_str(&serde_json::to_string(&serde_json::json!({ "schedule": c })).expect("json"));
        diag.push('\n');
    }
    write_text(&out.join("diagnostics.jsonl"), &diag)?;
    finish_run(out, cfg, "odometry", &["trajectory.txt", "diagnostics.jsonl"])?;
    Ok(OdometryOutput { poses, counters })
}

pub struct EvalOutput {
    pub report: MetricReport,
    pub pose_loss: f64,
}

pub fn evaluate(cfg: &RunConfig, predicted: &[Pose], truth: &[Pose]) -> CliResult<EvalOutput> {
    let pred = Trajectory::new(predicted.to_vec());
    let gt = Trajectory::new(truth.to_vec());
    let lengths = cfg.lengths.clone().unwrap_or_else(|| cfg.mode.lengths());
    Ok(EvalOutput {
        report: kitti_metrics(&pred, &gt, &lengths, cfg.mode)?,
        pose_loss: pose_loss(&pred, &gt)?,
    })
}

/// Metrics of `predicted` against `truth` as JSON, a table and plot data.
pub fn cmd_eval(cfg: &RunConfig, predicted: &Path, truth: &Path) -> CliResult<EvalOutput> {
    let out = required(&cfg.out, "out")?;
    let p = read_pose_file(predicted)?;
    let t = read_pose_file(truth)?;
    let result = evaluate(cfg, &p, &t)?;
    create_dir(out)?;
    let json = serde_json::json!({ "metrics": result.report, "pose_loss": result.pose_loss });
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    write_text(
        &out.join("metrics.txt"),
        &format!("{}\npose_loss {}\n", result.report, result.pose_loss),
    )?;
    export_plot_data(
        out,
        &[
            ("truth".to_string(), Trajectory::new(t)),
            ("predicted".to_string(), Trajectory::new(p)),
        ],
    )?;
    finish_run(
        out,
        cfg,
        "eval",
        &["metrics.json", "metrics.txt", "trajectories.csv", "trajectories.svg"],
    )?;
    Ok(result)
}

/// Runs the finite-difference suites; any failed check is a numerical failure.
pub fn cmd_gradcheck(scope: Scope, opts: &SuiteOptions) -> CliResult<Vec<Check>> {
    Ok(verify::run(scope, opts)?)
}

pub fn format_check(c: &Check) -> String {
    format!(
        "{} [{}] {}: max rel error {:.3e} (tol {:.0e})",
        if c.passed { "PASS" } else { "FAIL" },
        c.suite,
        c.name,
        c.max_rel_error,
        c.tol
    )
}

/// Training sequences from `cfg.dataset` (a dataset or a directory of them) or synthesized.
pub fn training_sequences(cfg: &RunConfig) -> CliResult<Vec<Vec<Frame>>> {
    let Some(root) = &cfg.dataset else {
        return Ok((0..cfg.train.sequences)
            .map(|k| synth_frames(&cfg.synth, cfg.seed, k))
            .collect());
    };
    let mut dirs = vec![root.clone()];
    if !root.join("index.txt").exists() {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("index.txt").exists())
            .collect();
        subs.sort();
        dirs = subs;
    }
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no datasets under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let data = load_dataset(d)?;
            let gt = data
                .ground_truth
                .ok_or_else(|| CliError::Usage(format!("{} has no ground truth", d.display())))?;
            Ok(data
                .frames
                .into_iter()
                .zip(gt)
                .map(|(cloud, pose)| Frame { cloud, pose })
                .collect())
        })
        .collect()
}

pub struct TrainOutput {
    pub model: Model,
    pub store: rado::autodiff::ParamStore,
    pub initial_store: rado::autodiff::ParamStore,
    pub logs: Vec<EpochLog>,
}

/// Trains from a seeded initialization; writes `epoch_NNN/`, `final/` and `loss.csv`.
pub fn cmd_train_toy(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let out = required(&cfg.out, "out")?;
    let samples: Vec<_> = training_sequences(cfg)?
        .iter()
        .flat_map(|s| sample_windows(s, TRAIN_FRAMES))
        .collect();
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no {TRAIN_FRAMES}-frame training windows")));
    }
    let model = Model::new(&cfg.train.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.init(&mut rng);
    let initial_store = store.clone();
    let logs = train_toy(&model, &mut store, &samples, &cfg.train.to_train_config(cfg.seed, &cfg.tracker), Some(out))?;
    save_checkpoint(&out.join("final"), &store, &model.architecture())?;
    finish_run(out, cfg, "train-toy", &["loss.csv", "epoch_000/", "final/"])?;
    Ok(TrainOutput {
        model,
        store,
        initial_store,
        logs,
    })
}
