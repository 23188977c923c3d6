//! Supervised training of all weights through the unrolled operator.

use super::build_training_graph;
use crate::autodiff::{save_checkpoint, Adam, ParamStore};
use crate::lie::Pose;
use crate::neural_opt::{unroll, Model, UnrollConfig, UnrollProblem};
use crate::pointcloud::{random_rigid_augment, AugmentRange, Frame, PointCloud};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Frames per training sample.
pub const TRAIN_FRAMES: usize = 7;

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub clouds: Vec<PointCloud>,
    pub truth: Vec<Pose>,
}

impl TrainingSample {
    fn problem(&self) -> Result<UnrollProblem> {
        let g = build_training_graph(&self.clouds, &self.truth)?;
        Ok(UnrollProblem {
            clouds: self.clouds.clone(),
            truth: self.truth.clone(),
            initial: g.poses(),
            fixed: g.fixed(),
            edges: g.edges,
        })
    }

    fn augmented(&self, g: &Pose) -> TrainingSample {
        let (clouds, truth) = self
            .clouds
            .iter()
            .zip(&self.truth)
            .map(|(c, t)| random_rigid_augment(c, t, g))
            .unzip();
        TrainingSample { clouds, truth }
    }
}

/// Consecutive 7-frame windows starting every `stride` frames.
pub fn sample_windows(frames: &[Frame], stride: usize) -> Vec<TrainingSample> {
    let stride = stride.max(1);
    (0..)
        .map(|k| k * stride)
        .take_while(|s| s + TRAIN_FRAMES <= frames.len())
        .map(|s| TrainingSample {
            clouds: frames[s..s + TRAIN_FRAMES].iter().map(|f| f.cloud.clone()).collect(),
            truth: frames[s..s + TRAIN_FRAMES].iter().map(|f| f.pose).collect(),
        })
        .collect()
}

/// Step decay: the rate is multiplied by `decay` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Decays by `decay` after each third of `epochs`.
    pub fn thirds(initial: f64, decay: f64, epochs: usize) -> Self {
        let milestones = [1, 2]
            .iter()
            .map(|k| (k * epochs).div_ceil(3))
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        LrSchedule {
            initial,
            decay,
            milestones,
        }
    }

    /// Rate used during 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.initial * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub unroll: UnrollConfig,
    pub augment: Option<AugmentRange>,
    /// Gradients with a larger global norm are rescaled to it.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: LrSchedule::thirds(2e-4, 0.1, 10),
            seed: 0,
            unroll: UnrollConfig::default(),
            augment: Some(AugmentRange::default()),
            clip_norm: Some(10.0),
        }
    }
}

/// Mean losses of one epoch; epoch 0 is the evaluation before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean iteration-weighted unrolled loss.
    pub mean_loss: f64,
    /// Mean pose loss after the last iteration.
    pub mean_pose_loss: f64,
    pub seconds: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,lr,mean_loss,mean_pose_loss,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.lr, self.mean_loss, self.mean_pose_loss, self.seconds
        )
    }
}

fn clip(grads: &mut std::collections::BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Trains on `samples` one at a time with Adam. With `out_dir`, writes
/// `epoch_NNN/` checkpoints and `loss.csv` after every epoch.
pub fn train_toy(
    model: &Model,
    store: &mut ParamStore,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    let problems = samples.iter().map(TrainingSample::problem).collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut loss_sum = 0.0;
    let mut pose_sum = 0.0;
    for (i, p) in problems.iter().enumerate() {
        let r = unroll(model, store, p, &cfg.unroll, false)
            .map_err(|e| nonfinite(e, 0, i))?;
        loss_sum += r.loss;
        pose_sum += r.pose_losses.last().copied().unwrap_or(0.0);
    }
    let denom = problems.len().max(1) as f64;
    let mut logs = vec![EpochLog {
        epoch: 0,
        lr: 0.0,
        mean_loss: loss_sum / denom,
        mean_pose_loss: pose_sum / denom,
        seconds: start.elapsed().as_secs_f64(),
    }];
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(&dir.join("epoch_000"), store, &model.architecture())?;
            let path = dir.join("loss.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOSS_CSV_HEADER}\n{}", logs[0].csv_row()).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut adam = Adam::new(cfg.lr.initial);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        adam.lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pose_sum) = (0.0, 0.0);
        for &i in &order {
            let problem = match &cfg.augment {
                Some(range) => samples[i].augmented(&range.sample(&mut rng)).problem()?,
                None => problems[i].clone(),
            };
            let mut r = unroll(model, store, &problem, &cfg.unroll, true)
                .map_err(|e| nonfinite(e, epoch, i))?;
            let finite = r.loss.is_finite() && r.grads.values().flatten().all(|g| g.is_finite());
            if !finite {
                if let Some(dir) = out_dir {
                    dump(dir, epoch, i, &r.pose_losses);
                }
                return Err(Error::NonFiniteLoss { epoch, sample: i });
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut r.grads, c);
            }
            adam.step(store, &r.grads);
            loss_sum += r.loss;
            pose_sum += r.pose_losses.last().copied().unwrap_or(0.0);
        }
        let log = EpochLog {
            epoch,
            lr: adam.lr,
            mean_loss: loss_sum / denom,
            mean_pose_loss: pose_sum / denom,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let (Some(dir), Some((f, path))) = (out_dir, csv.as_mut()) {
            save_checkpoint(&dir.join(format!("epoch_{epoch:03}")), store, &model.architecture())?;
            writeln!(f, "{}", log.csv_row()).map_err(|e| Error::io(path, e))?;
        }
        logs.push(log);
    }
    Ok(logs)
}

fn nonfinite(e: Error, epoch: usize, sample: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, sample },
        other => other,
    }
}

fn dump(dir: &Path, epoch: usize, sample: usize, pose_losses: &[f64]) {
    let text = serde_json::json!({
        "epoch": epoch,
        "sample": sample,
        "pose_losses": pose_losses.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
    });
    // Best effort: the error returned to the caller carries the essentials.
    let _ = std::fs::write(dir.join("nonfinite_dump.json"), text.to_string());
}
