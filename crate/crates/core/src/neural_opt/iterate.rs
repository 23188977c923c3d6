//! Unrolled iterations over a frame graph, for inference and for training.

use super::ba::{amba_step, Damping, EdgeProblem, StepReport};
use super::diff::{diff_amba_steps, diff_pose_loss, pose_tensor, tensor_pose, DiffEdge};
use super::model::{FrameInputs, Model};
use super::operator::Operator;
use crate::autodiff::{accumulate_grads, backward, backward_with, ParamStore, Params, Tape, Tensor};
use crate::correlation::build_volume;
use crate::lie::Pose;
use crate::pointcloud::PointCloud;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    /// Gauss-Newton steps per operator iteration.
    pub ba_steps: usize,
    pub damping: Damping,
}

impl Default for IterConfig {
    fn default() -> Self {
        IterConfig {
            ba_steps: 2,
            damping: Damping::default(),
        }
    }
}

/// Correlation volumes keyed by frame pair `(lo, hi)`, stored as `V(F_lo, F_hi)`.
#[derive(Debug, Clone, Default)]
pub struct Volumes(BTreeMap<(usize, usize), Tensor>);

impl Volumes {
    pub fn new() -> Self {
        Volumes::default()
    }

    pub fn ensure(&mut self, frames: &[FrameInputs], a: usize, b: usize) -> Result<()> {
        let key = (a.min(b), a.max(b));
        if !self.0.contains_key(&key) {
            let v = build_volume(&frames[key.0].features, &frames[key.1].features)?;
            self.0.insert(key, v);
        }
        Ok(())
    }

    /// Volume for edge `a -> b` and whether it is stored transposed.
    pub fn get(&self, a: usize, b: usize) -> Option<(&Tensor, bool)> {
        self.0.get(&(a.min(b), a.max(b))).map(|v| (v, a > b))
    }

    /// Drops frame 0 and renumbers the rest down by one.
    pub fn remove_oldest(&mut self) {
        let old = std::mem::take(&mut self.0);
        self.0 = old
            .into_iter()
            .filter(|((a, _), _)| *a > 0)
            .map(|((a, b), v)| ((a - 1, b - 1), v))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Tensor)> {
        self.0.iter()
    }
}

/// Per-edge recurrent state.
#[derive(Debug, Clone)]
pub struct EdgeState {
    pub a: usize,
    pub b: usize,
    /// Flow of frame-`a` points toward frame `b` (meters).
    pub flow: Vec<[f64; 3]>,
    /// `None` until the first update, then the GRU state.
    pub hidden: Option<Tensor>,
    pub revision: Vec<[f64; 3]>,
    pub confidence: Vec<[f64; 3]>,
}

impl EdgeState {
    /// Flow initialized from the current poses.
    pub fn new(a: usize, b: usize, frames: &[FrameInputs], poses: &[Pose]) -> Self {
        let p1 = &frames[a].points;
        let warped = warp_points(p1, &poses[a], &poses[b]);
        EdgeState {
            a,
            b,
            flow: diff_points(&warped, p1),
            hidden: None,
            revision: vec![[0.0; 3]; p1.len()],
            confidence: vec![[0.0; 3]; p1.len()],
        }
    }
}

fn warp_points(p: &[[f64; 3]], t_a: &Pose, t_b: &Pose) -> Vec<[f64; 3]> {
    let rel = t_b.compose(&t_a.inverse());
    p.iter().map(|x| rel.act_array(x)).collect()
}

fn diff_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<[f64; 3]> {
    a.iter()
        .zip(b)
        .map(|(x, y)| [x[0] - y[0], x[1] - y[1], x[2] - y[2]])
        .collect()
}

fn to_tensor(v: &[[f64; 3]]) -> Tensor {
    Tensor::new(&[v.len(), 3], v.iter().flatten().copied().collect()).expect("rows of 3")
}

fn to_rows(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Output of the learned update of one edge.
#[derive(Debug, Clone)]
pub struct EdgeUpdate {
    pub hidden: Tensor,
    pub revision: Tensor,
    pub confidence: Tensor,
    /// Frame-`a` points warped into frame `b` at the current poses.
    pub warped: Vec<[f64; 3]>,
}

/// Warp, correlation lookup, GRU update and heads for one edge.
pub fn edge_update(
    op: &Operator,
    p: &Params,
    frames: &[FrameInputs],
    volumes: &Volumes,
    poses: &[Pose],
    edge: &EdgeState,
) -> Result<EdgeUpdate> {
    let (a, b) = (edge.a, edge.b);
    let warped = warp_points(&frames[a].points, &poses[a], &poses[b]);
    let (vol, transposed) = volumes
        .get(a, b)
        .ok_or_else(|| Error::Graph(format!("no correlation volume for {a} -> {b}")))?;
    let cf = op.lookup().forward(p, &warped, &frames[b].points, vol, transposed)?.cf;
    let hidden = edge.hidden.clone().unwrap_or_else(|| frames[a].hidden0.clone());
    let h = op.update(p, &hidden, &cf, &frames[a].context, &to_tensor(&edge.flow))?;
    let (revision, confidence) = op.predict_heads(p, &h)?;
    Ok(EdgeUpdate {
        hidden: h,
        revision,
        confidence,
        warped,
    })
}

/// Diagnostics of one operator iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub steps: Vec<StepReport>,
    pub mean_confidence: f64,
    pub mean_revision: f64,
}

pub fn diagnostics_json_lines(reports: &[IterationReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}

/// Applies the heads' outputs: the new state, and the flow implied by the target
/// (`warp(new poses) - P1` plus the remaining residual).
fn commit(edge: &mut EdgeState, up: &EdgeUpdate, p1: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let revision = to_rows(&up.revision);
    let target: Vec<[f64; 3]> = up
        .warped
        .iter()
        .zip(&revision)
        .map(|(w, d)| [w[0] + d[0], w[1] + d[1], w[2] + d[2]])
        .collect();
    edge.flow = diff_points(&target, p1);
    edge.hidden = Some(up.hidden.detach());
    edge.revision = revision;
    edge.confidence = to_rows(&up.confidence);
    target
}

/// Runs `n_iters` operator iterations, each followed by `cfg.ba_steps` Gauss-Newton
/// steps on the free poses.
#[allow(clippy::too_many_arguments)]
pub fn iterate(
    op: &Operator,
    store: &ParamStore,
    frames: &[FrameInputs],
    volumes: &Volumes,
    poses: &mut [Pose],
    fixed: &[bool],
    edges: &mut [EdgeState],
    n_iters: usize,
    cfg: &IterConfig,
) -> Result<Vec<IterationReport>> {
    let p = store.bind(None);
    let mut reports = Vec::with_capacity(n_iters);
    for iteration in 0..n_iters {
        let mut targets = Vec::with_capacity(edges.len());
        let (mut conf, mut rev, mut count) = (0.0, 0.0, 0usize);
        for e in edges.iter_mut() {
            let up = edge_update(op, &p, frames, volumes, poses, e)?;
            targets.push(commit(e, &up, &frames[e.a].points));
            conf += e.confidence.iter().flatten().sum::<f64>();
            rev += e.revision.iter().map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).sum::<f64>();
            count += e.revision.len();
        }
        let problems: Vec<EdgeProblem> = edges
            .iter()
            .zip(&targets)
            .map(|(e, t)| EdgeProblem {
                a: e.a,
                b: e.b,
                p1: &frames[e.a].points,
                target: t,
                weights: &e.confidence,
            })
            .collect();
        let mut steps = Vec::with_capacity(cfg.ba_steps);
        for _ in 0..cfg.ba_steps {
            steps.push(amba_step(poses, fixed, &problems, &cfg.damping)?);
        }
        let denom = count.max(1) as f64;
        reports.push(IterationReport {
            iteration,
            steps,
            mean_confidence: conf / (3.0 * denom),
            mean_revision: rev / denom,
        });
    }
    Ok(reports)
}

/// A frame graph with ground truth, as used for supervised unrolling.
#[derive(Debug, Clone)]
pub struct UnrollProblem {
    pub clouds: Vec<PointCloud>,
    pub truth: Vec<Pose>,
    pub initial: Vec<Pose>,
    pub fixed: Vec<bool>,
    /// Directed edges.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrollConfig {
    pub iters: usize,
    /// Weight of iteration `i` is `gamma^(iters - 1 - i)`.
    pub gamma: f64,
    pub iter: IterConfig,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            iters: 15,
            gamma: 0.9,
            iter: IterConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnrollResult {
    /// Weighted sum of the per-iteration pose losses.
    pub loss: f64,
    /// Pose loss after each iteration.
    pub pose_losses: Vec<f64>,
    pub poses: Vec<Pose>,
    /// Gradient per parameter name, empty unless requested.
    pub grads: BTreeMap<String, Vec<f64>>,
}

struct Bridge {
    grads: Vec<Option<Vec<f64>>>,
}

impl Bridge {
    fn add(&mut self, slot: usize, g: Option<&[f64]>) {
        let Some(g) = g else { return };
        match &mut self.grads[slot] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grads[slot] = Some(g.to_vec()),
        }
    }
}

/// Unrolls the operator on a supervised graph and optionally returns parameter
/// gradients of the weighted pose loss.
///
/// Each iteration is recorded on its own tape: poses, hidden states and flows enter
/// an iteration as constants. Gradients reaching the encoder outputs are collected
/// across iterations and pushed through the encoders once at the end.
pub fn unroll(
    model: &Model,
    store: &ParamStore,
    problem: &UnrollProblem,
    cfg: &UnrollConfig,
    with_grads: bool,
) -> Result<UnrollResult> {
    let nf = problem.clouds.len();
    if problem.truth.len() != nf || problem.initial.len() != nf || problem.fixed.len() != nf {
        return Err(Error::Graph("per-frame inputs differ in length".into()));
    }
    let tape0 = Tape::new();
    let p0 = store.bind(with_grads.then_some(&tape0));
    let frames = problem
        .clouds
        .iter()
        .map(|c| model.frame_inputs(&p0, c))
        .collect::<Result<Vec<_>>>()?;
    let mut volumes = Volumes::new();
    for &(a, b) in &problem.edges {
        if a >= nf || b >= nf || a == b {
            return Err(Error::Graph(format!("bad edge {a} -> {b}")));
        }
        volumes.ensure(&frames, a, b)?;
    }
    let vol_keys: Vec<(usize, usize)> = volumes.iter().map(|(k, _)| *k).collect();
    // Slots: context per frame, hidden0 per frame, then volumes.
    let mut bridge = Bridge {
        grads: vec![None; 2 * nf + vol_keys.len()],
    };

    let mut poses = problem.initial.clone();
    let mut edges: Vec<EdgeState> = problem
        .edges
        .iter()
        .map(|&(a, b)| EdgeState::new(a, b, &frames, &poses))
        .collect();
    let mut grads = BTreeMap::new();
    let mut pose_losses = Vec::with_capacity(cfg.iters);
    let mut loss = 0.0;
    for it in 0..cfg.iters {
        let tape = Tape::new();
        let track = |t: &Tensor| if with_grads { tape.track(t) } else { t.detach() };
        let p = if with_grads { store.bind(Some(&tape)) } else { p0.detach() };
        let local: Vec<FrameInputs> = frames
            .iter()
            .map(|f| FrameInputs {
                points: f.points.clone(),
                features: f.features.detach(),
                context: track(&f.context),
                hidden0: track(&f.hidden0),
            })
            .collect();
        let mut local_vol = Volumes::new();
        for (k, v) in volumes.iter() {
            local_vol.0.insert(*k, track(v));
        }

        let mut diff_edges = Vec::with_capacity(edges.len());
        let mut updates = Vec::with_capacity(edges.len());
        for e in &edges {
            let up = edge_update(&model.operator, &p, &local, &local_vol, &poses, e)?;
            diff_edges.push(DiffEdge {
                a: e.a,
                b: e.b,
                p1: local[e.a].points.clone(),
                target: to_tensor(&up.warped).add(&up.revision)?,
                weights: up.confidence.clone(),
            });
            updates.push(up);
        }
        let start: Vec<Tensor> = poses.iter().map(pose_tensor).collect();
        let (new_poses, _) = diff_amba_steps(&start, &problem.fixed, &diff_edges, cfg.iter.ba_steps, &cfg.iter.damping)?;
        let pose_loss = diff_pose_loss(&new_poses, &problem.truth)?;
        let weight = cfg.gamma.powi((cfg.iters - 1 - it) as i32);
        pose_losses.push(pose_loss.item());
        loss += weight * pose_loss.item();
        if with_grads {
            let g = backward(&pose_loss.scalar_mul(weight))?;
            accumulate_grads(&mut grads, &p.grads(&g));
            for (f, lf) in local.iter().enumerate() {
                bridge.add(f, g.get(&lf.context));
                bridge.add(nf + f, g.get(&lf.hidden0));
            }
            for (s, k) in vol_keys.iter().enumerate() {
                bridge.add(2 * nf + s, g.get(&local_vol.0[k]));
            }
        }
        poses = new_poses.iter().map(tensor_pose).collect();
        for (e, up) in edges.iter_mut().zip(&updates) {
            commit(e, up, &frames[e.a].points);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, sample: 0 });
    }
    if with_grads {
        let mut seeds: Vec<(&Tensor, Vec<f64>)> = Vec::new();
        for (f, fr) in frames.iter().enumerate() {
            if let Some(g) = bridge.grads[f].take() {
                seeds.push((&fr.context, g));
            }
            if let Some(g) = bridge.grads[nf + f].take() {
                seeds.push((&fr.hidden0, g));
            }
        }
        for (s, k) in vol_keys.iter().enumerate() {
            if let Some(g) = bridge.grads[2 * nf + s].take() {
                seeds.push((&volumes.0[k], g));
            }
        }
        if !seeds.is_empty() {
            let g = backward_with(&seeds)?;
            accumulate_grads(&mut grads, &p0.grads(&g));
        }
    }
    Ok(UnrollResult {
        loss,
        pose_losses,
        poses,
        grads,
    })
}
