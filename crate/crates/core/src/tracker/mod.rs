//! Frame graphs, sliding-window tracking and the toy training loop.

mod train;

pub use train::{
    sample_windows, train_toy, EpochLog, LrSchedule, TrainConfig, TrainingSample, LOSS_CSV_HEADER, TRAIN_FRAMES,
};

use crate::autodiff::ParamStore;
use crate::lie::Pose;
use crate::neural_opt::{
    iterate, EdgeState, FrameInputs, IterConfig, IterationReport, Model, Volumes,
};
use crate::pointcloud::PointCloud;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub window: usize,
    pub init_iters: usize,
    pub track_iters: usize,
    pub ba_steps: usize,
    /// Frames at most this far apart in the window are connected.
    pub edge_radius: usize,
    pub train_unroll: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            window: 8,
            init_iters: 12,
            track_iters: 4,
            ba_steps: 2,
            edge_radius: 2,
            train_unroll: 15,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.window,
            self.init_iters,
            self.track_iters,
            self.ba_steps,
            self.edge_radius,
            self.train_unroll,
        ];
        if all.contains(&0) {
            return Err(Error::Graph("tracker parameters must be positive".into()));
        }
        if self.window < 2 {
            return Err(Error::Graph("window needs at least two frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GraphFrame {
    pub frame_id: usize,
    pub cloud: PointCloud,
    pub pose: Pose,
    pub fixed: bool,
}

/// Frames and directed edges between them (both directions of every pair).
#[derive(Debug, Clone, Default)]
pub struct FrameGraph {
    pub frames: Vec<GraphFrame>,
    pub edges: Vec<(usize, usize)>,
}

impl FrameGraph {
    pub fn validate(&self) -> Result<()> {
        if !self.frames.iter().any(|f| f.fixed) {
            return Err(Error::Graph("no fixed frame".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= self.frames.len() || b >= self.frames.len() {
                return Err(Error::Graph(format!("edge {a} -> {b} references a missing frame")));
            }
            if a == b {
                return Err(Error::Graph(format!("self edge at {a}")));
            }
            if !seen.insert((a, b)) {
                return Err(Error::Graph(format!("duplicate edge {a} -> {b}")));
            }
        }
        Ok(())
    }

    pub fn fixed(&self) -> Vec<bool> {
        self.frames.iter().map(|f| f.fixed).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// Undirected pairs, `a < b`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().filter(|(a, b)| a < b).copied().collect()
    }
}

/// Both directions of every pair at index distance `1..=radius`, among frames
/// `0..n`, restricted to pairs touching `from..n`.
fn radius_edges(n: usize, radius: usize, from: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in from..n {
        for a in b.saturating_sub(radius)..b {
            out.push((a, b));
            out.push((b, a));
        }
    }
    out
}

/// Each frame joined to its three temporally nearest frames (ties at equal distance
/// keep both sides); frame 0 fixed at its ground truth and every pose initialized
/// there.
pub fn build_training_graph(clouds: &[PointCloud], truth: &[Pose]) -> Result<FrameGraph> {
    if clouds.len() != TRAIN_FRAMES {
        return Err(Error::WrongLength {
            expected: TRAIN_FRAMES,
            got: clouds.len(),
        });
    }
    if truth.len() != clouds.len() {
        return Err(Error::WrongLength {
            expected: clouds.len(),
            got: truth.len(),
        });
    }
    let n = clouds.len();
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by_key(|&j| (i.abs_diff(j), j));
        let cutoff = i.abs_diff(others[2]);
        for &j in others.iter().filter(|&&j| i.abs_diff(j) <= cutoff) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let edges = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let frames = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| GraphFrame {
            frame_id: i,
            cloud: c.clone(),
            pose: truth[0],
            fixed: i == 0,
        })
        .collect();
    let g = FrameGraph { frames, edges };
    g.validate()?;
    Ok(g)
}

/// Constant-velocity prediction from the most recent poses.
pub fn motion_model_predict(history: &[Pose]) -> Result<Pose> {
    match history {
        [] => Err(Error::EmptyHistory),
        [only] => Ok(*only),
        [.., prev, last] => Ok(last.compose(&prev.inverse()).compose(last)),
    }
}

/// Instrumentation of the tracking schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCounters {
    pub init_frames: usize,
    pub init_iterations: usize,
    pub track_calls: usize,
    /// Operator iterations of every track call.
    pub track_iterations: Vec<usize>,
    /// Gauss-Newton steps of every operator iteration (initialization included).
    pub ba_steps: Vec<usize>,
    /// Window size after every track call.
    pub window_sizes: Vec<usize>,
    /// Largest index distance of any edge ever in the graph.
    pub max_edge_radius: usize,
}

/// Sliding-window odometry over a stream of frames.
pub struct Tracker<'m> {
    model: &'m Model,
    store: &'m ParamStore,
    cfg: TrackerConfig,
    iter_cfg: IterConfig,
    origin: Pose,
    pending: Vec<(usize, PointCloud)>,
    graph: FrameGraph,
    inputs: Vec<FrameInputs>,
    volumes: Volumes,
    edges: Vec<EdgeState>,
    emitted: Vec<(usize, Pose)>,
    counters: ScheduleCounters,
    reports: Vec<IterationReport>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, store: &'m ParamStore, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let iter_cfg = IterConfig {
            ba_steps: cfg.ba_steps,
            ..IterConfig::default()
        };
        Ok(Tracker {
            model,
            store,
            cfg,
            iter_cfg,
            origin: Pose::identity(),
            pending: Vec::new(),
            graph: FrameGraph::default(),
            inputs: Vec::new(),
            volumes: Volumes::new(),
            edges: Vec::new(),
            emitted: Vec::new(),
            counters: ScheduleCounters::default(),
            reports: Vec::new(),
        })
    }

    /// Pose assigned to the first frame (identity by default).
    pub fn with_origin(mut self, origin: Pose) -> Self {
        self.origin = origin;
        self
    }

    pub fn counters(&self) -> &ScheduleCounters {
        &self.counters
    }

    pub fn graph(&self) -> &FrameGraph {
        &self.graph
    }

    pub fn is_initialized(&self) -> bool {
        !self.graph.frames.is_empty()
    }

    /// Per-iteration diagnostics so far.
    pub fn reports(&self) -> &[IterationReport] {
        &self.reports
    }

    pub fn emitted(&self) -> &[(usize, Pose)] {
        &self.emitted
    }

    /// Feeds one frame; returns the poses that left the window.
    pub fn push(&mut self, frame_id: usize, cloud: PointCloud) -> Result<Vec<(usize, Pose)>> {
        if self.is_initialized() {
            return self.track(frame_id, cloud).map(|p| vec![p]);
        }
        self.pending.push((frame_id, cloud));
        if self.pending.len() == self.cfg.window {
            let frames = std::mem::take(&mut self.pending);
            self.initialize(frames)?;
        }
        Ok(Vec::new())
    }

    fn frame_inputs(&self, cloud: &PointCloud) -> Result<FrameInputs> {
        self.model.frame_inputs(&self.store.bind(None), cloud)
    }

    fn connect(&mut self, new_edges: &[(usize, usize)]) -> Result<()> {
        let poses = self.graph.poses();
        for &(a, b) in new_edges {
            self.volumes.ensure(&self.inputs, a, b)?;
            self.edges.push(EdgeState::new(a, b, &self.inputs, &poses));
            self.counters.max_edge_radius = self.counters.max_edge_radius.max(a.abs_diff(b));
        }
        self.graph.edges.extend_from_slice(new_edges);
        self.graph.validate()
    }

    fn run(&mut self, iters: usize) -> Result<()> {
        let mut poses = self.graph.poses();
        let reports = iterate(
            &self.model.operator,
            self.store,
            &self.inputs,
            &self.volumes,
            &mut poses,
            &self.graph.fixed(),
            &mut self.edges,
            iters,
            &self.iter_cfg,
        )?;
        for (f, p) in self.graph.frames.iter_mut().zip(poses) {
            f.pose = p;
        }
        self.counters.ba_steps.extend(reports.iter().map(|r| r.steps.len()));
        self.reports.extend(reports);
        Ok(())
    }

    /// Builds the first window: every pose at the origin, the first frame fixed.
    pub fn initialize(&mut self, frames: Vec<(usize, PointCloud)>) -> Result<()> {
        if frames.len() < self.cfg.window {
            return Err(Error::InsufficientFrames {
                needed: self.cfg.window,
                got: frames.len(),
            });
        }
        let frames: Vec<_> = frames.into_iter().take(self.cfg.window).collect();
        for (i, (id, cloud)) in frames.into_iter().enumerate() {
            self.inputs.push(self.frame_inputs(&cloud)?);
            self.graph.frames.push(GraphFrame {
                frame_id: id,
                cloud,
                pose: self.origin,
                fixed: i == 0,
            });
        }
        let n = self.graph.frames.len();
        self.connect(&radius_edges(n, self.cfg.edge_radius, 0))?;
        self.counters.init_frames = n;
        let before = self.reports.len();
        self.run(self.cfg.init_iters)?;
        self.counters.init_iterations = self.reports.len() - before;
        Ok(())
    }

    /// Adds a frame, optimizes, and emits the oldest frame's pose.
    pub fn track(&mut self, frame_id: usize, cloud: PointCloud) -> Result<(usize, Pose)> {
        if !self.is_initialized() {
            return Err(Error::InsufficientFrames {
                needed: self.cfg.window,
                got: self.pending.len(),
            });
        }
        let history: Vec<Pose> = self.graph.frames.iter().rev().take(2).rev().map(|f| f.pose).collect();
        let pose = motion_model_predict(&history)?;
        self.inputs.push(self.frame_inputs(&cloud)?);
        self.graph.frames.push(GraphFrame {
            frame_id,
            cloud,
            pose,
            fixed: false,
        });
        let n = self.graph.frames.len();
        self.connect(&radius_edges(n, self.cfg.edge_radius, n - 1))?;
        let before = self.reports.len();
        self.run(self.cfg.track_iters)?;
        self.counters.track_calls += 1;
        self.counters.track_iterations.push(self.reports.len() - before);
        let out = self.remove_oldest();
        self.counters.window_sizes.push(self.graph.frames.len());
        Ok(out)
    }

    fn remove_oldest(&mut self) -> (usize, Pose) {
        let old = self.graph.frames.remove(0);
        self.inputs.remove(0);
        self.volumes.remove_oldest();
        self.edges.retain(|e| e.a > 0 && e.b > 0);
        for e in &mut self.edges {
            e.a -= 1;
            e.b -= 1;
        }
        self.graph.edges = self
            .graph
            .edges
            .iter()
            .filter(|(a, b)| *a > 0 && *b > 0)
            .map(|(a, b)| (a - 1, b - 1))
            .collect();
        self.graph.frames[0].fixed = true;
        self.emitted.push((old.frame_id, old.pose));
        (old.frame_id, old.pose)
    }

    /// Emits every pose still in the window (or pending before initialization).
    pub fn finish(&mut self) -> Result<Vec<(usize, Pose)>> {
        let mut out = Vec::new();
        if !self.is_initialized() && !self.pending.is_empty() {
            // Too short to fill a window: run on what there is.
            let frames = std::mem::take(&mut self.pending);
            if frames.len() == 1 {
                out.push((frames[0].0, self.origin));
                self.emitted.extend_from_slice(&out);
                return Ok(out);
            }
            let window = self.cfg.window;
            self.cfg.window = frames.len();
            let res = self.initialize(frames);
            self.cfg.window = window;
            res?;
        }
        for f in self.graph.frames.drain(..) {
            out.push((f.frame_id, f.pose));
        }
        self.inputs.clear();
        self.edges.clear();
        self.graph.edges.clear();
        self.volumes = Volumes::new();
        self.emitted.extend_from_slice(&out);
        Ok(out)
    }
}

/// Runs the tracker over a whole sequence and returns one pose per frame.
pub fn track_sequence(
    model: &Model,
    store: &ParamStore,
    cfg: &TrackerConfig,
    clouds: &[PointCloud],
    origin: Pose,
) -> Result<(Vec<Pose>, ScheduleCounters, Vec<IterationReport>)> {
    let mut tracker = Tracker::new(model, store, cfg.clone())?.with_origin(origin);
    for (i, c) in clouds.iter().enumerate() {
        tracker.push(i, c.clone())?;
    }
    tracker.finish()?;
    let poses = tracker.emitted().iter().map(|(_, p)| *p).collect();
    Ok((poses, tracker.counters().clone(), tracker.reports().to_vec()))
}
