//! Trajectory metrics: pose loss, subsequence drift (t_rel / r_rel) and plot export.

use crate::lie::{Pose, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::path::Path;

/// World-to-sensor poses with frame ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frame_ids: Vec<u64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Frame ids `0..poses.len()`.
    pub fn new(poses: Vec<Pose>) -> Self {
        Trajectory {
            frame_ids: (0..poses.len() as u64).collect(),
            poses,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Sensor positions in the world frame.
    pub fn centers(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| *p.inverse().translation()).collect()
    }

    /// Cumulative distance travelled up to each frame.
    pub fn path_lengths(&self) -> Vec<f64> {
        let c = self.centers();
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(c.len());
        for (k, x) in c.iter().enumerate() {
            if k > 0 {
                acc += (x - c[k - 1]).norm();
            }
            out.push(acc);
        }
        out
    }

    /// Re-expresses the trajectory so its first pose equals `first`; relative motion is unchanged.
    pub fn aligned_to(&self, first: &Pose) -> Trajectory {
        let Some(p0) = self.poses.first() else {
            return self.clone();
        };
        let g = p0.inverse().compose(first);
        Trajectory {
            frame_ids: self.frame_ids.clone(),
            poses: self.poses.iter().map(|p| p.compose(&g)).collect(),
        }
    }
}

fn check_pair(predicted: &Trajectory, truth: &Trajectory) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.frame_ids != truth.frame_ids {
        return Err(Error::Graph("trajectories have different frame ids".into()));
    }
    Ok(())
}

/// `Σ ‖Log(T̃⁻¹ T)‖²` over all frames.
pub fn pose_loss(predicted: &Trajectory, truth: &Trajectory) -> Result<f64> {
    check_pair(predicted, truth)?;
    let mut total = 0.0;
    for (p, t) in predicted.poses.iter().zip(&truth.poses) {
        total += t.inverse().compose(p).log()?.norm().powi(2);
    }
    Ok(total)
}

/// Unit convention of a [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// m/m and °/m over 20..160 m.
    #[default]
    Vod,
    /// % and °/100m over 100..800 m.
    Long,
}

impl MetricMode {
    pub fn lengths(self) -> Vec<f64> {
        match self {
            MetricMode::Vod => (1..=8).map(|k| 20.0 * k as f64).collect(),
            MetricMode::Long => (1..=8).map(|k| 100.0 * k as f64).collect(),
        }
    }

    fn scale(self) -> f64 {
        match self {
            MetricMode::Vod => 1.0,
            MetricMode::Long => 100.0,
        }
    }

    pub fn units(self) -> (&'static str, &'static str) {
        match self {
            MetricMode::Vod => ("m/m", "deg/m"),
            MetricMode::Long => ("%", "deg/100m"),
        }
    }
}

impl std::str::FromStr for MetricMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vod" => Ok(MetricMode::Vod),
            "long" => Ok(MetricMode::Long),
            other => Err(format!("unknown metric mode '{other}' (expected vod or long)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMetric {
    pub length: f64,
    pub t_rel: f64,
    pub r_rel: f64,
    pub subsequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: MetricMode,
    pub t_unit: String,
    pub r_unit: String,
    /// Mean of the per-length values over lengths with at least one subsequence.
    pub t_rel: f64,
    pub r_rel: f64,
    pub per_length: Vec<LengthMetric>,
    pub subsequences: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>8} {:>14} {:>14}", "length_m", "count", self.t_unit, self.r_unit)?;
        for m in &self.per_length {
            writeln!(f, "{:>10.1} {:>8} {:>14.6} {:>14.6}", m.length, m.subsequences, m.t_rel, m.r_rel)?;
        }
        write!(
            f,
            "{:>10} {:>8} {:>14.6} {:>14.6}",
            "mean", self.subsequences, self.t_rel, self.r_rel
        )
    }
}

/// Paths shorter than the target by less than this still count as reaching it.
const LENGTH_EPS: f64 = 1e-9;

/// Rotation angle of `p` from the trace, with the cosine clamped to [-1, 1].
fn angle(p: &Pose) -> f64 {
    let tr = p.rotation().matrix().trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Subsequence drift. For each start frame and length `L` the end is the first
/// frame whose ground-truth path from the start reaches `L`. Errors are RMSE per
/// length, then averaged over the lengths that have subsequences.
pub fn kitti_metrics(
    predicted: &Trajectory,
    truth: &Trajectory,
    lengths: &[f64],
    mode: MetricMode,
) -> Result<MetricReport> {
    check_pair(predicted, truth)?;
    let dist = truth.path_lengths();
    let n = truth.len();
    let mut per_length = Vec::new();
    for &len in lengths {
        let (mut se_t, mut se_r, mut count) = (0.0, 0.0, 0usize);
        for first in 0..n {
            let Some(last) = (first..n).find(|&j| dist[j] - dist[first] >= len - LENGTH_EPS) else {
                break;
            };
            // Motion from `first` to `last` expressed in the `first` sensor frame.
            let rel_gt = truth.poses[first].compose(&truth.poses[last].inverse());
            let rel_pred = predicted.poses[first].compose(&predicted.poses[last].inverse());
            let err = rel_gt.inverse().compose(&rel_pred);
            let t = err.translation().norm() / len;
            let r = angle(&err).to_degrees() / len;
            se_t += t * t;
            se_r += r * r;
            count += 1;
        }
        if count > 0 {
            per_length.push(LengthMetric {
                length: len,
                t_rel: (se_t / count as f64).sqrt() * mode.scale(),
                r_rel: (se_r / count as f64).sqrt() * mode.scale(),
                subsequences: count,
            });
        }
    }
    if per_length.is_empty() {
        return Err(Error::TrajectoryTooShort);
    }
    let k = per_length.len() as f64;
    let (t_unit, r_unit) = mode.units();
    Ok(MetricReport {
        mode,
        t_unit: t_unit.into(),
        r_unit: r_unit.into(),
        t_rel: per_length.iter().map(|m| m.t_rel).sum::<f64>() / k,
        r_rel: per_length.iter().map(|m| m.r_rel).sum::<f64>() / k,
        subsequences: per_length.iter().map(|m| m.subsequences).sum(),
        per_length,
    })
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// CSV of all sensor positions (`name,frame_id,x,y,z`).
pub fn plot_csv(trajectories: &[(String, Trajectory)]) -> String {
    let mut out = String::from("name,frame_id,x,y,z\n");
    for (name, t) in trajectories {
        for (id, c) in t.frame_ids.iter().zip(t.centers()) {
            let _ = writeln!(out, "{name},{id},{},{},{}", c.x, c.y, c.z);
        }
    }
    out
}

/// Top-down (x, y) overlay, one polyline per trajectory.
pub fn plot_svg(trajectories: &[(String, Trajectory)]) -> String {
    let all: Vec<Vec3> = trajectories.iter().flat_map(|(_, t)| t.centers()).collect();
    let (mut lo, mut hi) = ([0.0f64; 2], [1.0f64; 2]);
    if !all.is_empty() {
        lo = [f64::INFINITY; 2];
        hi = [f64::NEG_INFINITY; 2];
        for c in &all {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    let size = 600.0;
    let margin = 20.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let s = (size - 2.0 * margin) / span;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for (k, (name, t)) in trajectories.iter().enumerate() {
        let pts: Vec<String> = t
            .centers()
            .iter()
            .map(|c| {
                let x = margin + (c.x - lo[0]) * s;
                let y = size - margin - (c.y - lo[1]) * s;
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let dash = if k >= COLORS.len() { " stroke-dasharray=\"4 2\"" } else { "" };
        let _ = writeln!(
            out,
            "  <polyline data-name=\"{name}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            COLORS[k % COLORS.len()],
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `trajectories.csv` and `trajectories.svg` into `dir`.
pub fn export_plot_data(dir: &Path, trajectories: &[(String, Trajectory)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, text) in [
        ("trajectories.csv", plot_csv(trajectories)),
        ("trajectories.svg", plot_svg(trajectories)),
    ] {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Rotation, Twist};

    fn straight(n: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| Pose::from_translation(Vec3::new(k as f64 * step, 0.0, 0.0)).inverse())
                .collect(),
        )
    }

    #[test]
    fn pose_loss_examples() {
        let t = straight(4, 1.0);
        assert_eq!(pose_loss(&t, &t).unwrap(), 0.0);
        let d = Vec3::new(0.3, -0.4, 1.2);
        let mut p = t.clone();
        p.poses[2] = t.poses[2].compose(&Pose::from_translation(d));
        assert!((pose_loss(&p, &t).unwrap() - d.norm_squared()).abs() < 1e-12);
        let theta = 0.7;
        let mut p = t.clone();
        p.poses[1] = t.poses[1].compose(&Pose::new(Rotation::exp(&Vec3::new(0.0, 0.0, theta)), Vec3::zeros()));
        assert!((pose_loss(&p, &t).unwrap() - theta * theta).abs() < 1e-12);
        let short = straight(3, 1.0);
        assert!(matches!(pose_loss(&short, &t), Err(Error::LengthMismatch { predicted: 3, truth: 4 })));
    }

    #[test]
    fn length_sets() {
        assert_eq!(MetricMode::Vod.lengths(), vec![20., 40., 60., 80., 100., 120., 140., 160.]);
        assert_eq!(MetricMode::Long.lengths(), vec![100., 200., 300., 400., 500., 600., 700., 800.]);
    }

    #[test]
    fn one_percent_drift() {
        let truth = straight(401, 0.5);
        let pred = straight(401, 0.5 * 1.01);
        let r = kitti_metrics(&pred, &truth, &MetricMode::Long.lengths(), MetricMode::Long).unwrap();
        assert!((r.t_rel - 1.0).abs() < 1e-6, "{}", r.t_rel);
        assert_eq!(r.r_rel, 0.0);
        assert_eq!(r.per_length.len(), 2);
        let v = kitti_metrics(&pred, &truth, &MetricMode::Vod.lengths(), MetricMode::Vod).unwrap();
        assert!((v.t_rel - 0.01).abs() < 1e-8);
    }

    #[test]
    fn exact_zero_and_too_short() {
        let truth = straight(100, 0.5);
        let r = kitti_metrics(&truth, &truth, &[20.0], MetricMode::Vod).unwrap();
        assert_eq!((r.t_rel, r.r_rel), (0.0, 0.0));
        assert_eq!(r.subsequences, 100 - 40);
        assert!(matches!(
            kitti_metrics(&truth, &truth, &[100.0], MetricMode::Vod),
            Err(Error::TrajectoryTooShort)
        ));
    }

    #[test]
    fn rigid_invariance() {
        let truth = straight(60, 0.5);
        let pred = Trajectory::new(
            truth
                .poses
                .iter()
                .enumerate()
                .map(|(k, p)| Pose::exp(&Twist::from_slice(&[0.0, 0.01 * k as f64, 0.0, 0.0, 0.0, 0.002 * k as f64])).compose(p))
                .collect(),
        );
        let g = Pose::exp(&Twist::from_slice(&[1.0, -2.0, 0.5, 0.3, -0.2, 1.1]));
        let moved = |t: &Trajectory| Trajectory::new(t.poses.iter().map(|p| p.compose(&g)).collect());
        let a = kitti_metrics(&pred, &truth, &[10.0, 20.0], MetricMode::Vod).unwrap();
        let b = kitti_metrics(&moved(&pred), &moved(&truth), &[10.0, 20.0], MetricMode::Vod).unwrap();
        assert!((a.t_rel - b.t_rel).abs() < 1e-9);
        assert!((a.r_rel - b.r_rel).abs() < 1e-9);
    }

    #[test]
    fn alignment_keeps_relative_motion() {
        let t = straight(5, 0.5);
        let first = Pose::exp(&Twist::from_slice(&[0.1, 0.2, 0.3, 0.0, 0.0, 0.4]));
        let a = t.aligned_to(&first);
        assert!(a.poses[0].distance(&first).unwrap() < 1e-12);
        assert!(pose_loss(&a, &a).unwrap() == 0.0);
        let r = kitti_metrics(&a, &t, &[1.0], MetricMode::Vod).unwrap();
        assert!(r.t_rel < 1e-12);
    }

    #[test]
    fn plot_exports() {
        assert_eq!(plot_csv(&[]), "name,frame_id,x,y,z\n");
        let one = vec![("gt".to_string(), Trajectory::new(vec![Pose::identity()]))];
        let svg = plot_svg(&one);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("points=\"20.000,580.000\""));
        let two = vec![one[0].clone(), ("est".to_string(), straight(3, 1.0))];
        let svg = plot_svg(&two);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(COLORS[0]) && svg.contains(COLORS[1]));
        assert_eq!(svg, plot_svg(&two));
    }
}
