//! Radar point clouds, spatial queries, preprocessing and synthetic scenes.

mod io;
mod neighbors;
mod preprocess;
mod synth;

pub use io::{
    load_dataset, read_frame_bin, read_frame_csv, read_frame_file, read_index, read_pose_file,
    write_dataset, write_frame_bin, write_frame_csv, write_pose_file, Dataset, CSV_HEADER,
};
pub use neighbors::{ball_query, farthest_point_sample, knn, NeighborIndex};
pub use preprocess::{
    preprocess, random_rigid_augment, AugmentRange, HEIGHT_MAX, HEIGHT_MIN, POINTS_PER_FRAME,
};
pub use synth::{synth_sequence, Frame, SceneSpec, SyntheticScene, TrajectorySpec, WorldPoint};

use crate::lie::Pose;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point cloud is empty")]
    Empty,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("requested {requested} samples from {available} points")]
    CountTooLarge { requested: usize, available: usize },
    #[error("k = {k} exceeds target size {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("no points left after the height filter")]
    EmptyAfterFilter,
    #[error("attribute length {got} does not match {expected} points")]
    AttributeLength { expected: usize, got: usize },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data in {path}: {message}")]
    Parse { path: String, message: String },
}

/// N radar points with optional intensity and radial velocity channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
    pub radial_velocity: Option<Vec<f64>>,
    pub frame_id: u64,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            intensity: None,
            radial_velocity: None,
            frame_id: 0,
        }
    }

    pub fn with_attributes(
        points: Vec<[f64; 3]>,
        intensity: Vec<f64>,
        radial_velocity: Vec<f64>,
    ) -> Result<Self, CloudError> {
        for a in [&intensity, &radial_velocity] {
            if a.len() != points.len() {
                return Err(CloudError::AttributeLength {
                    expected: points.len(),
                    got: a.len(),
                });
            }
        }
        Ok(PointCloud {
            points,
            intensity: Some(intensity),
            radial_velocity: Some(radial_velocity),
            frame_id: 0,
        })
    }

    pub fn with_frame_id(mut self, frame_id: u64) -> Self {
        self.frame_id = frame_id;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if self.points.is_empty() {
            return Err(CloudError::Empty);
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(CloudError::NonFinite(i));
        }
        Ok(())
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }

    pub fn radial_velocity_at(&self, i: usize) -> f64 {
        self.radial_velocity.as_ref().map_or(0.0, |v| v[i])
    }

    /// Keeps the points at `indices` (in that order), carrying attributes along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self.intensity.as_ref().map(pick),
            radial_velocity: self.radial_velocity.as_ref().map(pick),
            frame_id: self.frame_id,
        }
    }

    /// Applies `R p + t` to every point; attributes are untouched.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.act_array(p)).collect(),
            ..self.clone()
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Per-point input channels `(x, y, z, intensity, radial_velocity)`, row-major.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 5);
        for (i, p) in self.points.iter().enumerate() {
            out.extend_from_slice(p);
            out.push(self.intensity_at(i));
            out.push(self.radial_velocity_at(i));
        }
        out
    }
}

/// `act(T, P)`: transforms a cloud by a pose.
pub fn act(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    cloud.transformed(pose)
}

pub(crate) fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Twist, Vec3};

    #[test]
    fn act_identity_and_round_trip() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 8.0]]);
        assert_eq!(act(&Pose::identity(), &cloud), cloud);
        let t = Pose::exp(&Twist::new(Vec3::new(0.2, -1.0, 3.0), Vec3::new(0.3, 0.1, -0.4)));
        let back = act(&t.inverse(), &act(&t, &cloud));
        for (a, b) in back.points.iter().zip(&cloud.points) {
            assert!(sq_dist(a, b).sqrt() < 1e-10);
        }
    }

    #[test]
    fn act_preserves_distances() {
        let t = Pose::exp(&Twist::new(Vec3::new(4.0, -2.0, 1.0), Vec3::new(1.1, -0.7, 0.4)));
        let p = [3.0, -1.0, 0.5];
        let q = [-7.0, 2.5, 1.25];
        let before = sq_dist(&p, &q).sqrt();
        let after = sq_dist(&t.act_array(&p), &t.act_array(&q)).sqrt();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn validate_rejects_bad_clouds() {
        assert!(matches!(PointCloud::new(vec![]).validate(), Err(CloudError::Empty)));
        let bad = PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]);
        assert!(matches!(bad.validate(), Err(CloudError::NonFinite(1))));
    }
}
