use super::{CloudError, PointCloud};
use crate::lie::{Pose, Twist, Vec3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed number of points per frame after preprocessing.
pub const POINTS_PER_FRAME: usize = 512;
/// Heights (sensor z) outside `[HEIGHT_MIN, HEIGHT_MAX]` meters are discarded.
pub const HEIGHT_MIN: f64 = -2.0;
pub const HEIGHT_MAX: f64 = 10.0;

/// Height filter, then a seeded uniform down-sample or a cyclic repeat-pad to
/// exactly [`POINTS_PER_FRAME`] points. Point order is preserved.
pub fn preprocess(cloud: &PointCloud, seed: u64) -> Result<PointCloud, CloudError> {
    cloud.validate()?;
    let kept: Vec<usize> = (0..cloud.len())
        .filter(|&i| (HEIGHT_MIN..=HEIGHT_MAX).contains(&cloud.points[i][2]))
        .collect();
    if kept.is_empty() {
        return Err(CloudError::EmptyAfterFilter);
    }
    let chosen: Vec<usize> = if kept.len() > POINTS_PER_FRAME {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = sample(&mut rng, kept.len(), POINTS_PER_FRAME).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|i| kept[i]).collect()
    } else {
        (0..POINTS_PER_FRAME).map(|i| kept[i % kept.len()]).collect()
    };
    Ok(cloud.select(&chosen))
}

/// Magnitudes of the random rigid transforms used for training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentRange {
    pub translation: [f64; 3],
    /// Roll, pitch, yaw half-ranges in radians.
    pub rotation: [f64; 3],
}

impl Default for AugmentRange {
    fn default() -> Self {
        AugmentRange {
            translation: [1.0, 1.0, 0.1],
            rotation: [0.02, 0.02, 0.2],
        }
    }
}

impl AugmentRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Pose {
        let mut v = [0.0; 6];
        for k in 0..3 {
            v[k] = self.translation[k] * rng.random_range(-1.0..=1.0);
            v[k + 3] = self.rotation[k] * rng.random_range(-1.0..=1.0);
        }
        Pose::exp(&Twist::new(
            Vec3::new(v[0], v[1], v[2]),
            Vec3::new(v[3], v[4], v[5]),
        ))
    }
}

/// Applies the rigid transform `g` to the sensor-frame points and composes it into the
/// world-to-sensor pose, so `T_new = g * T` and `P_new = g * P`.
///
/// Using the same `g` on every frame of a sequence keeps relative supervision consistent:
/// `T12_new * P1_new == g * (T12 * P1)`.
pub fn random_rigid_augment(cloud: &PointCloud, gt: &Pose, g: &Pose) -> (PointCloud, Pose) {
    (cloud.transformed(g), g.compose(gt))
}
