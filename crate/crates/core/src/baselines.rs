//! Point-to-point ICP, used as a comparison baseline and as an independent alignment oracle.

use crate::lie::{Mat3, Pose, Rotation, Vec3};
use crate::pointcloud::{knn, PointCloud};
use crate::tracker::motion_model_predict;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the increment's log norm (meters and radians mixed) falls below this.
    pub tolerance: f64,
    /// Correspondences farther apart than this are ignored (meters).
    pub max_correspondence: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            tolerance: 1e-8,
            max_correspondence: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source-frame points into the target frame.
    pub pose: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// Truncated cost `Σ min(d², τ²)` before each iteration and after the last.
    pub costs: Vec<f64>,
}

/// Least-squares rigid motion taking `src[i]` onto `dst[i]` (orthogonal Procrustes via SVD).
pub fn procrustes(src: &[Vec3], dst: &[Vec3]) -> Result<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences", src.len().min(dst.len()))));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut spread = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
        spread += (s - cs) * (s - cs).transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (smax, smid) = {
        let mut v = [sv[0], sv[1], sv[2]];
        v.sort_by(f64::total_cmp);
        (v[2], v[1])
    };
    if smax <= 0.0 || smid <= 1e-12 * smax {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Ok(Pose::new(Rotation::from_matrix_orthonormalized(&r), cd - r * cs))
}

fn correspond(
    source: &PointCloud,
    target: &PointCloud,
    pose: &Pose,
    cfg: &IcpConfig,
) -> Result<(Vec<Vec3>, Vec<Vec3>, f64)> {
    let moved: Vec<[f64; 3]> = source.points.iter().map(|p| pose.act_array(p)).collect();
    let nn = knn(&moved, &target.points, 1)?;
    let tau2 = cfg.max_correspondence * cfg.max_correspondence;
    let (mut src, mut dst, mut cost) = (Vec::new(), Vec::new(), 0.0);
    for (i, p) in source.points.iter().enumerate() {
        let d = nn.row_distances(i)[0];
        if d * d <= tau2 {
            src.push(Vec3::from(*p));
            dst.push(Vec3::from(target.points[nn.row(i)[0]]));
            cost += d * d;
        } else {
            cost += tau2;
        }
    }
    Ok((src, dst, cost))
}

/// Alternates nearest-neighbor matching and closed-form alignment.
pub fn icp_point2point(
    source: &PointCloud,
    target: &PointCloud,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Degenerate("empty cloud".into()));
    }
    let mut pose = *init;
    let mut costs = Vec::new();
    for it in 0..cfg.max_iterations {
        let (src, dst, cost) = correspond(source, target, &pose, cfg)?;
        costs.push(cost);
        let next = procrustes(&src, &dst)?;
        let step = next.compose(&pose.inverse()).log()?.norm();
        pose = next;
        if step < cfg.tolerance {
            costs.push(correspond(source, target, &pose, cfg)?.2);
            return Ok(IcpResult {
                pose,
                iterations: it + 1,
                converged: true,
                costs,
            });
        }
    }
    costs.push(correspond(source, target, &pose, cfg)?.2);
    Ok(IcpResult {
        pose,
        iterations: cfg.max_iterations,
        converged: false,
        costs,
    })
}

/// Chains frame-to-frame ICP into world-to-sensor poses starting at `origin`.
pub fn icp_odometry(clouds: &[PointCloud], origin: &Pose, cfg: &IcpConfig) -> Result<Vec<Pose>> {
    if clouds.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: clouds.len(),
        });
    }
    let mut poses = vec![*origin];
    for k in 1..clouds.len() {
        let guess = motion_model_predict(&poses)?;
        let prev = poses[k - 1];
        let init = guess.compose(&prev.inverse());
        let rel = icp_point2point(&clouds[k - 1], &clouds[k], &init, cfg)?.pose;
        poses.push(rel.compose(&prev));
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn identity_in_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 200);
        let r = icp_point2point(&c, &c, &Pose::identity(), &IcpConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.pose.log().unwrap().norm() < 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let src = random_cloud(&mut rng, 300);
            let v: Vec<f64> = (0..6).map(|k| rng.random_range(-1.0..1.0) * if k < 3 { 0.5 } else { 0.1 }).collect();
            let g = Pose::exp(&Twist::from_slice(&v));
            let dst = src.transformed(&g);
            let init = g.retract(&Twist::from_slice(&[0.02, -0.02, 0.01, 0.002, 0.0, -0.003]));
            let r = icp_point2point(&src, &dst, &init, &IcpConfig::default()).unwrap();
            assert!(r.pose.distance(&g).unwrap() < 1e-6);
            for w in r.costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let line = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            icp_point2point(&line, &line, &Pose::identity(), &IcpConfig::default()),
            Err(Error::Degenerate(_))
        ));
        let collinear: Vec<Vec3> = (0..5).map(|k| Vec3::new(k as f64, 0.0, 0.0)).collect();
        assert!(matches!(procrustes(&collinear, &collinear), Err(Error::Degenerate(_))));
    }

    #[test]
    fn procrustes_beats_small_angle_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = |p: &Pose, s: &[Vec3], d: &[Vec3]| -> f64 {
            s.iter().zip(d).map(|(a, b)| (p.act_point(a) - b).norm_squared()).sum()
        };
        for _ in 0..5 {
            let src: Vec<Vec3> = (0..3).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let dst: Vec<Vec3> = src.iter().map(|p| p + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
            let best = procrustes(&src, &dst).unwrap();
            let c0 = cost(&best, &src, &dst);
            let steps = [-0.02, -0.01, 0.0, 0.01, 0.02];
            for &a in &steps {
                for &b in &steps {
                    for &c in &steps {
                        // Optimal translation for each rotation is the centroid difference.
                        let r = Rotation::exp(&Vec3::new(a, b, c)) * *best.rotation();
                        let cs = src.iter().sum::<Vec3>() / 3.0;
                        let cd = dst.iter().sum::<Vec3>() / 3.0;
                        let p = Pose::new(r, cd - &r * cs);
                        assert!(cost(&p, &src, &dst) >= c0 - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn stationary_odometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cloud(&mut rng, 200);
        let poses = icp_odometry(&[c.clone(), c.clone(), c], &Pose::identity(), &IcpConfig::default()).unwrap();
        for p in poses {
            assert!(p.log().unwrap().norm() < 1e-12);
        }
    }
}
