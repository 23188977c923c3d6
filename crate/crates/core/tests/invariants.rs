use proptest::prelude::*;
use rado::autodiff::Tensor;
use rado::evaluation::{kitti_metrics, pose_loss, MetricMode, Trajectory};
use rado::lie::{Pose, Twist, Vec3};
use rado::neural_opt::{residual, target_points};
use rado::pointcloud::{preprocess, PointCloud, POINTS_PER_FRAME};

fn twist(max_t: f64, max_r: f64) -> impl Strategy<Value = Twist> {
    (
        prop::array::uniform3(-max_t..max_t),
        prop::array::uniform3(-1.0f64..1.0),
        0.0..max_r,
    )
        .prop_map(|(t, axis, angle)| {
            let a = Vec3::from(axis);
            let a = if a.norm() < 1e-3 { Vec3::x() } else { a.normalize() };
            Twist::new(Vec3::from(t), a * angle)
        })
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-40.0f64..40.0)
}

proptest! {
    #[test]
    fn exp_log_round_trip(xi in twist(20.0, 3.1)) {
        let back = Pose::exp(&xi).log().unwrap();
        prop_assert!((back.to_vector() - xi.to_vector()).abs().max() < 1e-9);
    }

    #[test]
    fn compose_inverse_is_identity(xi in twist(20.0, 3.0)) {
        let t = Pose::exp(&xi);
        prop_assert!(t.compose(&t.inverse()).log().unwrap().norm() < 1e-12);
    }

    #[test]
    fn act_preserves_distances(xi in twist(20.0, 3.0), p in point(), q in point()) {
        let t = Pose::exp(&xi);
        let (p, q) = (Vec3::from(p), Vec3::from(q));
        prop_assert!(((t.act_point(&p) - t.act_point(&q)).norm() - (p - q).norm()).abs() < 1e-10);
    }

    #[test]
    fn residual_vanishes_on_its_own_target(a in twist(5.0, 1.0), b in twist(5.0, 1.0), pts in prop::collection::vec(point(), 1..20)) {
        let (ta, tb) = (Pose::exp(&a), Pose::exp(&b));
        let target = target_points(&pts, &ta, &tb, &vec![[0.0; 3]; pts.len()]);
        for r in residual(&ta, &tb, &pts, &target) {
            prop_assert!(r.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn pose_loss_is_nonnegative_and_zero_on_truth(steps in prop::collection::vec(twist(1.0, 0.1), 2..12), noise in twist(0.1, 0.05)) {
        let mut poses = vec![Pose::identity()];
        for s in &steps {
            let last = *poses.last().unwrap();
            poses.push(Pose::exp(s).compose(&last));
        }
        let truth = Trajectory::new(poses.clone());
        prop_assert_eq!(pose_loss(&truth, &truth).unwrap(), 0.0);
        let moved = Trajectory::new(poses.iter().map(|p| Pose::exp(&noise).compose(p)).collect());
        prop_assert!(pose_loss(&moved, &truth).unwrap() >= 0.0);
    }

    #[test]
    fn drift_metrics_ignore_a_global_rigid_change(steps in prop::collection::vec(0.3f64..1.5, 30..60), g in twist(50.0, 3.0)) {
        let mut x = 0.0;
        let mut truth = vec![Pose::identity()];
        let mut pred = vec![Pose::identity()];
        for (k, s) in steps.iter().enumerate() {
            x += s;
            truth.push(Pose::from_translation(Vec3::new(-x, 0.0, 0.0)));
            // Heading drift keeps the error angles away from zero, where acos is ill-conditioned.
            let yaw = Pose::exp(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.002 * k as f64)));
            pred.push(yaw.compose(&Pose::from_translation(Vec3::new(-x * 1.02, 0.01 * k as f64, 0.0))));
        }
        let truth = Trajectory::new(truth);
        let pred = Trajectory::new(pred);
        let moved = Trajectory::new(pred.poses.iter().map(|p| p.compose(&Pose::exp(&g))).collect());
        let a = kitti_metrics(&pred, &truth, &[5.0, 10.0], MetricMode::Vod).unwrap();
        let b = kitti_metrics(&moved, &truth, &[5.0, 10.0], MetricMode::Vod).unwrap();
        prop_assert!((a.t_rel - b.t_rel).abs() < 1e-9);
        prop_assert!((a.r_rel - b.r_rel).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..8)) {
        let s = Tensor::from_rows(&rows).unwrap().softmax_rows().unwrap();
        for r in s.data().chunks(4) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocessing_yields_fixed_size_in_range(pts in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..1200), seed in 0u64..1000) {
        let cloud = PointCloud::new(pts);
        match preprocess(&cloud, seed) {
            Ok(c) => {
                prop_assert_eq!(c.len(), POINTS_PER_FRAME);
                prop_assert!(c.points.iter().all(|p| (-2.0..=10.0).contains(&p[2])));
                prop_assert_eq!(preprocess(&cloud, seed).unwrap(), c);
            }
            Err(_) => prop_assert!(cloud.points.iter().all(|p| !(-2.0..=10.0).contains(&p[2]))),
        }
    }
}
