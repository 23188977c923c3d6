use rado::autodiff::{load_checkpoint, save_checkpoint};
use rado::baselines::{icp_odometry, IcpConfig};
use rado::evaluation::{pose_loss, Trajectory};
use rado::neural_opt::{unroll, Model, UnrollConfig, UnrollProblem};
use rado::pointcloud::{synth_sequence, Frame, SceneSpec, SyntheticScene, TrajectorySpec};
use rado::tracker::{build_training_graph, track_sequence, TrackerConfig};
use rado::verify::tiny_model_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sequence(frames: usize) -> Vec<Frame> {
    let spec = SceneSpec {
        seed: 3,
        ..SceneSpec::default()
    };
    let traj = TrajectorySpec {
        frames,
        step: 0.4,
        yaw_rate: 0.02,
    };
    synth_sequence(&SyntheticScene::generate(&spec, &traj), frames)
}

#[test]
fn tracking_emits_every_frame_in_order() {
    let model = Model::new(&tiny_model_config());
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(1));
    let seq = sequence(11);
    let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
    let (poses, counters, reports) =
        track_sequence(&model, &store, &TrackerConfig::default(), &clouds, seq[0].pose).unwrap();
    assert_eq!(poses.len(), 11);
    assert_eq!(poses[0], seq[0].pose);
    assert_eq!(reports.len(), 12 + 3 * 4);
    assert_eq!(counters.track_calls, 3);

    // Short sequences are still tracked as one window.
    let (short, _, _) = track_sequence(&model, &store, &TrackerConfig::default(), &clouds[..3], seq[0].pose).unwrap();
    assert_eq!(short.len(), 3);
}

#[test]
fn unroll_is_deterministic_and_checkpoints_round_trip() {
    let model = Model::new(&tiny_model_config());
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(2));
    let seq = sequence(7);
    let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
    let truth: Vec<_> = seq.iter().map(|f| f.pose).collect();
    let graph = build_training_graph(&clouds, &truth).unwrap();
    let problem = UnrollProblem {
        clouds,
        truth,
        initial: graph.poses(),
        fixed: graph.fixed(),
        edges: graph.edges.clone(),
    };
    let cfg = UnrollConfig {
        iters: 2,
        ..UnrollConfig::default()
    };
    let a = unroll(&model, &store, &problem, &cfg, true).unwrap();
    let b = unroll(&model, &store, &problem, &cfg, true).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grads, b.grads);
    assert!(a.grads.values().flatten().any(|g| *g != 0.0));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &store, &model.architecture()).unwrap();
    let (loaded, arch) = load_checkpoint(dir.path()).unwrap();
    let reloaded = Model::from_architecture(&arch).unwrap();
    let c = unroll(&reloaded, &loaded, &problem, &cfg, false).unwrap();
    assert_eq!(c.loss, a.loss);
}

#[test]
fn icp_tracks_a_synthetic_sequence() {
    let seq = sequence(10);
    let clouds: Vec<_> = seq.iter().map(|f| f.cloud.clone()).collect();
    let truth = Trajectory::new(seq.iter().map(|f| f.pose).collect());
    let est = Trajectory::new(icp_odometry(&clouds, &truth.poses[0], &IcpConfig::default()).unwrap());
    let still = Trajectory::new(vec![truth.poses[0]; 10]);
    assert!(pose_loss(&est, &truth).unwrap() < 0.1 * pose_loss(&still, &truth).unwrap());
}
