//! Finite-difference verification suites shared by the command line and the test targets.

use crate::autodiff::{custom_node, gradcheck, GradcheckConfig, Tensor};
use crate::backbone::BackboneConfig;
use crate::correlation::LookupConfig;
use crate::lie::{Pose, Twist};
use crate::neural_opt::{
    diff_amba_steps, diff_pose_loss, edge_update, jacobians, pose_tensor, residual, target_points, Damping,
    DiffEdge, EdgeState, Model, ModelConfig, OperatorConfig, Volumes,
};
use crate::pointcloud::{synth_sequence, PointCloud, SceneSpec, SyntheticScene, TrajectorySpec};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, err: f64, tol: f64) -> Check {
        Check {
            suite,
            name: name.into(),
            max_rel_error: err,
            tol,
            passed: err < tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Jacobians,
    Amba,
    Primitives,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Scope::All),
            "jacobians" => Ok(Scope::Jacobians),
            "amba" => Ok(Scope::Amba),
            "primitives" => Ok(Scope::Primitives),
            other => Err(format!("unknown scope '{other}' (all, jacobians, amba, primitives)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Deliberately corrupts the analytic derivatives; every check should then fail.
    pub inject_sign_error: bool,
}

pub fn run(scope: Scope, opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::All | Scope::Jacobians) {
        out.push(jacobian_suite(100, opts));
    }
    if matches!(scope, Scope::All | Scope::Amba) {
        out.extend(amba_suite(opts)?);
        out.push(pipeline_gradcheck(opts)?);
    }
    if matches!(scope, Scope::All | Scope::Primitives) {
        out.extend(primitive_suite(opts)?);
    }
    Ok(out)
}

fn random_pose<R: Rng>(rng: &mut R, t: f64, r: f64) -> Pose {
    let v: Vec<f64> = (0..6)
        .map(|k| rng.random_range(-1.0..1.0) * if k < 3 { t } else { r })
        .collect();
    Pose::exp(&Twist::from_slice(&v))
}

fn random_points<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-scale..scale)))
        .collect()
}

/// Residual Jacobians against central differences over `pairs` random pose/point pairs.
pub fn jacobian_suite(pairs: usize, opts: &SuiteOptions) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let ta = random_pose(&mut rng, 3.0, 1.0);
        let tb = random_pose(&mut rng, 3.0, 1.0);
        let p = random_points(&mut rng, 1, 5.0);
        let tgt = random_points(&mut rng, 1, 5.0);
        let (j1, j2) = jacobians(&ta, &tb, &p);
        for (which, mut j) in [(0, j1[0]), (1, j2[0])] {
            if opts.inject_sign_error {
                j = -j;
            }
            for c in 0..6 {
                let mut d = [0.0; 6];
                d[c] = h;
                let plus = Twist::from_slice(&d);
                d[c] = -h;
                let minus = Twist::from_slice(&d);
                let (rp, rm) = if which == 0 {
                    (
                        residual(&ta.retract(&plus), &tb, &p, &tgt)[0],
                        residual(&ta.retract(&minus), &tb, &p, &tgt)[0],
                    )
                } else {
                    (
                        residual(&ta, &tb.retract(&plus), &p, &tgt)[0],
                        residual(&ta, &tb.retract(&minus), &p, &tgt)[0],
                    )
                };
                let num: Vec<f64> = (0..3).map(|r| (rp[r] - rm[r]) / (2.0 * h)).collect();
                let scale = num.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
                for r in 0..3 {
                    worst = worst.max((j[(r, c)] - num[r]).abs() / scale);
                }
            }
        }
    }
    Check::new("jacobians", format!("{pairs} pose/point pairs vs central differences"), worst, 1e-5)
}

/// Identity forward, negated backward: a deliberately wrong derivative.
fn sign_flip(t: &Tensor) -> Result<Tensor> {
    Ok(custom_node(&[t], t.shape(), t.data().to_vec(), |up| vec![up.iter().map(|g| -g).collect()])?)
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect()
}

/// Pose-loss gradients through two Gauss-Newton steps with respect to the flow
/// revisions and confidence weights, on 2- and 3-frame graphs.
pub fn amba_suite(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut out = Vec::new();
    let tol = 1e-4;
    for frames in [2usize, 3] {
        let truth: Vec<Pose> = (0..frames).map(|_| random_pose(&mut rng, 1.0, 0.2)).collect();
        let mut poses = truth.clone();
        for p in poses.iter_mut().skip(1) {
            *p = p.retract(&Twist::from_slice(&[0.1, -0.05, 0.08, 0.02, -0.01, 0.03]));
        }
        let n = 24;
        let clouds: Vec<Arc<Vec<[f64; 3]>>> = (0..frames).map(|_| Arc::new(random_points(&mut rng, n, 4.0))).collect();
        let edges = all_pairs(frames);
        let fixed: Vec<bool> = (0..frames).map(|f| f == 0).collect();
        let warped: Vec<Tensor> = edges
            .iter()
            .map(|&(a, b)| {
                let w = target_points(&clouds[a], &poses[a], &poses[b], &vec![[0.0; 3]; n]);
                Tensor::new(&[n, 3], w.concat()).expect("shape")
            })
            .collect();
        let mut inputs = Vec::new();
        for _ in &edges {
            let rev: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.2..0.2)).collect();
            let w: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.2..1.0)).collect();
            inputs.push(Tensor::new(&[n, 3], rev)?);
            inputs.push(Tensor::new(&[n, 3], w)?);
        }
        let start: Vec<Tensor> = poses.iter().map(pose_tensor).collect();
        let inject = opts.inject_sign_error;
        let f = |x: &[Tensor]| -> Result<Tensor> {
            let mut de = Vec::new();
            for (k, &(a, b)) in edges.iter().enumerate() {
                let rev = if inject { sign_flip(&x[2 * k])? } else { x[2 * k].clone() };
                de.push(DiffEdge {
                    a,
                    b,
                    p1: clouds[a].clone(),
                    target: warped[k].add(&rev)?,
                    weights: x[2 * k + 1].clone(),
                });
            }
            let (new, _) = diff_amba_steps(&start, &fixed, &de, 2, &Damping::default())?;
            diff_pose_loss(&new, &truth)
        };
        let cfg = GradcheckConfig::default().with_tol(tol).with_h(1e-6).with_max_coords(12);
        let report = gradcheck(f, &inputs, &cfg)?;
        let (mut rev_err, mut w_err) = (0.0f64, 0.0f64);
        for (k, e) in report.max_rel_error.iter().enumerate() {
            if k % 2 == 0 {
                rev_err = rev_err.max(*e);
            } else {
                w_err = w_err.max(*e);
            }
        }
        out.push(Check::new("amba", format!("{frames}-frame graph, d loss / d revision"), rev_err, tol));
        out.push(Check::new("amba", format!("{frames}-frame graph, d loss / d weights"), w_err, tol));
    }
    Ok(out)
}

/// Narrow model used where the full widths would only slow a check down.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            radii: vec![1.0, 3.0],
            ball_samples: 4,
            sa_width: 4,
            embed_width: 8,
            centers: 4,
            center_k: 4,
            attn_width: 8,
        },
        operator: OperatorConfig {
            hidden: 8,
            flow_width: 4,
            head_width: 8,
            context_width: 0,
            lookup: LookupConfig { k1: 4, k2: 2, hidden: 4 },
        },
    }
}

fn small_scene(seed: u64, frames: usize, max_points: usize) -> (Vec<PointCloud>, Vec<Pose>) {
    let spec = SceneSpec {
        seed,
        ..Default::default()
    };
    let scene = SyntheticScene::generate(&spec, &TrajectorySpec { frames, step: 0.4, yaw_rate: 0.02 });
    let seq = synth_sequence(&scene, frames);
    let clouds = seq
        .iter()
        .map(|f| f.cloud.select(&(0..f.cloud.len().min(max_points)).collect::<Vec<_>>()))
        .collect();
    (clouds, seq.iter().map(|f| f.pose).collect())
}

/// One full operator iteration (lookup, update, heads, two Gauss-Newton steps,
/// pose loss) differentiated with respect to the operator's parameters.
pub fn pipeline_gradcheck(opts: &SuiteOptions) -> Result<Check> {
    let tol = 1e-4;
    let model = Model::new(&tiny_model_config());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let store = model.init(&mut rng);
    let (clouds, truth) = small_scene(opts.seed, 3, 40);
    let p0 = store.bind(None);
    let frames = clouds
        .iter()
        .map(|c| model.frame_inputs(&p0, c))
        .collect::<Result<Vec<_>>>()?;
    let edges = all_pairs(3);
    let mut volumes = Volumes::new();
    for &(a, b) in &edges {
        volumes.ensure(&frames, a, b)?;
    }
    let poses = vec![truth[0]; 3];
    let fixed = [true, false, false];
    let states: Vec<EdgeState> = edges.iter().map(|&(a, b)| EdgeState::new(a, b, &frames, &poses)).collect();
    let start: Vec<Tensor> = poses.iter().map(pose_tensor).collect();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let head: Vec<usize> = (0..names.len())
        .filter(|&k| names[k].starts_with(&model.operator.prefix))
        .collect();
    let all = store.to_tensors();
    let inputs: Vec<Tensor> = head.iter().map(|&k| all[k].clone()).collect();
    let inject = opts.inject_sign_error;
    let f = |x: &[Tensor]| -> Result<Tensor> {
        let mut tensors = all.clone();
        for (slot, &k) in head.iter().enumerate() {
            tensors[k] = if inject { sign_flip(&x[slot])? } else { x[slot].clone() };
        }
        let p = store.params_from(&tensors);
        let mut de = Vec::new();
        for e in &states {
            let up = edge_update(&model.operator, &p, &frames, &volumes, &poses, e)?;
            let warped = Tensor::new(&[up.warped.len(), 3], up.warped.concat())?;
            de.push(DiffEdge {
                a: e.a,
                b: e.b,
                p1: frames[e.a].points.clone(),
                target: warped.add(&up.revision)?,
                weights: up.confidence.clone(),
            });
        }
        let (new, _) = diff_amba_steps(&start, &fixed, &de, 2, &Damping::default())?;
        diff_pose_loss(&new, &truth)
    };
    // Smaller steps are dominated by round-off in the difference quotient.
    let cfg = GradcheckConfig::default().with_tol(tol).with_h(1e-4).with_max_coords(6);
    let report = gradcheck(f, &inputs, &cfg)?;
    Ok(Check::new(
        "amba",
        format!("pose loss -> {} operator parameter tensors (3-frame graph)", inputs.len()),
        report.worst(),
        tol,
    ))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

type Op = fn(&[Tensor]) -> std::result::Result<Tensor, crate::autodiff::AdError>;

/// Every differentiable tensor primitive on one random instance each.
pub fn primitive_suite(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let tol = 1e-5;
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |x| x[0].add(&x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |x| x[0].sub(&x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |x| x[0].mul(&x[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], |x| {
            x[0].div(&x[1].square().add_scalar(&Tensor::scalar(0.5))?)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |x| x[0].add_row(&x[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |x| x[0].mul_row(&x[1])),
        ("scale_rows", vec![vec![3, 4], vec![3]], |x| x[0].scale_rows(&x[1])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |x| x[0].matmul(&x[1])),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |x| x[0].matmul_nt(&x[1])),
        ("matmul_tn", vec![vec![4, 3], vec![4, 2]], |x| x[0].matmul_tn(&x[1])),
        ("transpose", vec![vec![3, 4]], |x| x[0].transpose()),
        ("concat_cols", vec![vec![3, 4], vec![3, 2]], |x| Tensor::concat_cols(&[&x[0], &x[1]])),
        ("concat_rows", vec![vec![3, 4], vec![2, 4]], |x| Tensor::concat_rows(&[&x[0], &x[1]])),
        ("slice_cols", vec![vec![3, 6]], |x| x[0].slice_cols(1, 4)),
        ("slice_rows", vec![vec![6, 3]], |x| x[0].slice_rows(2, 5)),
        ("group_sum", vec![vec![6, 2]], |x| x[0].group_sum(3)),
        ("group_max", vec![vec![6, 2]], |x| x[0].group_max(3)),
        ("gather_rows", vec![vec![4, 3]], |x| x[0].gather_rows(&[3, 0, 0, 2, 1])),
        ("sigmoid", vec![vec![3, 4]], |x| Ok(x[0].sigmoid())),
        ("tanh", vec![vec![3, 4]], |x| Ok(x[0].tanh())),
        ("relu", vec![vec![3, 4]], |x| Ok(x[0].relu())),
        ("exp", vec![vec![3, 4]], |x| Ok(x[0].exp())),
        ("square", vec![vec![3, 4]], |x| Ok(x[0].square())),
        ("softmax_rows", vec![vec![3, 4]], |x| x[0].softmax_rows()),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |x| x[0].layer_norm(&x[1], &x[2], 1e-5)),
        ("l2_normalize_rows", vec![vec![3, 4]], |x| x[0].l2_normalize_rows(1e-12)),
    ];
    let mut out = Vec::new();
    for (name, shapes, op) in cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let out_shape = op(&inputs)?.shape().to_vec();
        let proj = random_tensor(&mut rng, &out_shape);
        let inject = opts.inject_sign_error;
        let f = |x: &[Tensor]| -> Result<Tensor> {
            let y = op(x)?;
            let y = if inject { sign_flip(&y)? } else { y };
            Ok(y.mul(&proj)?.sum())
        };
        let report = gradcheck(f, &inputs, &GradcheckConfig::default().with_tol(tol))?;
        out.push(Check::new("primitives", name, report.worst(), tol));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_build_passes() {
        let checks = run(Scope::All, &SuiteOptions::default()).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn negative_control_fails_every_suite() {
        let bad = SuiteOptions {
            seed: 0,
            inject_sign_error: true,
        };
        assert!(!jacobian_suite(5, &bad).passed);
        assert!(amba_suite(&bad).unwrap().iter().step_by(2).all(|c| !c.passed));
        assert!(primitive_suite(&bad).unwrap().iter().all(|c| !c.passed));
    }
}
