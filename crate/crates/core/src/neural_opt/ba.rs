//! Weighted Gauss-Newton over frame poses on plain `f64` data.

use crate::lie::{hat, Mat3, Pose, Twist, Vec3};
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SMatrix};
use serde::{Deserialize, Serialize};

pub type Jac = SMatrix<f64, 3, 6>;

/// `P12* = warp(P1) + dFL`.
pub fn target_points(p1: &[[f64; 3]], t_a: &Pose, t_b: &Pose, revision: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let rel = t_b.compose(&t_a.inverse());
    p1.iter()
        .zip(revision)
        .map(|(p, d)| {
            let q = rel.act_array(p);
            [q[0] + d[0], q[1] + d[1], q[2] + d[2]]
        })
        .collect()
}

/// `E = P12* - T_ab P1`.
pub fn residual(t_a: &Pose, t_b: &Pose, p1: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let rel = t_b.compose(&t_a.inverse());
    p1.iter()
        .zip(target)
        .map(|(p, s)| {
            let q = rel.act_array(p);
            [s[0] - q[0], s[1] - q[1], s[2] - q[2]]
        })
        .collect()
}

/// Per-point derivatives of the residual with respect to left perturbations of
/// `T_a` and `T_b`.
pub fn jacobians(t_a: &Pose, t_b: &Pose, p1: &[[f64; 3]]) -> (Vec<Jac>, Vec<Jac>) {
    let rel = t_b.compose(&t_a.inverse());
    let adj = rel.adjoint();
    p1.iter()
        .map(|p| {
            let q = rel.act_array(p);
            let j2 = point_jacobian(&Vec3::new(q[0], q[1], q[2]));
            (-j2 * adj, j2)
        })
        .unzip()
}

/// `[-I | hat(q)]`.
fn point_jacobian(q: &Vec3) -> Jac {
    let mut j = Jac::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Mat3::identity()));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(q));
    j
}

/// One directed edge of the least-squares problem.
#[derive(Debug, Clone)]
pub struct EdgeProblem<'a> {
    pub a: usize,
    pub b: usize,
    pub p1: &'a [[f64; 3]],
    pub target: &'a [[f64; 3]],
    /// Per-point, per-axis weights.
    pub weights: &'a [[f64; 3]],
}

#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Frame index of each 6-wide block.
    pub free: Vec<usize>,
    /// Weighted squared residual at the linearization point.
    pub cost: f64,
}

/// Block index per frame, `None` for fixed frames.
pub fn free_blocks(fixed: &[bool]) -> Result<(Vec<Option<usize>>, Vec<usize>)> {
    let mut slot = vec![None; fixed.len()];
    let mut free = Vec::new();
    for (f, &is_fixed) in fixed.iter().enumerate() {
        if !is_fixed {
            slot[f] = Some(free.len());
            free.push(f);
        }
    }
    if free.is_empty() {
        return Err(Error::AllFramesFixed);
    }
    Ok((slot, free))
}

pub fn weighted_cost(poses: &[Pose], edges: &[EdgeProblem]) -> f64 {
    let mut cost = 0.0;
    for e in edges {
        for (r, w) in residual(&poses[e.a], &poses[e.b], e.p1, e.target).iter().zip(e.weights) {
            cost += (0..3).map(|k| w[k] * r[k] * r[k]).sum::<f64>();
        }
    }
    cost
}

/// Undamped `H = J^T W J`, `b = -J^T W E` with fixed frames removed.
pub fn assemble(poses: &[Pose], fixed: &[bool], edges: &[EdgeProblem]) -> Result<NormalEquations> {
    let (slot, free) = free_blocks(fixed)?;
    let n = 6 * free.len();
    let mut h = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut cost = 0.0;
    for e in edges {
        if e.a >= poses.len() || e.b >= poses.len() || e.a == e.b {
            return Err(Error::Graph(format!("bad edge {} -> {}", e.a, e.b)));
        }
        let (sa, sb) = (slot[e.a], slot[e.b]);
        if sa.is_none() && sb.is_none() {
            continue;
        }
        let res = residual(&poses[e.a], &poses[e.b], e.p1, e.target);
        let (j1, j2) = jacobians(&poses[e.a], &poses[e.b], e.p1);
        let mut he = SMatrix::<f64, 12, 12>::zeros();
        let mut ge = SMatrix::<f64, 12, 1>::zeros();
        for i in 0..res.len() {
            let mut j = SMatrix::<f64, 3, 12>::zeros();
            j.fixed_view_mut::<3, 6>(0, 0).copy_from(&j1[i]);
            j.fixed_view_mut::<3, 6>(0, 6).copy_from(&j2[i]);
            for k in 0..3 {
                let w = e.weights[i][k];
                let row = j.row(k);
                he += row.transpose() * row * w;
                ge += row.transpose() * (w * res[i][k]);
                cost += w * res[i][k] * res[i][k];
            }
        }
        let blocks = [(0, sa), (6, sb)];
        for &(ro, rs) in &blocks {
            let Some(rs) = rs else { continue };
            for r in 0..6 {
                b[6 * rs + r] -= ge[ro + r];
            }
            for &(co, cs) in &blocks {
                let Some(cs) = cs else { continue };
                for r in 0..6 {
                    for c in 0..6 {
                        h[(6 * rs + r, 6 * cs + c)] += he[(ro + r, co + c)];
                    }
                }
            }
        }
    }
    Ok(NormalEquations { h, b, free, cost })
}

/// Levenberg damping `H + lambda (diag(H) + I)`, escalated on Cholesky failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Damping {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for Damping {
    fn default() -> Self {
        Damping {
            initial: 1e-6,
            factor: 10.0,
            max: 1e-2,
        }
    }
}

impl Damping {
    /// Plain Gauss-Newton.
    pub fn none() -> Self {
        Damping {
            initial: 0.0,
            factor: 10.0,
            max: 0.0,
        }
    }
}

pub fn damped(h: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += lambda * (h[(i, i)] + 1.0);
    }
    out
}

/// Cholesky factor of the damped matrix and the damping that succeeded.
pub fn factor(h: &DMatrix<f64>, damping: &Damping) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut lambda = damping.initial;
    loop {
        if let Some(ch) = Cholesky::new(damped(h, lambda)) {
            return Ok((ch, lambda));
        }
        let next = lambda * damping.factor;
        if next <= lambda || next > damping.max * (1.0 + 1e-12) {
            return Err(Error::NotPositiveDefinite { lambda });
        }
        lambda = next;
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub dx: DVector<f64>,
    pub lambda: f64,
}

pub fn solve(neq: &NormalEquations, damping: &Damping) -> Result<Solution> {
    let (ch, lambda) = factor(&neq.h, damping)?;
    let dx = ch.solve(&neq.b);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { lambda });
    }
    Ok(Solution { dx, lambda })
}

/// Diagnostics of one Gauss-Newton step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub cost: f64,
    pub dx_norm: f64,
    pub lambda: f64,
}

/// One Gauss-Newton step, retracting every free pose by its increment.
pub fn amba_step(
    poses: &mut [Pose],
    fixed: &[bool],
    edges: &[EdgeProblem],
    damping: &Damping,
) -> Result<StepReport> {
    let neq = assemble(poses, fixed, edges)?;
    let sol = solve(&neq, damping)?;
    for (blk, &f) in neq.free.iter().enumerate() {
        let d = Twist::from_slice(&sol.dx.as_slice()[6 * blk..6 * blk + 6]);
        poses[f] = poses[f].retract(&d);
    }
    Ok(StepReport {
        cost: neq.cost,
        dx_norm: sol.dx.norm(),
        lambda: sol.lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose<R: Rng>(rng: &mut R, t: f64, r: f64) -> Pose {
        let mut v = [0.0; 6];
        for (k, x) in v.iter_mut().enumerate() {
            *x = rng.random_range(-1.0..1.0) * if k < 3 { t } else { r };
        }
        Pose::exp(&Twist::from_slice(&v))
    }

    fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-1.0..3.0)])
            .collect()
    }

    #[test]
    fn identity_jacobian_shapes() {
        let p = [[1.0, 2.0, 3.0]];
        let (j1, j2) = jacobians(&Pose::identity(), &Pose::identity(), &p);
        let expect = point_jacobian(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(j2[0], expect);
        assert_eq!(j1[0], -expect);
        assert_eq!(expect[(0, 4)], -3.0);
        assert_eq!(expect[(1, 3)], 3.0);
    }

    #[test]
    fn residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p1 = random_points(&mut rng, 20);
        let (ta, tb) = (random_pose(&mut rng, 2.0, 0.5), random_pose(&mut rng, 2.0, 0.5));
        let zero = vec![[0.0; 3]; 20];
        let tgt = target_points(&p1, &ta, &tb, &zero);
        assert!(residual(&ta, &tb, &p1, &tgt).iter().flatten().all(|v| v.abs() < 1e-12));

        let delta = vec![[0.1, -0.2, 0.3]; 20];
        let tgt = target_points(&p1, &Pose::identity(), &Pose::identity(), &delta);
        for r in residual(&Pose::identity(), &Pose::identity(), &p1, &tgt) {
            for (x, y) in r.iter().zip([0.1, -0.2, 0.3]) {
                assert!((x - y).abs() < 1e-14);
            }
        }

        // Homogeneous-matrix oracle.
        let tgt = random_points(&mut rng, 20);
        let m = tb.to_matrix() * ta.to_matrix().try_inverse().unwrap();
        for (i, r) in residual(&ta, &tb, &p1, &tgt).iter().enumerate() {
            let q = m * nalgebra::Vector4::new(p1[i][0], p1[i][1], p1[i][2], 1.0);
            for k in 0..3 {
                assert!((r[k] - (tgt[i][k] - q[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..100 {
            let ta = random_pose(&mut rng, 3.0, 1.0);
            let tb = random_pose(&mut rng, 3.0, 1.0);
            let p = random_points(&mut rng, 1);
            let tgt = random_points(&mut rng, 1);
            let (j1, j2) = jacobians(&ta, &tb, &p);
            for (which, j) in [(0, j1[0]), (1, j2[0])] {
                let mut num = Jac::zeros();
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
                    for r in 0..3 {
                        num[(r, c)] = (rp[r] - rm[r]) / (2.0 * h);
                    }
                }
                let err = (j - num).abs().max() / num.abs().max().max(1e-8);
                assert!(err < 1e-5, "relative error {err}");
            }
        }
    }

    fn dense_oracle(poses: &[Pose], fixed: &[bool], e: &EdgeProblem) -> (DMatrix<f64>, DVector<f64>) {
        let n = 6 * poses.len();
        let res = residual(&poses[e.a], &poses[e.b], e.p1, e.target);
        let (j1, j2) = jacobians(&poses[e.a], &poses[e.b], e.p1);
        let mut j = DMatrix::zeros(3 * res.len(), n);
        let mut r = DVector::zeros(3 * res.len());
        let mut w = DVector::zeros(3 * res.len());
        for i in 0..res.len() {
            for k in 0..3 {
                for c in 0..6 {
                    j[(3 * i + k, 6 * e.a + c)] = j1[i][(k, c)];
                    j[(3 * i + k, 6 * e.b + c)] = j2[i][(k, c)];
                }
                r[3 * i + k] = res[i][k];
                w[3 * i + k] = e.weights[i][k];
            }
        }
        let wj = DMatrix::from_diagonal(&w) * &j;
        let h = j.transpose() * &wj;
        let b = -(wj.transpose() * r);
        let keep: Vec<usize> = (0..n).filter(|i| !fixed[i / 6]).collect();
        (h.select_rows(&keep).select_columns(&keep), b.select_rows(&keep))
    }

    #[test]
    fn assembly_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, 1.0, 0.3)).collect();
        let p1 = random_points(&mut rng, 30);
        let tgt = random_points(&mut rng, 30);
        let w: Vec<[f64; 3]> = (0..30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let e = EdgeProblem { a: 2, b: 1, p1: &p1, target: &tgt, weights: &w };
        let fixed = [true, false, false];
        let neq = assemble(&poses, &fixed, std::slice::from_ref(&e)).unwrap();
        let (h, b) = dense_oracle(&poses, &fixed, &e);
        assert!((&neq.h - &h).abs().max() < 1e-9 * h.abs().max());
        assert!((&neq.b - &b).abs().max() < 1e-9 * b.abs().max());
        assert!((&neq.h - neq.h.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn zero_weights_leave_poses_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p1 = random_points(&mut rng, 10);
        let tgt = random_points(&mut rng, 10);
        let w = vec![[0.0; 3]; 10];
        let mut poses = vec![Pose::identity(), random_pose(&mut rng, 1.0, 0.2)];
        let before = poses[1];
        let e = [EdgeProblem { a: 0, b: 1, p1: &p1, target: &tgt, weights: &w }];
        let neq = assemble(&poses, &[true, false], &e).unwrap();
        assert!(neq.h.iter().all(|&v| v == 0.0) && neq.b.iter().all(|&v| v == 0.0));
        let rep = amba_step(&mut poses, &[true, false], &e, &Damping::default()).unwrap();
        assert_eq!(rep.dx_norm, 0.0);
        assert_eq!(poses[1].to_row_major_3x4(), before.to_row_major_3x4());
    }

    #[test]
    fn all_fixed_is_an_error() {
        let p1 = [[0.0; 3]];
        let e = [EdgeProblem { a: 0, b: 1, p1: &p1, target: &p1, weights: &[[1.0; 3]] }];
        let poses = [Pose::identity(); 2];
        assert!(matches!(assemble(&poses, &[true, true], &e), Err(Error::AllFramesFixed)));
    }

    #[test]
    fn solve_cases() {
        let mut b = DVector::zeros(6);
        b[0] = 1.0;
        let neq = NormalEquations { h: DMatrix::identity(6, 6), b: b.clone(), free: vec![1], cost: 0.0 };
        let x = solve(&neq, &Damping::none()).unwrap().dx;
        assert_eq!(x, b);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(12, 12);
        let b = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let neq = NormalEquations { h: h.clone(), b: b.clone(), free: vec![1, 2], cost: 0.0 };
        let x = solve(&neq, &Damping::none()).unwrap().dx;
        let direct = h.clone().try_inverse().unwrap() * &b;
        assert!((&x - direct).abs().max() < 1e-10);
        assert!((&h * &x - &b).abs().max() < 1e-10 * (1.0 + b.abs().max()));

        let singular = NormalEquations { h: DMatrix::zeros(6, 6), b: DVector::zeros(6), free: vec![1], cost: 0.0 };
        assert!(matches!(solve(&singular, &Damping::none()), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn damping_escalates_until_positive() {
        // Indefinite by a small margin: a tiny lambda is not enough.
        let mut h = DMatrix::identity(6, 6);
        h[(0, 0)] = -1e-4;
        let (_, lambda) = factor(&h, &Damping::default()).unwrap();
        assert!(lambda > 1e-6 && lambda <= 1e-2);
        h[(0, 0)] = -1.0;
        assert!(matches!(factor(&h, &Damping::default()), Err(Error::NotPositiveDefinite { .. })));
    }
}
