//! Tape-recorded Gauss-Newton steps with analytic reverse passes.
//!
//! Poses live on the tape as `[1, 12]` row-major `[R | t]` tensors. Each step is a
//! chain of fused custom nodes: per-edge normal-equation blocks, block placement,
//! the damped Cholesky solve and the left retraction.

use super::ba::{factor, free_blocks, Damping};
use crate::autodiff::{custom_node, Tensor};
use crate::lie::{hat, se3_left_jacobian, se3_left_jacobian_inv, vee, Mat3, Mat6, Pose, Twist, Vec3, Vec6};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, SMatrix};
use std::sync::Arc;

type Mat6x12 = SMatrix<f64, 6, 12>;

pub fn pose_tensor(pose: &Pose) -> Tensor {
    Tensor::new(&[1, 12], pose.to_row_major_3x4().to_vec()).expect("12 values")
}

pub fn tensor_pose(t: &Tensor) -> Pose {
    let v: [f64; 12] = t.data().try_into().expect("pose tensor has 12 values");
    Pose::from_row_major_3x4(&v)
}

fn split(v: &[f64]) -> (Mat3, Vec3) {
    (
        Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
        Vec3::new(v[3], v[7], v[11]),
    )
}

fn join(r: &Mat3, t: &Vec3) -> Vec<f64> {
    vec![
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ]
}

fn adjoint(r: &Mat3, t: &Vec3) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(t) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m
}

fn skew_grad(b: &Mat3) -> Vec3 {
    vee(&(b - b.transpose()))
}

/// Normal-equation blocks `[J_a | J_b]^T W [J_a | J_b]` and `[J_a | J_b]^T W E` of
/// one edge, as a `[1, 156]` tensor (144 for the block, 12 for the vector).
///
/// With `J_b = [-I | hat(q)]` and `J_a = -J_b Adj(T_ab)` every row factors as
/// `J_b K` with `K = [-Adj | I]`, so the reductions happen in 6x6.
pub fn edge_blocks(
    pose_a: &Tensor,
    pose_b: &Tensor,
    p1: Arc<Vec<[f64; 3]>>,
    target: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let n = p1.len();
    if target.shape() != [n, 3] || weights.shape() != [n, 3] {
        return Err(Error::Graph(format!(
            "edge tensors {:?} / {:?} do not match {n} points",
            target.shape(),
            weights.shape()
        )));
    }
    let (ra, ta) = split(pose_a.data());
    let (rb, tb) = split(pose_b.data());
    let r = rb * ra.transpose();
    let t = tb - r * ta;
    let adj = adjoint(&r, &t);
    let mut k = Mat6x12::zeros();
    k.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-adj));
    k.fixed_view_mut::<6, 6>(0, 6).copy_from(&Mat6::identity());

    let s = target.shared_data();
    let w = weights.shared_data();
    let mut q = Vec::with_capacity(n);
    let mut m = Mat6::zeros();
    let mut v = Vec6::zeros();
    for i in 0..n {
        let qi = r * Vec3::from(p1[i]) + t;
        let hq = hat(&qi);
        for kk in 0..3 {
            let e = s[3 * i + kk] - qi[kk];
            let wk = w[3 * i + kk];
            let j = row(kk, &hq);
            m += j * j.transpose() * wk;
            v += j * (wk * e);
        }
        q.push(qi);
    }
    let h = k.transpose() * m * k;
    let g = k.transpose() * v;
    let mut out: Vec<f64> = h.as_slice().to_vec();
    out.extend_from_slice(g.as_slice());

    let q = Arc::new(q);
    Ok(custom_node(&[pose_a, pose_b, target, weights], &[1, 156], out, move |up| {
        let gh = SMatrix::<f64, 12, 12>::from_column_slice(&up[..144]);
        let gg = SMatrix::<f64, 12, 1>::from_column_slice(&up[144..]);
        let gm = k * gh * k.transpose();
        let gv = k * gg;
        let gk = m * k * (gh + gh.transpose()) + v * gg.transpose();
        let g_adj: Mat6 = -gk.fixed_view::<6, 6>(0, 0).into_owned();

        let gm_sym = gm + gm.transpose();
        let mut g_target = vec![0.0; 3 * n];
        let mut g_weights = vec![0.0; 3 * n];
        let mut g_r = Mat3::zeros();
        let mut g_t = Vec3::zeros();
        for i in 0..n {
            let hq = hat(&q[i]);
            let mut gj_rot = Mat3::zeros();
            let mut gq = Vec3::zeros();
            for kk in 0..3 {
                let e = s[3 * i + kk] - q[i][kk];
                let wk = w[3 * i + kk];
                let j = row(kk, &hq);
                let gv_j = gv.dot(&j);
                g_weights[3 * i + kk] = (j.transpose() * gm * j)[0] + gv_j * e;
                let ge = wk * gv_j;
                g_target[3 * i + kk] = ge;
                gq[kk] -= ge;
                let gj = gm_sym * j * wk + gv * (wk * e);
                for c in 0..3 {
                    gj_rot[(kk, c)] = gj[3 + c];
                }
            }
            gq += skew_grad(&gj_rot);
            g_r += gq * Vec3::from(p1[i]).transpose();
            g_t += gq;
        }
        // Adj(T) = [[R, hat(t) R], [0, R]].
        let ga00 = g_adj.fixed_view::<3, 3>(0, 0).into_owned();
        let ga01 = g_adj.fixed_view::<3, 3>(0, 3).into_owned();
        let ga11 = g_adj.fixed_view::<3, 3>(3, 3).into_owned();
        g_r += ga00 + ga11 + hat(&t).transpose() * ga01;
        g_t += skew_grad(&(ga01 * r.transpose()));
        // R = R_b R_a^T, t = t_b - R t_a.
        g_r -= g_t * ta.transpose();
        let g_ta = -(r.transpose() * g_t);
        let g_rb = g_r * ra;
        let g_ra = g_r.transpose() * rb;
        vec![join(&g_ra, &g_ta), join(&g_rb, &g_t), g_target, g_weights]
    })?)
}

/// Row `k` of `[-I | hat(q)]` as a column vector.
fn row(k: usize, hq: &Mat3) -> Vec6 {
    let mut j = Vec6::zeros();
    j[k] = -1.0;
    for c in 0..3 {
        j[3 + c] = hq[(k, c)];
    }
    j
}

/// Places per-edge blocks into the global `(H, b)` of the free frames, as a
/// `[n, n + 1]` tensor whose last column is `b = -sum J^T W E`.
pub fn place_blocks(blocks: &[(usize, usize, Tensor)], slot: &[Option<usize>], n_free: usize) -> Result<Tensor> {
    let n = 6 * n_free;
    let cols = n + 1;
    let mut out = vec![0.0; n * cols];
    let targets: Vec<[Option<usize>; 2]> = blocks.iter().map(|(a, b, _)| [slot[*a], slot[*b]]).collect();
    for ((_, _, blk), tg) in blocks.iter().zip(&targets) {
        let d = blk.data();
        for (ro, rs) in tg.iter().enumerate() {
            let Some(rs) = rs else { continue };
            for r in 0..6 {
                let gr = 6 * rs + r;
                out[gr * cols + n] -= d[144 + 6 * ro + r];
                for (co, cs) in tg.iter().enumerate() {
                    let Some(cs) = cs else { continue };
                    for c in 0..6 {
                        // Blocks are stored column-major.
                        out[gr * cols + 6 * cs + c] += d[(6 * co + c) * 12 + 6 * ro + r];
                    }
                }
            }
        }
    }
    let inputs: Vec<&Tensor> = blocks.iter().map(|(_, _, t)| t).collect();
    Ok(custom_node(&inputs, &[n, cols], out, move |up| {
        targets
            .iter()
            .map(|tg| {
                let mut g = vec![0.0; 156];
                for (ro, rs) in tg.iter().enumerate() {
                    let Some(rs) = rs else { continue };
                    for r in 0..6 {
                        let gr = 6 * rs + r;
                        g[144 + 6 * ro + r] = -up[gr * cols + n];
                        for (co, cs) in tg.iter().enumerate() {
                            let Some(cs) = cs else { continue };
                            for c in 0..6 {
                                g[(6 * co + c) * 12 + 6 * ro + r] = up[gr * cols + 6 * cs + c];
                            }
                        }
                    }
                }
                g
            })
            .collect()
    })?)
}

/// Solves the damped system stored as `[H | b]`, returning `[n, 1]` and the
/// damping used.
///
/// The reverse pass is the adjoint solve: `y = H_d^-1 g`, `db = y`, `dH_d = -y x^T`,
/// pulled back through the damping.
pub fn damped_solve(system: &Tensor, damping: &Damping) -> Result<(Tensor, f64)> {
    let n = system.rows();
    let cols = n + 1;
    let d = system.data();
    let h = DMatrix::from_fn(n, n, |r, c| d[r * cols + c]);
    let b = DVector::from_fn(n, |r, _| d[r * cols + n]);
    let (ch, lambda) = factor(&h, damping)?;
    let x = ch.solve(&b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { lambda });
    }
    let xs = x.clone();
    let node = custom_node(&[system], &[n, 1], x.as_slice().to_vec(), move |up| {
        let y = ch.solve(&DVector::from_column_slice(up));
        let mut g = vec![0.0; n * cols];
        for r in 0..n {
            g[r * cols + n] = y[r];
            for c in 0..n {
                g[r * cols + c] = -y[r] * xs[c];
            }
            g[r * cols + r] *= 1.0 + lambda;
        }
        vec![g]
    })?;
    Ok((node, lambda))
}

/// `Exp(delta) * T` for `delta: [6, 1]` (or `[1, 6]`) and a `[1, 12]` pose.
pub fn retract(delta: &Tensor, pose: &Tensor) -> Result<Tensor> {
    if delta.len() != 6 || pose.len() != 12 {
        return Err(Error::Graph("retract expects 6 + 12 values".into()));
    }
    let xi = Twist::from_slice(delta.data());
    let step = Pose::exp(&xi);
    let (rs, ts) = (*step.rotation().matrix(), *step.translation());
    let (r, t) = split(pose.data());
    let (r_new, t_new) = (rs * r, rs * t + ts);
    let jl = se3_left_jacobian(&xi);
    Ok(custom_node(&[delta, pose], &[1, 12], join(&r_new, &t_new), move |up| {
        let (gr, gt) = split(up);
        let a = gr * r_new.transpose() + gt * t_new.transpose();
        let mut eta = Vec6::zeros();
        eta.fixed_rows_mut::<3>(0).copy_from(&gt);
        eta.fixed_rows_mut::<3>(3).copy_from(&skew_grad(&a));
        let g_delta = jl.transpose() * eta;
        vec![g_delta.as_slice().to_vec(), join(&(rs.transpose() * gr), &(rs.transpose() * gt))]
    })?)
}

/// `Log(truth^-1 * T)` as a `[1, 6]` tensor.
///
/// The gradient is defined along the manifold: it is the minimum-norm matrix
/// gradient consistent with left perturbations of `T`.
pub fn pose_log_error(pose: &Tensor, truth: &Pose) -> Result<Tensor> {
    let current = tensor_pose(pose);
    let inv = truth.inverse();
    let e = inv.compose(&current).log()?;
    let de = se3_left_jacobian_inv(&e) * inv.adjoint();
    let (r, t) = split(pose.data());
    // Columns: matrix entries moved by each left generator.
    let mut d = SMatrix::<f64, 12, 6>::zeros();
    for k in 0..6 {
        let mut gen = Vec6::zeros();
        gen[k] = 1.0;
        let phi = Vec3::new(gen[3], gen[4], gen[5]);
        let rho = Vec3::new(gen[0], gen[1], gen[2]);
        let dr = hat(&phi) * r;
        let dt = hat(&phi) * t + rho;
        d.set_column(k, &SMatrix::<f64, 12, 1>::from_vec(join(&dr, &dt)));
    }
    let pinv = d * (d.transpose() * d).try_inverse().expect("generators are independent");
    Ok(custom_node(&[pose], &[1, 6], e.to_vector().as_slice().to_vec(), move |up| {
        let c = de.transpose() * Vec6::from_column_slice(up);
        vec![(pinv * c).as_slice().to_vec()]
    })?)
}

/// One tape-recorded edge of a Gauss-Newton step.
#[derive(Debug, Clone)]
pub struct DiffEdge {
    pub a: usize,
    pub b: usize,
    pub p1: Arc<Vec<[f64; 3]>>,
    pub target: Tensor,
    pub weights: Tensor,
}

/// Runs `steps` Gauss-Newton steps on tape-tracked poses. Returns the new poses and
/// the damping used per step.
pub fn diff_amba_steps(
    poses: &[Tensor],
    fixed: &[bool],
    edges: &[DiffEdge],
    steps: usize,
    damping: &Damping,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let (slot, free) = free_blocks(fixed)?;
    let mut poses = poses.to_vec();
    let mut lambdas = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut blocks = Vec::with_capacity(edges.len());
        for e in edges {
            if fixed[e.a] && fixed[e.b] {
                continue;
            }
            let blk = edge_blocks(&poses[e.a], &poses[e.b], e.p1.clone(), &e.target, &e.weights)?;
            blocks.push((e.a, e.b, blk));
        }
        let system = place_blocks(&blocks, &slot, free.len())?;
        let (dx, lambda) = damped_solve(&system, damping)?;
        lambdas.push(lambda);
        for (blk, &f) in free.iter().enumerate() {
            let d = dx.slice_rows(6 * blk, 6 * blk + 6)?;
            poses[f] = retract(&d, &poses[f])?;
        }
    }
    Ok((poses, lambdas))
}

/// `sum_f |Log(truth_f^-1 T_f)|^2` over the given frames.
pub fn diff_pose_loss(poses: &[Tensor], truth: &[Pose]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (p, gt) in poses.iter().zip(truth) {
        let l = pose_log_error(p, gt)?.square().sum();
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Graph("no poses".into()))
}
