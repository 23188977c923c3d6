//! All-pair correlation volumes and the two-stage neighborhood lookup around warped
//! points.

use crate::autodiff::{ParamStore, Params, Tensor};
use crate::lie::Pose;
use crate::nn::Mlp;
use crate::pointcloud::{knn, PointCloud};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `V = F1 F2^T / sqrt(D)`.
pub fn build_volume(f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
    let d = f1.cols();
    if f2.cols() != d {
        return Err(crate::autodiff::AdError::ShapeMismatch {
            op: "build_volume",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        }
        .into());
    }
    Ok(f1.matmul_nt(f2)?.scalar_mul(1.0 / (d as f64).sqrt()))
}

/// Frame-1 points expressed in frame 2 under the current poses: `T2 T1^-1 P1`.
pub fn warp(p1: &PointCloud, t1: &Pose, t2: &Pose) -> PointCloud {
    p1.transformed(&t2.compose(&t1.inverse()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookupConfig {
    /// Neighbors of each warped point in the target cloud.
    pub k1: usize,
    /// Neighbors of each warped point among the warped points.
    pub k2: usize,
    pub hidden: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        LookupConfig {
            k1: 8,
            k2: 4,
            hidden: 32,
        }
    }
}

impl LookupConfig {
    /// Width of the correlation feature: weighted (displacement, correlation) plus the
    /// raw correlations of the `k1` neighbors.
    pub fn d_cf(&self) -> usize {
        4 + self.k1
    }
}

#[derive(Debug, Clone)]
pub struct LookupOutput {
    /// `[N, d_cf]` correlation features.
    pub cf: Tensor,
    /// `[N, k1]` stage-one neighbor weights (rows sum to one).
    pub stage1_weights: Tensor,
    /// `[N, k2]` stage-two neighbor weights.
    pub stage2_weights: Tensor,
    pub stage1_neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lookup {
    pub prefix: String,
    pub cfg: LookupConfig,
}

impl Lookup {
    pub fn new(prefix: impl Into<String>, cfg: LookupConfig) -> Self {
        Lookup {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn stage1(&self) -> Mlp {
        let h = self.cfg.hidden;
        Mlp::new(format!("{}stage1", self.prefix), &[4, h, h, 1])
    }

    fn stage2(&self) -> Mlp {
        let h = self.cfg.hidden;
        Mlp::new(format!("{}stage2", self.prefix), &[3, h, h, 1])
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stage1().init(store, rng);
        self.stage2().init(store, rng);
    }

    /// Correlation features for warped points `p12` against target points `p2`.
    ///
    /// `volume` is `V[i, j] = <f1_i, f2_j>` for this edge, or the volume of the
    /// reverse edge when `transposed` is set.
    pub fn forward(
        &self,
        p: &Params,
        p12: &[[f64; 3]],
        p2: &[[f64; 3]],
        volume: &Tensor,
        transposed: bool,
    ) -> Result<LookupOutput> {
        let n = p12.len();
        let (k1, k2) = (self.cfg.k1, self.cfg.k2);
        if volume.shape() != [n, p2.len()] && volume.shape() != [p2.len(), n] {
            return Err(Error::Graph(format!(
                "volume shape {:?} does not fit {n} x {} points",
                volume.shape(),
                p2.len()
            )));
        }
        let cols = volume.cols();

        let nn1 = knn(p12, p2, k1)?;
        let mut flat = Vec::with_capacity(n * k1);
        let mut disp = Vec::with_capacity(n * k1 * 3);
        for j in 0..n {
            for &i in nn1.row(j) {
                flat.push(if transposed { i * cols + j } else { j * cols + i });
                disp.extend((0..3).map(|a| p2[i][a] - p12[j][a]));
            }
        }
        let c = volume.reshape(&[volume.len()])?.gather(&flat)?;
        let d = Tensor::new(&[n * k1, 3], disp)?;
        let feats = Tensor::concat_cols(&[&d, &c])?;
        let w1 = self
            .stage1()
            .forward(p, &feats)?
            .reshape(&[n, k1])?
            .softmax_rows()?;
        let pooled = feats.scale_rows(&w1.reshape(&[n * k1])?)?.group_sum(k1)?;
        let g = Tensor::concat_cols(&[&pooled, &c.reshape(&[n, k1])?])?;

        let nn2 = knn(p12, p12, k2)?;
        let mut rel = Vec::with_capacity(n * k2 * 3);
        for j in 0..n {
            for &i in nn2.row(j) {
                rel.extend((0..3).map(|a| p12[i][a] - p12[j][a]));
            }
        }
        let rel = Tensor::new(&[n * k2, 3], rel)?;
        let w2 = self
            .stage2()
            .forward(p, &rel)?
            .reshape(&[n, k2])?
            .softmax_rows()?;
        let cf = g
            .gather_rows(&nn2.indices)?
            .scale_rows(&w2.reshape(&[n * k2])?)?
            .group_sum(k2)?;
        Ok(LookupOutput {
            cf,
            stage1_weights: w1,
            stage2_weights: w2,
            stage1_neighbors: nn1.indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Twist, Vec3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_examples() {
        let f1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f2 = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let v = build_volume(&f1, &f2).unwrap();
        let scaled: Vec<f64> = v.data().iter().map(|x| x * 2f64.sqrt()).collect();
        for (a, b) in scaled.iter().zip([2.0, 0.0, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let vt = build_volume(&f2, &f1).unwrap().transpose().unwrap();
        assert_eq!(vt.data(), v.data());
        assert!(build_volume(&f1, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn warp_examples() {
        let p1 = PointCloud::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]]);
        let t = Pose::exp(&Twist::new(Vec3::new(0.3, 0.1, 0.0), Vec3::new(0.0, 0.1, 0.2)));
        assert_eq!(warp(&p1, &t, &t).points.len(), 2);
        for (a, b) in warp(&p1, &t, &t).points.iter().zip(&p1.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let shift = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let w = warp(&p1, &Pose::identity(), &shift);
        assert_eq!(w.points[0], [2.0, 2.0, 3.0]);
    }

    fn setup(k1: usize, k2: usize) -> (Lookup, ParamStore, Vec<[f64; 3]>, Vec<[f64; 3]>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lk = Lookup::new("lk.", LookupConfig { k1, k2, hidden: 6 });
        let mut store = ParamStore::new();
        lk.init(&mut store, &mut rng);
        let n = 30;
        let p2: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(0.0..2.0)])
            .collect();
        let p12: Vec<[f64; 3]> = p2.iter().map(|p| [p[0] + 0.05, p[1] - 0.02, p[2]]).collect();
        let v = Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (lk, store, p12, p2, v)
    }

    #[test]
    fn coincident_single_neighbor_reads_the_volume() {
        let (lk, store, _, p2, v) = setup(1, 1);
        let out = lk.forward(&store.bind(None), &p2, &p2, &v, false).unwrap();
        for j in 0..p2.len() {
            // Stage one: weight 1 on the coincident point, zero displacement.
            assert_eq!(&out.cf.data()[j * 5..j * 5 + 3], &[0.0, 0.0, 0.0]);
            assert_eq!(out.cf.at(j, 3), v.at(j, j));
            assert_eq!(out.cf.at(j, 4), v.at(j, j));
        }
    }

    #[test]
    fn constant_weights_give_plain_means() {
        let (lk, mut store, p12, p2, v) = setup(8, 4);
        // Zero last layers make every logit equal.
        for name in ["lk.stage1.l2.w", "lk.stage1.l2.b", "lk.stage2.l2.w", "lk.stage2.l2.b"] {
            store.get_mut(name).unwrap().iter_mut().for_each(|x| *x = 0.0);
        }
        let out = lk.forward(&store.bind(None), &p12, &p2, &v, false).unwrap();
        let nn1 = knn(&p12, &p2, 8).unwrap();
        let nn2 = knn(&p12, &p12, 4).unwrap();
        let stage1 = |j: usize| -> Vec<f64> {
            let mut g = vec![0.0; 12];
            for (s, &i) in nn1.row(j).iter().enumerate() {
                for a in 0..3 {
                    g[a] += (p2[i][a] - p12[j][a]) / 8.0;
                }
                g[3] += v.at(j, i) / 8.0;
                g[4 + s] = v.at(j, i);
            }
            g
        };
        for j in 0..p12.len() {
            let mut expect = vec![0.0; 12];
            for &i in nn2.row(j) {
                for (e, x) in expect.iter_mut().zip(stage1(i)) {
                    *e += x / 4.0;
                }
            }
            for c in 0..12 {
                assert!((out.cf.at(j, c) - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_second_stage_neighbor_is_identity() {
        let (lk, store, p12, p2, v) = setup(3, 1);
        let p = store.bind(None);
        let out = lk.forward(&p, &p12, &p2, &v, false).unwrap();
        let (lk4, _, _, _, _) = setup(3, 4);
        assert_eq!(lk4.cfg.d_cf(), out.cf.cols());
        assert!(out.stage2_weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weights_are_normalized_and_translation_invariant() {
        let (lk, store, p12, p2, v) = setup(8, 4);
        let p = store.bind(None);
        let out = lk.forward(&p, &p12, &p2, &v, false).unwrap();
        for w in [&out.stage1_weights, &out.stage2_weights] {
            for row in w.data().chunks(w.cols()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let shift = |pts: &[[f64; 3]]| -> Vec<[f64; 3]> {
            pts.iter().map(|q| [q[0] + 7.0, q[1] - 3.0, q[2] + 1.5]).collect()
        };
        let moved = lk.forward(&p, &shift(&p12), &shift(&p2), &v, false).unwrap();
        for (a, b) in out.cf.data().iter().zip(moved.cf.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_volume_matches_reverse_edge() {
        let (lk, store, p12, p2, v) = setup(8, 4);
        let p = store.bind(None);
        let direct = lk.forward(&p, &p12, &p2, &v.transpose().unwrap(), false).unwrap();
        let via_t = lk.forward(&p, &p12, &p2, &v, true).unwrap();
        assert_eq!(direct.cf.data(), via_t.cf.data());
    }
}
