//! Dual-stream radar point encoder: multi-scale set abstraction, clustering-based
//! class-aware features and a global self-attention block.

use crate::autodiff::{AdError, ParamStore, Params, Tensor};
use crate::nn::{Linear, Mlp};
use crate::pointcloud::{ball_query, farthest_point_sample, knn, PointCloud};
use crate::Error;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// Radar attributes are an order of magnitude larger than normalized offsets.
const ATTRIBUTE_SCALE: f64 = 0.1;
const COORD_SCALE: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Grouping radius per set-abstraction scale (meters).
    pub radii: Vec<f64>,
    pub ball_samples: usize,
    /// Output width of each scale.
    pub sa_width: usize,
    pub embed_width: usize,
    pub centers: usize,
    /// Points averaged into each center feature.
    pub center_k: usize,
    /// Width of the attention query/key projections.
    pub attn_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            radii: vec![0.5, 1.0, 2.0, 4.0],
            ball_samples: 16,
            sa_width: 16,
            embed_width: 64,
            centers: 8,
            center_k: 8,
            attn_width: 64,
        }
    }
}

impl BackboneConfig {
    pub fn geo_width(&self) -> usize {
        self.radii.len() * self.sa_width
    }

    /// Width of the joint features and of the final output.
    pub fn out_width(&self) -> usize {
        self.geo_width() + self.embed_width
    }
}

/// Geometry-only preprocessing of a cloud, shared by both encoders and reusable
/// across forward passes.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub n: usize,
    /// Per scale: `[N * ball_samples, 5]` rows of (offset / radius, attributes).
    grouped: Vec<Tensor>,
    /// `[N, 5]` scaled per-point channels.
    channels: Tensor,
    pub center_indices: Vec<usize>,
    /// `[C * center_k]` neighbor indices of every center.
    center_neighbors: Arc<Vec<usize>>,
}

/// Index of the point nearest the centroid (lowest index on ties).
pub fn canonical_seed(cloud: &PointCloud) -> usize {
    let c = cloud.centroid();
    let mut best = (f64::INFINITY, 0);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn prepare(cloud: &PointCloud, cfg: &BackboneConfig) -> Result<PreparedCloud, Error> {
    cloud.validate()?;
    let n = cloud.len();
    let mut grouped = Vec::with_capacity(cfg.radii.len());
    for &r in &cfg.radii {
        let bq = ball_query(&cloud.points, &cloud.points, r, cfg.ball_samples);
        let mut rows = Vec::with_capacity(n * cfg.ball_samples * 5);
        for i in 0..n {
            let p = cloud.points[i];
            for &j in bq.row(i) {
                let q = cloud.points[j];
                rows.extend_from_slice(&[
                    (q[0] - p[0]) / r,
                    (q[1] - p[1]) / r,
                    (q[2] - p[2]) / r,
                    cloud.intensity_at(j) * ATTRIBUTE_SCALE,
                    cloud.radial_velocity_at(j) * ATTRIBUTE_SCALE,
                ]);
            }
        }
        grouped.push(Tensor::new(&[n * cfg.ball_samples, 5], rows)?);
    }
    let mut ch = Vec::with_capacity(n * 5);
    for (i, p) in cloud.points.iter().enumerate() {
        ch.extend(p.iter().map(|v| v * COORD_SCALE));
        ch.push(cloud.intensity_at(i) * ATTRIBUTE_SCALE);
        ch.push(cloud.radial_velocity_at(i) * ATTRIBUTE_SCALE);
    }
    let centers = cfg.centers.min(n);
    let center_indices = farthest_point_sample(&cloud.points, centers, canonical_seed(cloud))?;
    let center_pts: Vec<[f64; 3]> = center_indices.iter().map(|&i| cloud.points[i]).collect();
    let nn = knn(&center_pts, &cloud.points, cfg.center_k.min(n))?;
    Ok(PreparedCloud {
        n,
        grouped,
        channels: Tensor::new(&[n, 5], ch)?,
        center_indices,
        center_neighbors: Arc::new(nn.indices),
    })
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub center_indices: Vec<usize>,
    /// `[C, d]` averaged embeddings of each center's neighborhood.
    pub center_features: Tensor,
    /// `[C, N]` cosine similarity between center and point embeddings.
    pub similarity: Tensor,
    /// Most similar center of every point.
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub geo: Tensor,
    pub embed: Tensor,
    pub class_aware: Tensor,
    pub joint: Tensor,
    pub out: Tensor,
    pub cluster: ClusterState,
}

/// Column-wise argmax of a row-major `[c, n]` matrix; ties go to the lowest row.
pub fn column_argmax(s: &[f64], c: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|m| {
            let mut best = 0;
            for j in 1..c {
                if s[j * n + m] > s[best * n + m] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Center features, cosine similarities and hard assignments.
pub fn cluster(
    embed: &Tensor,
    center_indices: &[usize],
    center_neighbors: &[usize],
    k: usize,
) -> Result<ClusterState, AdError> {
    let c = center_indices.len();
    let n = embed.rows();
    let center_features = embed.gather_rows(center_neighbors)?.group_sum(k)?.scalar_mul(1.0 / k as f64);
    let similarity = center_features
        .l2_normalize_rows(COSINE_EPS)?
        .matmul_nt(&embed.l2_normalize_rows(COSINE_EPS)?)?;
    let assignment = column_argmax(similarity.data(), c, n);
    Ok(ClusterState {
        center_indices: center_indices.to_vec(),
        center_features,
        similarity,
        assignment,
    })
}

/// `sigmoid(alpha * s_jm + beta)` for every point `m` and its assigned center `j`.
fn gates(cl: &ClusterState, alpha: &Tensor, beta: &Tensor) -> Result<Tensor, AdError> {
    let n = cl.assignment.len();
    let flat: Vec<usize> = cl.assignment.iter().enumerate().map(|(m, &j)| j * n + m).collect();
    let s = cl.similarity.reshape(&[cl.similarity.len()])?.gather(&flat)?;
    Ok(s.mul_scalar(alpha)?.add_scalar(beta)?.sigmoid())
}

/// Cluster-level features: each center feature blended with the gated embeddings of
/// the points assigned to it, normalized by one plus the sum of the gates.
pub fn aggregate(
    cl: &ClusterState,
    embed: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<Tensor, AdError> {
    let c = cl.center_indices.len();
    let g = gates(cl, alpha, beta)?;
    let d = embed.cols();
    let weighted = embed.scale_rows(&g)?.scatter_add_rows(&cl.assignment, c)?;
    let denom = g
        .reshape(&[cl.assignment.len(), 1])?
        .scatter_add_rows(&cl.assignment, c)?
        .add_scalar(&Tensor::scalar(1.0))?
        .matmul(&Tensor::new(&[1, d], vec![1.0; d])?)?;
    cl.center_features.add(&weighted)?.div(&denom)
}

/// Point-level class-aware features: each embedding plus its gated cluster feature.
pub fn dispatch(
    cl: &ClusterState,
    embed: &Tensor,
    agg: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<Tensor, AdError> {
    let g = gates(cl, alpha, beta)?;
    embed.add(&agg.gather_rows(&cl.assignment)?.scale_rows(&g)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub prefix: String,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(prefix: impl Into<String>, cfg: BackboneConfig) -> Self {
        Backbone {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn sa(&self, s: usize) -> Mlp {
        let w = self.cfg.sa_width;
        Mlp::new(format!("{}sa{s}", self.prefix), &[5, w, w]).with_final_relu()
    }

    fn embedding(&self) -> Mlp {
        let w = self.cfg.embed_width;
        Mlp::new(format!("{}embed", self.prefix), &[5, w, w])
    }

    fn proj(&self, name: &str, out: usize) -> Linear {
        Linear::new(format!("{}attn.{name}", self.prefix), self.cfg.out_width(), out)
    }

    fn name(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for s in 0..self.cfg.radii.len() {
            self.sa(s).init(store, rng);
        }
        self.embedding().init(store, rng);
        store.init_constant(&self.name("alpha"), &[1], 1.0);
        store.init_constant(&self.name("beta"), &[1], 0.0);
        let d = self.cfg.out_width();
        self.proj("q", self.cfg.attn_width).init(store, rng);
        self.proj("k", self.cfg.attn_width).init(store, rng);
        self.proj("v", d).init(store, rng);
        self.proj("out", d).init(store, rng);
        store.init_constant(&self.name("ln.gamma"), &[d], 1.0);
        store.init_constant(&self.name("ln.beta"), &[d], 0.0);
    }

    pub fn multi_scale_geometric(&self, p: &Params, prep: &PreparedCloud) -> Result<Tensor, AdError> {
        let mut scales = Vec::with_capacity(prep.grouped.len());
        for (s, g) in prep.grouped.iter().enumerate() {
            scales.push(self.sa(s).forward(p, g)?.group_max(self.cfg.ball_samples)?);
        }
        Tensor::concat_cols(&scales.iter().collect::<Vec<_>>())
    }

    /// Softmax attention over all points, projected, normalized and added back.
    pub fn global_transformer(&self, p: &Params, joint: &Tensor) -> Result<Tensor, AdError> {
        let q = self.proj("q", 0).forward(p, joint)?;
        let k = self.proj("k", 0).forward(p, joint)?;
        let v = self.proj("v", 0).forward(p, joint)?;
        let attn = q.matmul_nt(&k)?.softmax_rows()?;
        let mixed = attn.matmul(&v)?;
        let projected = self.proj("out", 0).forward(p, &mixed)?;
        projected
            .layer_norm(p.get(&self.name("ln.gamma"))?, p.get(&self.name("ln.beta"))?, LN_EPS)?
            .add(joint)
    }

    pub fn extract(&self, p: &Params, prep: &PreparedCloud) -> Result<FeatureSet, AdError> {
        let geo = self.multi_scale_geometric(p, prep)?;
        let embed = self.embedding().forward(p, &prep.channels)?;
        let cl = cluster(
            &embed,
            &prep.center_indices,
            &prep.center_neighbors,
            self.cfg.center_k.min(prep.n),
        )?;
        let alpha = p.get(&self.name("alpha"))?;
        let beta = p.get(&self.name("beta"))?;
        let agg = aggregate(&cl, &embed, alpha, beta)?;
        let class_aware = dispatch(&cl, &embed, &agg, alpha, beta)?;
        let joint = Tensor::concat_cols(&[&geo, &class_aware])?;
        let out = self.global_transformer(p, &joint)?;
        Ok(FeatureSet {
            geo,
            embed,
            class_aware,
            joint,
            out,
            cluster: cl,
        })
    }
}
