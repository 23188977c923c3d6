//! Learned part of the iteration: motion encoding, per-point GRU and the two heads.

use crate::autodiff::{AdError, ParamStore, Params, Tensor};
use crate::correlation::LookupConfig;
use crate::nn::Mlp;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    pub hidden: usize,
    pub flow_width: usize,
    pub head_width: usize,
    /// Width of the context features fed into every update.
    pub context_width: usize,
    pub lookup: LookupConfig,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            hidden: 64,
            flow_width: 32,
            head_width: 64,
            context_width: 128,
            lookup: LookupConfig::default(),
        }
    }
}

impl OperatorConfig {
    pub fn motion_width(&self) -> usize {
        self.lookup.d_cf() + self.context_width + self.flow_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub prefix: String,
    pub cfg: OperatorConfig,
}

impl Operator {
    pub fn new(prefix: impl Into<String>, cfg: OperatorConfig) -> Self {
        Operator {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    fn flow_encoder(&self) -> Mlp {
        let w = self.cfg.flow_width;
        Mlp::new(self.name("flow"), &[3, w, w])
    }

    fn revision_head(&self) -> Mlp {
        let (h, w) = (self.cfg.hidden, self.cfg.head_width);
        Mlp::new(self.name("revision"), &[h, w, w, 3])
    }

    fn confidence_head(&self) -> Mlp {
        let (h, w) = (self.cfg.hidden, self.cfg.head_width);
        Mlp::new(self.name("confidence"), &[h, w, w, 3])
    }

    pub fn lookup(&self) -> crate::correlation::Lookup {
        crate::correlation::Lookup::new(self.name("lookup."), self.cfg.lookup.clone())
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.cfg.hidden;
        let fan_in = h + self.cfg.motion_width();
        self.flow_encoder().init(store, rng);
        store.init_uniform(&self.name("gru.wzr"), &[fan_in, 2 * h], fan_in, rng);
        store.init_uniform(&self.name("gru.bzr"), &[2 * h], fan_in, rng);
        store.init_uniform(&self.name("gru.wh"), &[fan_in, h], fan_in, rng);
        store.init_uniform(&self.name("gru.bh"), &[h], fan_in, rng);
        self.revision_head().init(store, rng);
        self.confidence_head().init(store, rng);
        self.lookup().init(store, rng);
    }

    /// `MF = [CF, C1, MLP(FL)]`.
    pub fn encode_motion(&self, p: &Params, cf: &Tensor, c1: &Tensor, flow: &Tensor) -> Result<Tensor, AdError> {
        let fe = self.flow_encoder().forward(p, flow)?;
        Tensor::concat_cols(&[cf, c1, &fe])
    }

    /// Gated recurrent update with weights shared over points.
    pub fn gru_update(&self, p: &Params, h: &Tensor, mf: &Tensor) -> Result<Tensor, AdError> {
        let hd = self.cfg.hidden;
        let zr = Tensor::concat_cols(&[h, mf])?
            .matmul(p.get(&self.name("gru.wzr"))?)?
            .add_row(p.get(&self.name("gru.bzr"))?)?
            .sigmoid();
        let z = zr.slice_cols(0, hd)?;
        let r = zr.slice_cols(hd, 2 * hd)?;
        let cand = Tensor::concat_cols(&[&r.mul(h)?, mf])?
            .matmul(p.get(&self.name("gru.wh"))?)?
            .add_row(p.get(&self.name("gru.bh"))?)?
            .tanh();
        blend(h, &z, &cand)
    }

    /// Context contribution to the GRU pre-activations, `[N, 3H]`. It does not change
    /// across iterations, so [`Operator::update`] takes it precomputed.
    pub fn context_projection(&self, p: &Params, c1: &Tensor) -> Result<Tensor, AdError> {
        let (lo, hi) = self.context_rows();
        let wzr = p.get(&self.name("gru.wzr"))?.slice_rows(lo, hi)?;
        let wh = p.get(&self.name("gru.wh"))?.slice_rows(lo, hi)?;
        Tensor::concat_cols(&[&c1.matmul(&wzr)?, &c1.matmul(&wh)?])
    }

    fn context_rows(&self) -> (usize, usize) {
        let lo = self.cfg.hidden + self.cfg.lookup.d_cf();
        (lo, lo + self.cfg.context_width)
    }

    /// Same as `gru_update(h, encode_motion(cf, c1, flow))` given
    /// `context_projection(c1)`.
    pub fn update(
        &self,
        p: &Params,
        h: &Tensor,
        cf: &Tensor,
        context: &Tensor,
        flow: &Tensor,
    ) -> Result<Tensor, AdError> {
        let hd = self.cfg.hidden;
        let (lo, hi) = self.context_rows();
        let fe = self.flow_encoder().forward(p, flow)?;
        let wzr = p.get(&self.name("gru.wzr"))?;
        let wh = p.get(&self.name("gru.wh"))?;
        let rows = wzr.rows();
        let zr = Tensor::concat_cols(&[h, cf])?
            .matmul(&wzr.slice_rows(0, lo)?)?
            .add(&fe.matmul(&wzr.slice_rows(hi, rows)?)?)?
            .add(&context.slice_cols(0, 2 * hd)?)?
            .add_row(p.get(&self.name("gru.bzr"))?)?
            .sigmoid();
        let z = zr.slice_cols(0, hd)?;
        let r = zr.slice_cols(hd, 2 * hd)?;
        let cand = Tensor::concat_cols(&[&r.mul(h)?, cf])?
            .matmul(&wh.slice_rows(0, lo)?)?
            .add(&fe.matmul(&wh.slice_rows(hi, rows)?)?)?
            .add(&context.slice_cols(2 * hd, 3 * hd)?)?
            .add_row(p.get(&self.name("gru.bh"))?)?
            .tanh();
        blend(h, &z, &cand)
    }

    /// Revision flow and per-axis confidence in (0, 1).
    pub fn predict_heads(&self, p: &Params, h: &Tensor) -> Result<(Tensor, Tensor), AdError> {
        let revision = self.revision_head().forward(p, h)?;
        let confidence = self.confidence_head().forward(p, h)?.sigmoid();
        Ok((revision, confidence))
    }

    /// `tanh` of the first `hidden` context channels.
    pub fn initial_hidden(&self, c1: &Tensor) -> Result<Tensor, AdError> {
        Ok(c1.slice_cols(0, self.cfg.hidden)?.tanh())
    }
}

/// `(1 - z) h + z cand`.
fn blend(h: &Tensor, z: &Tensor, cand: &Tensor) -> Result<Tensor, AdError> {
    h.add(&z.mul(&cand.sub(h)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> (Operator, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = OperatorConfig {
            hidden: 5,
            flow_width: 4,
            head_width: 6,
            context_width: 7,
            lookup: LookupConfig { k1: 2, k2: 2, hidden: 4 },
        };
        let op = Operator::new("op.", cfg);
        let mut store = ParamStore::new();
        op.init(&mut store, &mut rng);
        (op, store, rng)
    }

    #[test]
    fn motion_features_are_a_concatenation() {
        let (op, store, mut rng) = small();
        let p = store.bind(None);
        let n = 6;
        let cf = random_tensor(&mut rng, &[n, op.cfg.lookup.d_cf()]);
        let c1 = random_tensor(&mut rng, &[n, 7]);
        let zero = Tensor::zeros(&[n, 3]);
        let mf = op.encode_motion(&p, &cf, &c1, &zero).unwrap();
        assert_eq!(mf.cols(), op.cfg.motion_width());
        assert_eq!(mf.slice_cols(0, 6).unwrap().data(), cf.data());
        assert_eq!(mf.slice_cols(6, 13).unwrap().data(), c1.data());
        let enc = mf.slice_cols(13, 17).unwrap();
        let first = &enc.data()[..4];
        assert!(enc.data().chunks(4).all(|r| r == first));
        let fl = random_tensor(&mut rng, &[n, 3]);
        let mf = op.encode_motion(&p, &cf, &c1, &fl).unwrap();
        let direct = op.flow_encoder().forward(&p, &fl).unwrap();
        assert_eq!(mf.slice_cols(13, 17).unwrap().data(), direct.data());
    }

    #[test]
    fn gru_matches_scalar_loops() {
        let (op, store, mut rng) = small();
        let p = store.bind(None);
        let n = 4;
        let hd = 5;
        let h = random_tensor(&mut rng, &[n, hd]);
        let mf = random_tensor(&mut rng, &[n, op.cfg.motion_width()]);
        let out = op.gru_update(&p, &h, &mf).unwrap();
        let wzr = store.get("op.gru.wzr").unwrap();
        let bzr = store.get("op.gru.bzr").unwrap();
        let wh = store.get("op.gru.wh").unwrap();
        let bh = store.get("op.gru.bh").unwrap();
        let m = op.cfg.motion_width();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for i in 0..n {
            let x: Vec<f64> = (0..hd).map(|c| h.at(i, c)).chain((0..m).map(|c| mf.at(i, c))).collect();
            let gate = |col: usize| -> f64 {
                sig(bzr[col] + x.iter().enumerate().map(|(k, xv)| xv * wzr[k * 2 * hd + col]).sum::<f64>())
            };
            let r: Vec<f64> = (0..hd).map(|c| gate(hd + c)).collect();
            for c in 0..hd {
                let z = gate(c);
                let mut pre = bh[c];
                for k in 0..hd + m {
                    let xv = if k < hd { r[k] * x[k] } else { x[k] };
                    pre += xv * wh[k * hd + c];
                }
                let expect = (1.0 - z) * x[c] + z * pre.tanh();
                assert!((out.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gates() {
        let (op, mut store, mut rng) = small();
        let n = 3;
        let h = random_tensor(&mut rng, &[n, 5]);
        let mf = random_tensor(&mut rng, &[n, op.cfg.motion_width()]);
        let bzr = store.get_mut("op.gru.bzr").unwrap();
        bzr[..5].iter_mut().for_each(|b| *b = -60.0);
        let out = op.gru_update(&store.bind(None), &h, &mf).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bzr = store.get_mut("op.gru.bzr").unwrap();
        bzr[..5].iter_mut().for_each(|b| *b = 60.0);
        let out = op.gru_update(&store.bind(None), &h, &mf).unwrap();
        let zero_h = op.gru_update(&store.bind(None), &Tensor::zeros(&[n, 5]), &mf).unwrap();
        // With z = 1 the state is replaced by the candidate, which only sees r * h.
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(out.shape(), zero_h.shape());
    }

    #[test]
    fn fast_update_matches_reference() {
        let (op, store, mut rng) = small();
        let p = store.bind(None);
        let n = 5;
        let h = random_tensor(&mut rng, &[n, 5]);
        let cf = random_tensor(&mut rng, &[n, op.cfg.lookup.d_cf()]);
        let c1 = random_tensor(&mut rng, &[n, 7]);
        let fl = random_tensor(&mut rng, &[n, 3]);
        let slow = op.gru_update(&p, &h, &op.encode_motion(&p, &cf, &c1, &fl).unwrap()).unwrap();
        let ctx = op.context_projection(&p, &c1).unwrap();
        let fast = op.update(&p, &h, &cf, &ctx, &fl).unwrap();
        for (a, b) in slow.data().iter().zip(fast.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads() {
        let (op, mut store, mut rng) = small();
        let h = random_tensor(&mut rng, &[4, 5]);
        for name in ["op.revision.l2.w", "op.confidence.l2.w"] {
            store.get_mut(name).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        let (d, w) = op.predict_heads(&store.bind(None), &h).unwrap();
        let rb = store.get("op.revision.l2.b").unwrap();
        let cb = store.get("op.confidence.l2.b").unwrap();
        for row in 0..4 {
            for k in 0..3 {
                assert_eq!(d.at(row, k), rb[k]);
                assert_eq!(w.at(row, k), 1.0 / (1.0 + (-cb[k]).exp()));
            }
        }
        let (_, w) = op.predict_heads(&store.bind(None), &h.scalar_mul(1e3)).unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let (op, store, mut rng) = small();
        let h = random_tensor(&mut rng, &[4, 5]);
        let f = |x: &[Tensor]| -> Result<Tensor, AdError> {
            let (d, w) = op.predict_heads(&store.bind(None), &x[0])?;
            Ok(d.sum().add(&w.sum())?)
        };
        let r = gradcheck(f, &[h], &GradcheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
