use super::{backward, AdError, Tape, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-5,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tol(self, tol: f64) -> Self {
        GradcheckConfig { tol, ..self }
    }

    pub fn with_h(self, h: f64) -> Self {
        GradcheckConfig { h, ..self }
    }

    pub fn with_max_coords(self, n: usize) -> Self {
        GradcheckConfig {
            max_coords: Some(n),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Per input: `max |analytic - numeric| / max(|numeric|_inf, |analytic|_inf, 1e-8)`
    /// over the checked coordinates.
    pub max_rel_error: Vec<f64>,
    pub coords_checked: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of the scalar `f` at `inputs` with central
/// differences.
///
/// `f` is evaluated once on tracked copies of the inputs and then repeatedly on
/// perturbed untracked copies.
pub fn gradcheck<F, E>(f: F, inputs: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport, E>
where
    F: Fn(&[Tensor]) -> Result<Tensor, E>,
    E: From<AdError>,
{
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.track(t)).collect();
    let loss = f(&tracked)?;
    let grads = backward(&loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut coords_checked = Vec::with_capacity(inputs.len());
    let mut values: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for k in 0..inputs.len() {
        let analytic = grads.wrt(&tracked[k]);
        let n = inputs[k].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let base = inputs[k].data().to_vec();
            let eval = |delta: f64, values: &mut Vec<Tensor>| -> Result<f64, E> {
                let mut d = base.clone();
                d[j] += delta;
                values[k] = Tensor::new(inputs[k].shape(), d)?;
                Ok(f(values)?.item())
            };
            let plus = eval(cfg.h, &mut values)?;
            let minus = eval(-cfg.h, &mut values)?;
            numeric.push((plus - minus) / (2.0 * cfg.h));
        }
        values[k] = inputs[k].detach();
        let scale = coords
            .iter()
            .zip(&numeric)
            .map(|(&j, nv)| nv.abs().max(analytic[j].abs()))
            .fold(1e-8, f64::max);
        let err = coords
            .iter()
            .zip(&numeric)
            .map(|(&j, nv)| (analytic[j] - nv).abs() / scale)
            .fold(0.0, f64::max);
        max_rel_error.push(err);
        coords_checked.push(coords.len());
    }
    let passed = max_rel_error.iter().all(|e| *e < cfg.tol);
    Ok(GradcheckReport {
        max_rel_error,
        coords_checked,
        tol: cfg.tol,
        passed,
    })
}
