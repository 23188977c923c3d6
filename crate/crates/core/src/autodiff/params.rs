//! Named parameter storage, the Adam update and on-disk checkpoints.

use super::{AdError, Gradients, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read as _};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<(), AdError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(super::mismatch("ParamStore::insert", shape, &[values.len()]));
        }
        self.entries.insert(name.to_string(), (shape.to_vec(), values));
        Ok(())
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, values).expect("consistent shape");
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n]).expect("consistent shape");
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.1.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(|e| e.1.as_mut_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.0.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(k, (s, v))| (k.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.1.len()).sum()
    }

    /// Adds every entry of `other`, with names prefixed by `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Tensors for every parameter: leaves on `tape`, or constants without one.
    pub fn bind(&self, tape: Option<&Tape>) -> Params {
        let map = self
            .entries
            .iter()
            .map(|(k, (s, v))| {
                let t = Tensor::new(s, v.clone()).expect("stored shapes are consistent");
                let t = match tape {
                    Some(tp) => tp.track(&t),
                    None => t,
                };
                (k.clone(), t)
            })
            .collect();
        Params { map }
    }

    /// Parameter values flattened in name order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.entries
            .values()
            .map(|(s, v)| Tensor::new(s, v.clone()).expect("consistent"))
            .collect()
    }

    /// `Params` view over externally supplied tensors, in name order.
    pub fn params_from(&self, tensors: &[Tensor]) -> Params {
        assert_eq!(tensors.len(), self.entries.len());
        Params {
            map: self.entries.keys().cloned().zip(tensors.iter().cloned()).collect(),
        }
    }
}

/// Parameters bound as tensors for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor, AdError> {
        self.map
            .get(name)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    /// Gradient per parameter name (zeros for parameters the loss does not reach).
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.map.iter().map(|(k, t)| (k.clone(), g.wrt(t))).collect()
    }

    pub fn detach(&self) -> Params {
        Params {
            map: self.map.iter().map(|(k, t)| (k.clone(), t.detach())).collect(),
        }
    }
}

/// Adds `src` into `acc`, entry by entry.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Vec<f64>>, src: &BTreeMap<String, Vec<f64>>) {
    for (k, g) in src {
        match acc.get_mut(k) {
            Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k.clone(), g.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(values) = store.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                values[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    architecture: serde_json::Value,
    records: Vec<RecordInfo>,
}

#[derive(Serialize, Deserialize)]
struct RecordInfo {
    name: String,
    shape: Vec<usize>,
}

const FORMAT: &str = "rado-params-v1";

fn ck_io(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `weights.bin` (records of name, shape and little-endian `f64` values) and
/// `manifest.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    architecture: &serde_json::Value,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(ck_io(dir))?;
    let mut bytes = Vec::with_capacity(store.num_values() * 8 + 64 * store.len());
    let mut records = Vec::new();
    for (name, shape, values) in store.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        records.push(RecordInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
    }
    let weights = dir.join("weights.bin");
    fs::write(&weights, bytes).map_err(ck_io(&weights))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        architecture: architecture.clone(),
        records,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(ck_io(&path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated weights.bin".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the parameters and the
/// stored architecture description.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(ck_io(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format(format!(
            "unknown format `{}`",
            manifest.format
        )));
    }
    let wpath = dir.join("weights.bin");
    let mut bytes = Vec::new();
    fs::File::open(&wpath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(ck_io(&wpath))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let mut store = ParamStore::new();
    for rec in &manifest.records {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| CheckpointError::Format(e.to_string()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if name != rec.name || shape != rec.shape {
            return Err(CheckpointError::Format(format!(
                "record `{name}` {shape:?} disagrees with manifest entry `{}` {:?}",
                rec.name, rec.shape
            )));
        }
        let n: usize = shape.iter().product();
        let values = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(&name, &shape, values)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes in weights.bin".into()));
    }
    Ok((store, manifest.architecture))
}

#[cfg(test)]
mod tests {
    use super::super::backward;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.init_uniform("a.w", &[3, 4], 3, &mut rng);
        store.init_uniform("b", &[5], 5, &mut rng);
        store.insert("odd", &[1], vec![f64::MIN_POSITIVE / 3.0]).unwrap();
        let arch = serde_json::json!({"width": 4});
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, &arch).unwrap();
        let (back, arch_back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(arch, arch_back);
        for ((n1, s1, v1), (n2, s2, v2)) in store.iter().zip(back.iter()) {
            assert_eq!((n1, s1), (n2, s2));
            assert!(v1.iter().zip(v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", &[2], vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, &serde_json::Value::Null).unwrap();
        let w = dir.path().join("weights.bin");
        let mut bytes = fs::read(&w).unwrap();
        bytes.pop();
        fs::write(&w, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", &[2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let tape = Tape::new();
            let p = store.bind(Some(&tape));
            let x = p.get("x").unwrap();
            let loss = x.sub(&Tensor::new(&[2], vec![1.0, 0.5]).unwrap()).unwrap().square().sum();
            let g = p.grads(&backward(&loss).unwrap());
            opt.step(&mut store, &g);
        }
        let x = store.get("x").unwrap();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 0.5).abs() < 1e-3, "{x:?}");
    }
}
