//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable value plus, when it takes part in differentiation, a
//! handle to the node that produced it on a [`Tape`]. Ops record a node only when at
//! least one input is on a tape, so constant computations cost nothing extra.

mod gradcheck;
mod ops;
mod params;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use params::{
    accumulate_grads, load_checkpoint, save_checkpoint, Adam, CheckpointError, ParamStore, Params,
};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("custom node returned {got} gradients for {expected} inputs")]
    ArityMismatch { expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

type PerInputVjp = Box<dyn Fn(&[f64], usize) -> Vec<f64>>;
type FullVjp = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Vjp {
    Leaf,
    PerInput(PerInputVjp),
    Full(FullVjp),
}

struct Node {
    parents: Vec<Option<usize>>,
    input_lens: Vec<usize>,
    vjp: Vjp,
}

/// Append-only record of the operations performed on tracked tensors.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<Vec<Node>>>);

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input whose gradient is reported by [`backward`].
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor, AdError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.track(&t))
    }

    /// Tracks the value of `t` as a fresh leaf on this tape.
    pub fn track(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            parents: Vec::new(),
            input_lens: Vec::new(),
            vjp: Vjp::Leaf,
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some((self.clone(), id)),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.0.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// An untracked tensor; `data.len()` must equal the product of `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor, AdError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).expect("one element")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("consistent length")
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor, AdError> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(mismatch("from_rows", &[rows.len(), c], &[]));
        }
        Tensor::new(&[rows.len(), c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for rank-0/1 tensors).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.len()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.0)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.1)
    }
}

fn shared_tape(inputs: &[&Tensor]) -> Option<Tape> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some((tp, _)) = &t.node {
            match tape {
                None => tape = Some(tp),
                Some(existing) => assert!(
                    existing.same(tp),
                    "tensors from different tapes mixed in one op"
                ),
            }
        }
    }
    tape.cloned()
}

/// Records an op whose vector-Jacobian product is computed one input at a time.
pub(crate) fn record(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    value: Vec<f64>,
    vjp: impl Fn(&[f64], usize) -> Vec<f64> + 'static,
) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), value.len());
    let node = shared_tape(inputs).map(|tape| {
        let id = tape.push(Node {
            parents: inputs.iter().map(|t| t.id()).collect(),
            input_lens: inputs.iter().map(|t| t.len()).collect(),
            vjp: Vjp::PerInput(Box::new(vjp)),
        });
        (tape, id)
    });
    Tensor {
        shape,
        data: Arc::new(value),
        node,
    }
}

/// Registers an opaque differentiable op with an analytic backward.
///
/// `backward` receives the upstream gradient of the output and must return one
/// gradient per input, each with that input's length. Untracked inputs may receive
/// any gradient of the right length; it is discarded.
pub fn custom_node(
    inputs: &[&Tensor],
    shape: &[usize],
    value: Vec<f64>,
    backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
) -> Result<Tensor, AdError> {
    if shape.iter().product::<usize>() != value.len() {
        return Err(mismatch("custom_node", shape, &[value.len()]));
    }
    let node = shared_tape(inputs).map(|tape| {
        let id = tape.push(Node {
            parents: inputs.iter().map(|t| t.id()).collect(),
            input_lens: inputs.iter().map(|t| t.len()).collect(),
            vjp: Vjp::Full(Box::new(backward)),
        });
        (tape, id)
    });
    Ok(Tensor {
        shape: shape.to_vec(),
        data: Arc::new(value),
        node,
    })
}

/// Gradients of every tracked leaf reached from the seeds.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.id()?;
        self.grads.get(id)?.as_deref()
    }

    /// Gradient of `t`, zeros when it was not reached.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Reverse pass from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<Gradients, AdError> {
    if loss.len() != 1 {
        return Err(AdError::NotScalar(loss.shape.clone()));
    }
    backward_with(&[(loss, vec![1.0])])
}

/// Reverse pass from several outputs, each seeded with its own upstream gradient.
/// Untracked seeds are ignored.
pub fn backward_with(seeds: &[(&Tensor, Vec<f64>)]) -> Result<Gradients, AdError> {
    let tape = match seeds.iter().find_map(|(t, _)| t.tape().cloned()) {
        Some(t) => t,
        None => return Ok(Gradients::default()),
    };
    let nodes = tape.0.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    let mut top = 0;
    for (t, g) in seeds {
        if g.len() != t.len() {
            return Err(mismatch("backward seed", &t.shape, &[g.len()]));
        }
        if let Some((tp, id)) = &t.node {
            assert!(tp.same(&tape), "seeds from different tapes");
            accumulate(&mut grads[*id], g.clone());
            top = top.max(*id + 1);
        }
    }
    for id in (0..top).rev() {
        let node = &nodes[id];
        if matches!(node.vjp, Vjp::Leaf) {
            continue;
        }
        // Intermediate gradients are not reported, so free them as we go.
        let Some(g) = grads[id].take() else {
            continue;
        };
        match &node.vjp {
            Vjp::Leaf => unreachable!(),
            Vjp::PerInput(f) => {
                for (i, p) in node.parents.iter().enumerate() {
                    if let Some(p) = p {
                        let gi = f(&g, i);
                        debug_assert_eq!(gi.len(), node.input_lens[i]);
                        accumulate(&mut grads[*p], gi);
                    }
                }
            }
            Vjp::Full(f) => {
                let all = f(&g);
                if all.len() != node.parents.len() {
                    return Err(AdError::ArityMismatch {
                        expected: node.parents.len(),
                        got: all.len(),
                    });
                }
                for (i, (p, gi)) in node.parents.iter().zip(all).enumerate() {
                    if gi.len() != node.input_lens[i] {
                        return Err(mismatch("custom_node gradient", &[node.input_lens[i]], &[gi.len()]));
                    }
                    if let Some(p) = p {
                        accumulate(&mut grads[*p], gi);
                    }
                }
            }
        }
    }
    Ok(Gradients { grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones_and_half_square_gives_x() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -0.25]).unwrap();
        let g = backward(&x.sum()).unwrap();
        assert_eq!(g.wrt(&x), vec![1.0; 6]);
        let loss = x.mul(&x).unwrap().sum().scalar_mul(0.5);
        let g = backward(&loss).unwrap();
        assert_eq!(g.wrt(&x), x.data().to_vec());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.add(&x).unwrap().sum();
        assert_eq!(backward(&loss).unwrap().wrt(&x), vec![2.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(backward(&x), Err(AdError::NotScalar(_))));
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.add(&a).unwrap().sigmoid();
        assert!(!b.requires_grad());
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![0.0, 1.0]).unwrap();
        let _ = x.add(&a).unwrap();
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn custom_identity_passes_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = custom_node(&[&x], &[3], x.data().to_vec(), |g| vec![g.to_vec()]).unwrap();
        let loss = y.mul(&y).unwrap().sum();
        assert_eq!(backward(&loss).unwrap().wrt(&x), vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn custom_node_arity_is_checked() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![1.0]).unwrap();
        let y = custom_node(&[&x], &[1], vec![1.0], |g| vec![g.to_vec(), g.to_vec()]).unwrap();
        assert_eq!(
            backward(&y).unwrap_err(),
            AdError::ArityMismatch {
                expected: 1,
                got: 2
            }
        );
    }

    #[test]
    fn custom_matmul_matches_builtin() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let b = tape.leaf(&[3, 2], vec![2.0, -1.0, 1.0, 0.0, 4.0, 1.5]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.3, 0.7]).unwrap();

        let built = a.matmul(&b).unwrap().mul(&w).unwrap().sum();
        let g1 = backward(&built).unwrap();

        let (ad, bd) = (a.shared_data(), b.shared_data());
        let value = a.matmul(&b).unwrap().data().to_vec();
        let custom = custom_node(&[&a, &b], &[2, 2], value, move |g| {
            let g = Tensor::new(&[2, 2], g.to_vec()).unwrap();
            let at = Tensor::new(&[2, 3], ad.to_vec()).unwrap();
            let bt = Tensor::new(&[3, 2], bd.to_vec()).unwrap();
            vec![
                g.matmul_nt(&bt).unwrap().data().to_vec(),
                at.matmul_tn(&g).unwrap().data().to_vec(),
            ]
        })
        .unwrap();
        let g2 = backward(&custom.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(g1.wrt(&a), g2.wrt(&a));
        assert_eq!(g1.wrt(&b), g2.wrt(&b));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let w = tape.leaf(&[3, 2], (0..6).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
            let loss = x.matmul(&w).unwrap().tanh().softmax_rows().unwrap().mul(&x.matmul(&w).unwrap()).unwrap().sum();
            let g = backward(&loss).unwrap();
            (g.wrt(&x), g.wrt(&w))
        };
        assert_eq!(run(), run());
    }
}
