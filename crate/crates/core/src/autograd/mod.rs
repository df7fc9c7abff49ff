//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every primitive evaluates eagerly, pushes its output onto the [`Tape`] and,
//! when any input requires a gradient, keeps a [`Backward`] record holding
//! whatever the backward rule needs. [`Tape::backward`] replays those records
//! in reverse order. Records are appended in evaluation order, so the tape is
//! topologically sorted by construction.
//!
//! ```
//! use ddmp3d::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod conv;
mod ops;
mod sample;
mod spatial;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::ConvOptions;
pub use spatial::ResizeMode;

/// Backward rule of a recorded primitive.
///
/// `backward` receives the gradient w.r.t. the output together with the
/// input and output values, and returns one optional gradient per input
/// (`None` means "no contribution").
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<HashMap<usize, Tensor>>,
    params: RefCell<BTreeMap<String, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(HashMap::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            id: nodes.len() - 1,
            tape: self.id,
        }
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            inputs: Vec::new(),
            op: None,
        })
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            inputs: Vec::new(),
            op: None,
        })
    }

    /// Binds a named parameter as a gradient leaf. Repeated calls with the
    /// same name return the same variable.
    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let v = self.leaf(value.clone());
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> BTreeMap<String, Var> {
        self.params.borrow().clone()
    }

    /// Gradients of every bound parameter, keyed by name. Parameters that
    /// received no gradient map to zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .borrow()
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(&self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.borrow().len() {
            return Err(Error::NotOnTape);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Number of recorded values (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records the result of a primitive. The backward rule is kept only if
    /// some input participates in differentiation.
    pub fn record<B: Backward + 'static>(
        &self,
        inputs: &[Var],
        output: Tensor,
        op: B,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !output.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            value: output,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
        }))
    }

    /// Accumulates d`loss`/d`leaf` into every gradient leaf reachable from
    /// `loss`. Gradients add up across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(loss.id, vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending.remove(&id) else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            match &node.op {
                None => {
                    let mut grads = self.grads.borrow_mut();
                    match grads.get_mut(&id) {
                        Some(acc) => *acc = acc.zip_map(&g, |a, b| a + b)?,
                        None => {
                            grads.insert(id, g);
                        }
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|&i| &nodes[i].value).collect();
                    let input_grads = op.backward(&g, &inputs, &node.value);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                    for (&input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !nodes[input].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.shape(), nodes[input].value.shape(), "{}", op.name());
                        match pending.get_mut(&input) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(ig.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                pending.insert(input, ig.to_vec());
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.grads.borrow().get(&v.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[3.0, -1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let loss = tape.sum(tape.mul(x, x).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::NotOnTape)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let c = tape.constant(vec1(&[5.0, 7.0]));
        let loss = tape.sum(tape.mul(x, c).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 7.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[3.0]));
        let y = tape.scale(x, 2.0).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(tape.sum(z).unwrap()).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    }
}
