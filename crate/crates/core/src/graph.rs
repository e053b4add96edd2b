//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its output value and, when
//! any input needs a gradient, a backward rule closing over whatever it saved.
//! Nodes are only ever appended, so index order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::spectral::Spectrum;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Either a real feature map or a complex spectrum.
#[derive(Clone, Debug, PartialEq)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(Spectrum<T>),
}

impl<T: Scalar> Value<T> {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(s) => s.shape(),
        }
    }

    pub fn as_real(&self) -> Result<&Tensor<T>> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => shape_err("expected a real tensor, found a spectrum"),
        }
    }

    pub fn as_complex(&self) -> Result<&Spectrum<T>> {
        match self {
            Value::Complex(s) => Ok(s),
            Value::Real(_) => shape_err("expected a spectrum, found a real tensor"),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Value::Real(t) => Value::Real(Tensor::zeros(t.shape())),
            Value::Complex(s) => Value::Complex(Spectrum::zeros(s.shape())),
        }
    }

    fn accumulate(&mut self, other: Value<T>) -> Result<()> {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => {
                if a.shape() != b.shape() {
                    return shape_err(format!("gradient shape {} vs {}", a.shape(), b.shape()));
                }
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += *y;
                }
            }
            (Value::Complex(a), Value::Complex(b)) => {
                if a.shape() != b.shape() {
                    return shape_err(format!("gradient shape {} vs {}", a.shape(), b.shape()));
                }
                let (are, aim) = a.parts_mut();
                for (x, y) in are.iter_mut().zip(b.re()) {
                    *x += *y;
                }
                for (x, y) in aim.iter_mut().zip(b.im()) {
                    *x += *y;
                }
            }
            _ => return shape_err("gradient kind does not match value kind"),
        }
        Ok(())
    }
}

/// Backward rule: `(output gradient, input values, output value) -> input gradients`.
///
/// The returned vector has one slot per input; `None` means no contribution.
pub type BackwardFn<T> =
    Box<dyn Fn(&Value<T>, &[&Value<T>], &Value<T>) -> Result<Vec<Option<Value<T>>>> + Send>;

struct Recorded<T> {
    name: &'static str,
    inputs: Vec<Var>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    value: Value<T>,
    grad: Option<Value<T>>,
    requires_grad: bool,
    op: Option<Recorded<T>>,
    op_name: &'static str,
}

/// Single-use tape for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Value<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: None, op_name: "leaf" });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(Value::Real(t), rg)
    }

    /// Inserts a learnable tensor.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Value::Real(t.with_requires_grad(true)), true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Value::Real(t.with_requires_grad(false)), false)
    }

    pub fn spectrum_leaf(&mut self, s: Spectrum<T>, requires_grad: bool) -> Var {
        self.push_leaf(Value::Complex(s), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    pub fn try_tensor(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("unknown variable {v:?}")))?
            .value
            .as_real()
    }

    /// Real value of `v`. Panics if `v` is a spectrum.
    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        self.try_tensor(v).expect("variable holds a real tensor")
    }

    pub fn try_spectrum(&self, v: Var) -> Result<&Spectrum<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("unknown variable {v:?}")))?
            .value
            .as_complex()
    }

    pub fn spectrum(&self, v: Var) -> &Spectrum<T> {
        self.try_spectrum(v).expect("variable holds a spectrum")
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v` (`"leaf"` for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op_name
    }

    /// Accumulated gradient of `v` after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Value<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient of a real variable as a tensor.
    pub fn grad_tensor(&self, v: Var) -> Option<&Tensor<T>> {
        match self.nodes[v.0].grad.as_ref() {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    /// Appends an operation node. This is the extension point every
    /// differentiable primitive goes through.
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Value<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded { name, inputs: inputs.to_vec(), backward });
        self.nodes.push(Node { value: output, grad: None, requires_grad, op, op_name: name });
        Var(self.nodes.len() - 1)
    }

    pub fn record_real(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        self.record(name, inputs, Value::Real(output), backward)
    }

    /// Propagates d(loss)/d(·) to every differentiable node.
    ///
    /// `loss` must be a real `(1, 1, 1, 1)` tensor. A graph can be
    /// differentiated once; afterwards every differentiable leaf carries a
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        let loss_shape = match &self.nodes.get(loss.0).map(|n| &n.value) {
            Some(Value::Real(t)) => t.shape(),
            Some(Value::Complex(_)) => {
                return Err(Error::Contract("loss must be a real scalar, found a spectrum".into()))
            }
            None => return Err(Error::Contract(format!("unknown loss variable {loss:?}"))),
        };
        if !loss_shape.is_scalar() {
            return Err(Error::Contract(format!("loss must have shape (1, 1, 1, 1), found {loss_shape}")));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Value::Real(Tensor::scalar(T::one())));

        for idx in (0..=loss.0).rev() {
            let Some(op) = self.nodes[idx].op.take() else { continue };
            let Some(grad_out) = self.nodes[idx].grad.take() else {
                continue;
            };
            let grads = {
                let inputs: Vec<&Value<T>> = op.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                (op.backward)(&grad_out, &inputs, &self.nodes[idx].value)
                    .map_err(|e| Error::Contract(format!("backward of `{}` failed: {e}", op.name)))?
            };
            self.nodes[idx].grad = Some(grad_out);
            if grads.len() != op.inputs.len() {
                return Err(Error::Contract(format!(
                    "backward of `{}` returned {} gradients for {} inputs",
                    op.name,
                    grads.len(),
                    op.inputs.len()
                )));
            }
            for (input, g) in op.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                if g.shape() != node.value.shape() {
                    return Err(Error::Contract(format!(
                        "backward of `{}` produced gradient {} for input of shape {}",
                        op.name,
                        g.shape(),
                        node.value.shape()
                    )));
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.accumulate(g)?,
                    None => node.grad = Some(g),
                }
            }
        }

        for node in self.nodes.iter_mut().filter(|n| n.requires_grad && n.op_name == "leaf") {
            if node.grad.is_none() {
                node.grad = Some(node.value.zeros_like());
            }
            if let (Value::Real(t), Some(Value::Real(g))) = (&mut node.value, &node.grad) {
                t.set_grad(Some(g.data().to_vec()))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_then_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_values((1, 1, 1, 2), vec![1.0, -2.0]).unwrap());
        let y = g.scale(x, 3.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.tensor(x).grad().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.tensor(x).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full((1, 1, 1, 3), 1.0));
        let unused = g.param(Tensor::full((1, 1, 2, 2), 1.0));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.tensor(unused).grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full((1, 1, 1, 3), 1.0));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn constants_record_no_backward() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        let y = g.scale(c, 2.0);
        assert!(!g.requires_grad(y));
        assert_eq!(g.op_name(y), "scale");
    }

    #[test]
    fn accumulation_matches_separate_passes() {
        let x0 = Tensor::from_values((1, 1, 1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let f = |g: &mut Graph<f64>, x: Var| {
            let s = g.mul(x, x).unwrap();
            g.sum(s)
        };
        let h = |g: &mut Graph<f64>, x: Var| {
            let s = g.sigmoid(x);
            g.sum(s)
        };
        let run = |both: u8| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let l = match both {
                0 => f(&mut g, x),
                1 => h(&mut g, x),
                _ => {
                    let a = f(&mut g, x);
                    let b = h(&mut g, x);
                    g.add(a, b).unwrap()
                }
            };
            g.backward(l).unwrap();
            g.tensor(x).grad().unwrap().to_vec()
        };
        let (a, b, ab) = (run(0), run(1), run(2));
        for i in 0..3 {
            assert!((a[i] + b[i] - ab[i]).abs() < 1e-12);
        }
    }
}
