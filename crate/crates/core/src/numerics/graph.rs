//! Reverse-mode automatic differentiation on a define-by-run graph.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so `backward` is a single reverse sweep. Custom-gradient nodes
//! carry an arbitrary backward rule; the straight-through quantizer
//! gradients are built on top of them.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::tensor::{sigmoid, Tensor};

type BackwardRule = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

struct NodeRec {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardRule>,
    requires_grad: bool,
    needs_grad: bool,
}

/// Computation graph; build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<NodeRec>>,
}

/// Cheap handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Node<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients keyed by node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: Node<'_>) -> Option<&Tensor> {
        self.grads.get(node.id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardRule>,
        requires_grad: bool,
    ) -> Node<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = requires_grad || parents.iter().any(|&p| nodes[p].needs_grad);
        // Backward rules for subtrees that no gradient will reach are dead
        // weight; drop them eagerly.
        let backward = if needs_grad { backward } else { None };
        nodes.push(NodeRec {
            value,
            parents,
            backward,
            requires_grad,
            needs_grad,
        });
        Node {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input: participates in backward.
    pub fn leaf(&self, value: Tensor) -> Node<'_> {
        self.push(value, vec![], None, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor) -> Node<'_> {
        self.push(value, vec![], None, false)
    }

    /// Node with caller-supplied value and backward rule. The rule receives
    /// the output gradient and must return one gradient per parent, with
    /// matching shapes (checked during backward).
    pub fn custom<F>(&self, value: Tensor, parents: &[Node<'_>], rule: F) -> Node<'_>
    where
        F: Fn(&Tensor) -> Result<Vec<Tensor>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(rule)), false)
    }

    /// Reverse sweep from a scalar root. Every reachable leaf with
    /// requires-grad receives a gradient; gradients accumulate additively
    /// across multiple uses.
    pub fn backward(&self, root: Node<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape().to_vec()));

        for id in (0..=root.id).rev() {
            let rec = &nodes[id];
            if !rec.needs_grad || rec.parents.is_empty() {
                continue;
            }
            let Some(out_grad) = grads[id].clone() else {
                continue;
            };
            let rule = rec
                .backward
                .as_ref()
                .expect("interior node with parents must carry a backward rule");
            let parent_grads = rule(&out_grad)?;
            if parent_grads.len() != rec.parents.len() {
                return Err(Error::Shape(format!(
                    "backward rule returned {} gradients for {} parents",
                    parent_grads.len(),
                    rec.parents.len()
                )));
            }
            for (&pid, pg) in rec.parents.iter().zip(parent_grads) {
                if !nodes[pid].needs_grad {
                    continue;
                }
                if pg.shape() != nodes[pid].value.shape() {
                    return Err(Error::Shape(format!(
                        "backward rule produced gradient of shape {:?} for parent of shape {:?}",
                        pg.shape(),
                        nodes[pid].value.shape()
                    )));
                }
                grads[pid] = Some(match grads[pid].take() {
                    Some(existing) => existing.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sum a full-shape gradient down to `[1]` when the operand was a broadcast
/// scalar; pass it through otherwise.
fn reduce_to(shape: &[usize], numel: usize, grad: Tensor) -> Result<Tensor> {
    if grad.numel() == numel {
        // Same element count; reshape covers `[1,1]` vs `[1]` style cases.
        grad.reshape(shape.to_vec())
    } else {
        debug_assert_eq!(numel, 1);
        grad.sum(None)?.reshape(shape.to_vec())
    }
}

#[allow(clippy::should_implement_trait)] // op-named methods mirror the tensor API
impl<'g> Node<'g> {
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Graph this node lives in; lets other modules attach custom nodes.
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(self) -> Result<Gradients> {
        self.graph.backward(self)
    }

    fn binary(
        self,
        other: Node<'g>,
        value: Tensor,
        rule: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<(Tensor, Tensor)> + 'static,
    ) -> Result<Node<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, na) = (a.shape().to_vec(), a.numel());
        let (sb, nb) = (b.shape().to_vec(), b.numel());
        let node = self.graph.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let (ga, gb) = rule(g, &a, &b)?;
                Ok(vec![
                    reduce_to(&sa, na, ga)?,
                    reduce_to(&sb, nb, gb)?,
                ])
            })),
            false,
        );
        Ok(node)
    }

    pub fn add(self, other: Node<'g>) -> Result<Node<'g>> {
        let value = self.value().add(&other.value())?;
        self.binary(other, value, |g, _, _| Ok((g.clone(), g.clone())))
    }

    pub fn sub(self, other: Node<'g>) -> Result<Node<'g>> {
        let value = self.value().sub(&other.value())?;
        self.binary(other, value, |g, _, _| Ok((g.clone(), g.neg())))
    }

    pub fn mul(self, other: Node<'g>) -> Result<Node<'g>> {
        let value = self.value().mul(&other.value())?;
        self.binary(other, value, |g, a, b| Ok((g.mul(b)?, g.mul(a)?)))
    }

    pub fn div(self, other: Node<'g>) -> Result<Node<'g>> {
        let value = self.value().div(&other.value())?;
        self.binary(other, value, |g, a, b| {
            let ga = g.div(b)?;
            let gb = g.mul(a)?.div(&b.mul(b)?)?.neg();
            Ok((ga, gb))
        })
    }

    fn unary(
        self,
        value: Tensor,
        rule: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Node<'g> {
        self.graph.push(
            value,
            vec![self.id],
            Some(Box::new(move |g| Ok(vec![rule(g)?]))),
            false,
        )
    }

    pub fn neg(self) -> Node<'g> {
        let value = self.value().neg();
        self.unary(value, |g| Ok(g.neg()))
    }

    pub fn exp(self) -> Result<Node<'g>> {
        let value = self.value().exp()?;
        let out = value.clone();
        Ok(self.unary(value, move |g| g.mul(&out)))
    }

    pub fn log(self) -> Result<Node<'g>> {
        let input = self.value();
        let value = input.log()?;
        Ok(self.unary(value, move |g| g.div(&input)))
    }

    pub fn sqrt(self) -> Result<Node<'g>> {
        let value = self.value().sqrt()?;
        let out = value.clone();
        Ok(self.unary(value, move |g| g.mul(&out.map(|y| 0.5 / y))))
    }

    /// Smooth activation x * sigmoid(x).
    pub fn silu(self) -> Node<'g> {
        let input = self.value();
        let value = input.silu();
        self.unary(value, move |g| {
            let d = input.map(|x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            });
            g.mul(&d)
        })
    }

    pub fn matmul(self, other: Node<'g>) -> Result<Node<'g>> {
        let value = self.value().matmul(&other.value())?;
        let a = self.value();
        let b = other.value();
        let node = self.graph.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                Ok(vec![g.matmul_nt(&b)?, a.matmul_tn(g)?])
            })),
            false,
        );
        Ok(node)
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Node<'g>> {
        let input_shape = self.shape();
        let value = self.value().sum(axis)?;
        Ok(self.unary(value, move |g| {
            expand_reduced(g, &input_shape, axis, 1.0)
        }))
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Node<'g>> {
        let input_shape = self.shape();
        let k = match axis {
            None => self.value().numel(),
            Some(ax) => *input_shape
                .get(ax)
                .ok_or_else(|| Error::Shape(format!("axis {ax} out of range")))?,
        } as f64;
        let value = self.value().mean(axis)?;
        Ok(self.unary(value, move |g| {
            expand_reduced(g, &input_shape, axis, 1.0 / k)
        }))
    }

    /// Max reduction; the gradient routes to the argmax element, ties to the
    /// lowest index.
    pub fn max(self, axis: Option<usize>) -> Result<Node<'g>> {
        let input_shape = self.shape();
        let (value, args) = self.value().max_with_argmax(axis)?;
        Ok(self.unary(value, move |g| {
            let n: usize = input_shape.iter().product();
            let mut out = vec![0.0; n];
            for (slot, &flat) in args.iter().enumerate() {
                out[flat] += g.data()[slot];
            }
            Tensor::new(input_shape.clone(), out)
        }))
    }

    /// Row `i` of a 2-D node as a `[1, n]` node; the gradient scatters back
    /// into the source row.
    pub fn row(self, i: usize) -> Result<Node<'g>> {
        let input_shape = self.shape();
        let value = self.value().row(i)?;
        let n = value.numel();
        Ok(self.graph.custom(value, &[self], move |g| {
            let total: usize = input_shape.iter().product();
            let mut out = vec![0.0; total];
            out[i * n..(i + 1) * n].copy_from_slice(g.data());
            Ok(vec![Tensor::new(input_shape.clone(), out)?])
        }))
    }

    /// Flat element `i` as a `[1]` scalar node with scatter backward.
    pub fn elem(self, i: usize) -> Result<Node<'g>> {
        let input_shape = self.shape();
        let v = self.value();
        if i >= v.numel() {
            return Err(Error::Shape(format!("elem {i} out of range")));
        }
        let value = Tensor::scalar(v.data()[i]);
        Ok(self.graph.custom(value, &[self], move |g| {
            let total: usize = input_shape.iter().product();
            let mut out = vec![0.0; total];
            out[i] = g.item();
            Ok(vec![Tensor::new(input_shape.clone(), out)?])
        }))
    }
}

/// Broadcast a reduced gradient back over the reduced axis, scaled by `w`.
fn expand_reduced(
    g: &Tensor,
    input_shape: &[usize],
    axis: Option<usize>,
    w: f64,
) -> Result<Tensor> {
    let n: usize = input_shape.iter().product();
    match axis {
        None => {
            let gv = g.item() * w;
            Ok(Tensor::new(input_shape.to_vec(), vec![gv; n])?)
        }
        Some(ax) => {
            let outer: usize = input_shape[..ax].iter().product();
            let len = input_shape[ax];
            let inner: usize = input_shape[ax + 1..].iter().product();
            let mut out = vec![0.0; n];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[(o * len + l) * inner + i] = g.data()[o * inner + i] * w;
                    }
                }
            }
            Tensor::new(input_shape.to_vec(), out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum(None).unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[3.0, -1.0, 7.0]));
        let grads = x.sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_errors() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_on_reuse() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let once = x.sum(None).unwrap();
        let twice = x.add(x).unwrap().sum(None).unwrap();
        let g1 = once.backward().unwrap().get(x).unwrap().clone();
        let g2 = twice.backward().unwrap().get(x).unwrap().clone();
        assert_eq!(g2.data(), g1.scale(2.0).data());
    }

    #[test]
    fn max_routes_gradient_to_lowest_tied_index() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 3.0, 3.0]));
        let grads = x.max(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn custom_identity_and_zero_rules() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.5, -2.0]));
        let shape = x.shape();
        let ident = g.custom(x.value(), &[x], |gr| Ok(vec![gr.clone()]));
        let grads = ident.sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);

        let zero = g.custom(x.value(), &[x], move |_| {
            Ok(vec![Tensor::zeros(shape.clone())])
        });
        let grads = zero.sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn ste_round_node_passes_gradient_through() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[0.2, 1.7, -0.6]));
        let rounded = g.custom(x.value().map(f64::round), &[x], |gr| Ok(vec![gr.clone()]));
        assert_eq!(rounded.value().data(), &[0.0, 2.0, -1.0]);
        let grads = rounded.sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_inconsistent_custom_rule_errors_at_backward() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let bad = g.custom(x.value(), &[x], |_| Ok(vec![Tensor::scalar(1.0)]));
        assert!(bad.sum(None).unwrap().backward().is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let c = g.constant(Tensor::from_slice(&[5.0, 5.0]));
        let grads = x.mul(c).unwrap().sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn row_and_elem_scatter() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let r = x.row(1).unwrap();
        assert_eq!(r.value().data(), &[3.0, 4.0]);
        let grads = r.sum(None).unwrap().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);

        let e = x.elem(2).unwrap();
        assert_eq!(e.value().item(), 3.0);
        let grads = e.backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
