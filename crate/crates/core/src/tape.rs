//! Reverse-mode differentiation over a recorded computation.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::attention::{kernel, ChannelPlan};
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::ops::{self, Broadcast};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBcast(Var, Var, Broadcast),
    MulBcast(Var, Var, Broadcast),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    AvgPool2(Var),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat0(Var, Var),
    Repeat0(Var, usize),
    TemporalShift(Var),
    Stm {
        q: Var,
        k: Var,
        v: Var,
        plan: ChannelPlan,
        probs: Tensor,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    marked: bool,
}

/// Records one computation for a single backward pass.
///
/// Values are never mutated after recording. A tape belongs to one thread;
/// parallel workers each build their own.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every marked input.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
    unreachable: Vec<Var>,
}

impl Gradients {
    /// Gradient for a marked input; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads.contains_key(&var) && !self.unreachable.contains(&var)
    }

    pub fn unreachable(&self) -> &[Var] {
        &self.unreachable
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            marked: false,
        });
        Var(nodes.len() - 1)
    }

    /// Records an input whose gradient `backward` reports.
    pub fn input(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            marked: true,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn val(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("backward: loss is not on this tape"))?;
        if !root.value.is_scalar() {
            return Err(Error::InvalidShape {
                shape: root.value.shape().to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), 1.0)?);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            for (var, contrib) in node_backward(&nodes, node, &g) {
                accumulate(&mut grads[var.0], contrib);
            }
            if node.marked {
                grads[id] = Some(g);
            }
        }
        let mut out = HashMap::new();
        let mut unreachable = Vec::new();
        for (id, node) in nodes.iter().enumerate().filter(|(_, n)| n.marked) {
            let var = Var(id);
            match grads.get_mut(id).and_then(Option::take) {
                Some(g) => {
                    out.insert(var, g);
                }
                None => {
                    unreachable.push(var);
                    out.insert(var, Tensor::zeros(node.value.shape().to_vec())?);
                }
            }
        }
        Ok(Gradients {
            grads: out,
            unreachable,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    *slot = Some(match slot.take() {
        None => contrib,
        Some(prev) => prev
            .zip_map(&contrib, |a, b| a + b)
            .expect("gradient shapes agree"),
    });
}

fn node_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (ga, gb) = ops::matmul_backward(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |x, y| x * y).unwrap()),
            (*b, g.zip_map(val(*a), |x, y| x * y).unwrap()),
        ],
        Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
        Op::AddBcast(x, y, mode) => {
            vec![(*x, g.clone()), (*y, mode.reduce(g, val(*y).shape()))]
        }
        Op::MulBcast(x, y, mode) => {
            let gx = ops::broadcast_zip(g, val(*y), *mode, |a, b| a * b).unwrap();
            let prod = g.zip_map(val(*x), |a, b| a * b).unwrap();
            vec![(*x, gx), (*y, mode.reduce(&prod, val(*y).shape()))]
        }
        Op::Sigmoid(x) => {
            // s·(1−s) rounds to zero once s reaches 1.0; σ(x)·σ(−x) does not.
            let gx = g
                .zip_map(val(*x), |gi, xi| gi * ops::sigmoid(xi) * ops::sigmoid(-xi))
                .unwrap();
            vec![(*x, gx)]
        }
        Op::Gelu(x) => {
            let gx = g
                .zip_map(val(*x), |gi, xi| gi * ops::gelu_grad(xi))
                .unwrap();
            vec![(*x, gx)]
        }
        Op::LayerNorm { x, inv_std } => {
            vec![(*x, ops::layer_norm_backward(&node.value, inv_std, g))]
        }
        Op::Conv3d { x, kernel, bias } => {
            let (gx, gk, gb) = ops::conv3d_backward(val(*x), val(*kernel), g);
            let mut out = vec![(*x, gx), (*kernel, gk)];
            if let Some(b) = bias {
                out.push((*b, gb));
            }
            out
        }
        Op::AvgPool2(x) => vec![(*x, ops::avg_pool2_backward(val(*x).shape(), g))],
        Op::MeanAxis(x, axis) => {
            vec![(*x, ops::mean_axis_backward(val(*x).shape(), *axis, g))]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec()).unwrap())],
        Op::Permute(x, axes) => {
            let inv = ops::inverse_permutation(axes);
            vec![(*x, ops::permute(g, &inv).unwrap())]
        }
        Op::Concat0(a, b) => {
            let split = val(*a).len();
            let ga = Tensor::from_parts(val(*a).shape().to_vec(), g.data()[..split].to_vec());
            let gb = Tensor::from_parts(val(*b).shape().to_vec(), g.data()[split..].to_vec());
            vec![(*a, ga), (*b, gb)]
        }
        Op::Repeat0(x, times) => vec![(*x, ops::repeat0_backward(val(*x).shape(), *times, g))],
        Op::TemporalShift(x) => vec![(*x, ops::temporal_shift_adjoint(g))],
        Op::Stm {
            q,
            k,
            v,
            plan,
            probs,
        } => {
            let (gq, gk, gv) = kernel::stm_backward(val(*q), val(*k), val(*v), plan, probs, g);
            vec![(*q, gq), (*k, gk), (*v, gv)]
        }
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => {
            let gs = g.data()[0];
            let mut d = probs.to_vec();
            d[*target] -= 1.0;
            d.iter_mut().for_each(|x| *x *= gs);
            vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), d))]
        }
        Op::Sum(x) => {
            let gs = g.data()[0];
            vec![(*x, Tensor::full(val(*x).shape().to_vec(), gs).unwrap())]
        }
    }
}

impl Backend for GradTape {
    type Value = Var;

    /// Records a value without reporting its gradient.
    fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn value(&self, v: &Var) -> Tensor {
        self.val(*v)
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::matmul(&self.val(*a), &self.val(*b))?;
        Ok(self.push(out, Op::MatMul(*a, *b)))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = crate::Eval.add(&self.val(*a), &self.val(*b))?;
        Ok(self.push(out, Op::Add(*a, *b)))
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = crate::Eval.sub(&self.val(*a), &self.val(*b))?;
        Ok(self.push(out, Op::Sub(*a, *b)))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = crate::Eval.mul(&self.val(*a), &self.val(*b))?;
        Ok(self.push(out, Op::Mul(*a, *b)))
    }

    fn scale(&self, a: &Var, factor: f64) -> Var {
        let out = self.val(*a).map(|x| x * factor);
        self.push(out, Op::Scale(*a, factor))
    }

    fn add_bcast(&self, x: &Var, y: &Var, mode: Broadcast) -> Result<Var> {
        let out = ops::broadcast_zip(&self.val(*x), &self.val(*y), mode, |a, b| a + b)?;
        Ok(self.push(out, Op::AddBcast(*x, *y, mode)))
    }

    fn mul_bcast(&self, x: &Var, y: &Var, mode: Broadcast) -> Result<Var> {
        let out = ops::broadcast_zip(&self.val(*x), &self.val(*y), mode, |a, b| a * b)?;
        Ok(self.push(out, Op::MulBcast(*x, *y, mode)))
    }

    fn sigmoid(&self, x: &Var) -> Var {
        let out = self.val(*x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(*x))
    }

    fn gelu(&self, x: &Var) -> Var {
        let out = self.val(*x).map(ops::gelu);
        self.push(out, Op::Gelu(*x))
    }

    fn layer_norm(&self, x: &Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = ops::layer_norm_with_stats(&self.val(*x), eps)?;
        Ok(self.push(out, Op::LayerNorm { x: *x, inv_std }))
    }

    fn conv3d(&self, x: &Var, kernel: &Var, bias: Option<&Var>) -> Result<Var> {
        let b = bias.map(|b| self.val(*b));
        let out = ops::conv3d(&self.val(*x), &self.val(*kernel), b.as_ref())?;
        Ok(self.push(
            out,
            Op::Conv3d {
                x: *x,
                kernel: *kernel,
                bias: bias.copied(),
            },
        ))
    }

    fn avg_pool2(&self, x: &Var) -> Result<Var> {
        let out = ops::avg_pool2(&self.val(*x))?;
        Ok(self.push(out, Op::AvgPool2(*x)))
    }

    fn mean_axis(&self, x: &Var, axis: usize) -> Result<Var> {
        let out = ops::mean_axis(&self.val(*x), axis)?;
        Ok(self.push(out, Op::MeanAxis(*x, axis)))
    }

    fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(*x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(*x)))
    }

    fn permute(&self, x: &Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(&self.val(*x), axes)?;
        Ok(self.push(out, Op::Permute(*x, axes.to_vec())))
    }

    fn concat0(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::concat0(&self.val(*a), &self.val(*b))?;
        Ok(self.push(out, Op::Concat0(*a, *b)))
    }

    fn repeat0(&self, x: &Var, times: usize) -> Result<Var> {
        let out = ops::repeat0(&self.val(*x), times)?;
        Ok(self.push(out, Op::Repeat0(*x, times)))
    }

    fn temporal_shift(&self, x: &Var) -> Result<Var> {
        let out = ops::temporal_shift(&self.val(*x))?;
        Ok(self.push(out, Op::TemporalShift(*x)))
    }

    fn stm_attention(&self, q: &Var, k: &Var, v: &Var, plan: &ChannelPlan) -> Result<Var> {
        let (y, probs) = kernel::stm_forward(&self.val(*q), &self.val(*k), &self.val(*v), plan)?;
        Ok(self.push(
            y,
            Op::Stm {
                q: *q,
                k: *k,
                v: *v,
                plan: plan.clone(),
                probs,
            },
        ))
    }

    fn cross_entropy(&self, logits: &Var, target: usize) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(&self.val(*logits), target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: *logits,
                target,
                probs,
            },
        ))
    }

    fn sum(&self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(*x).sum());
        self.push(out, Op::Sum(*x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = GradTape::new();
        let x = tape.input(Tensor::from_fn(vec![2, 3], |i| i as f64).unwrap());
        let loss = tape.sum(&x);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let tape = GradTape::new();
        let data = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let x = tape.input(data.clone());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.scale(&tape.sum(&sq), 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &data);
    }

    #[test]
    fn unreachable_input_is_flagged_with_zero_gradient() {
        let tape = GradTape::new();
        let x = tape.input(Tensor::full(vec![2], 1.0).unwrap());
        let y = tape.input(Tensor::full(vec![3], 1.0).unwrap());
        let loss = tape.sum(&x);
        let g = tape.backward(loss).unwrap();
        assert!(g.is_reachable(x));
        assert!(!g.is_reachable(y));
        assert_eq!(g.unreachable(), &[y]);
        assert!(g.wrt(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = GradTape::new();
        let x = tape.input(Tensor::full(vec![2], 1.0).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = GradTape::new();
        let x = tape.input(Tensor::full(vec![2], 3.0).unwrap());
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0]);
    }
}
