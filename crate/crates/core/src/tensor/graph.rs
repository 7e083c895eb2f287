//! Define-by-run reverse-mode differentiation.
//!
//! Every op executed through a [`Var`] appends one node to its [`Graph`];
//! [`Graph::backward`] walks the node list once in reverse. Node values are
//! never mutated after they are recorded.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{contract, dim_err, Result};
use crate::scalar::Scalar;

pub(crate) struct BackwardArgs<'a, T: Scalar> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only record of executed ops. Confined to one thread.
pub struct Graph<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    counters: RefCell<BTreeMap<&'static str, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f64> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar w.r.t. every node, indexed by [`Var`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zero when `v` has no path to the loss.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn try_get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), counters: RefCell::new(BTreeMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&self, mut value: Tensor<T>) -> Var<'_, T> {
        value.requires_grad = true;
        self.push_node(value, vec![], None, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, mut value: Tensor<T>) -> Var<'_, T> {
        value.requires_grad = false;
        self.push_node(value, vec![], None, false)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = value.requires_grad;
        self.push_node(value, vec![], None, rg)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Records an op. The node requires grad iff any parent does.
    pub(crate) fn push_op(
        &self,
        tag: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        *self.counters.borrow_mut().entry(tag).or_insert(0) += 1;
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let rg = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, ids, if rg { Some(backward) } else { None }, rg)
    }

    /// How many ops carrying `tag` have been recorded.
    pub fn op_count(&self, tag: &str) -> usize {
        self.counters.borrow().get(tag).copied().unwrap_or(0)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let args = BackwardArgs {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let pgrads = bw(&args);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign_tensor(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Binary elementwise op tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Unary elementwise op tags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Max0,
    Pow(f64),
    Scale(f64),
}

/// Reduction op tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    L2Norm,
}

#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let mut t = self.value().clone();
        t.requires_grad = false;
        t
    }

    pub fn binary(self, op: BinaryOp, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            match op {
                BinaryOp::Add => kernels::broadcast_binary(&a, &b, |x, y| x + y)?,
                BinaryOp::Sub => kernels::broadcast_binary(&a, &b, |x, y| x - y)?,
                BinaryOp::Mul => kernels::broadcast_binary(&a, &b, |x, y| x * y)?,
                BinaryOp::Div => kernels::broadcast_binary(&a, &b, |x, y| x / y)?,
            }
        };
        let tag = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        Ok(self.graph.push_op(
            tag,
            out,
            &[self, other],
            Box::new(move |args| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let full = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => kernels::broadcast_binary(g, b, |x, y| x * y).unwrap(),
                        BinaryOp::Div => kernels::broadcast_binary(g, b, |x, y| x / y).unwrap(),
                    };
                    kernels::reduce_to(&full, a.shape())
                });
                let gb = args.needs[1].then(|| {
                    let full = match op {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Sub => g.map(|x| -x),
                        BinaryOp::Mul => kernels::broadcast_binary(g, a, |x, y| x * y).unwrap(),
                        // d(a/b)/db = -a/b² = -out/b
                        BinaryOp::Div => {
                            let t = kernels::broadcast_binary(g, args.out, |x, y| x * y).unwrap();
                            kernels::broadcast_binary(&t, b, |x, y| -x / y).unwrap()
                        }
                    };
                    kernels::reduce_to(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Mul, other)
    }

    /// Division by zero propagates IEEE inf/nan.
    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn unary(self, op: UnaryOp) -> Var<'g, T> {
        let out = {
            let a = self.value();
            match op {
                UnaryOp::Max0 => a.map(|x| x.max(T::zero())),
                UnaryOp::Pow(p) => {
                    let p = T::of(p);
                    a.map(|x| x.powf(p))
                }
                UnaryOp::Scale(c) => a.scale(T::of(c)),
            }
        };
        let tag = match op {
            UnaryOp::Max0 => "max0",
            UnaryOp::Pow(_) => "pow",
            UnaryOp::Scale(_) => "scale",
        };
        self.graph.push_op(
            tag,
            out,
            &[self],
            Box::new(move |args| {
                let (a, g) = (args.inputs[0], args.grad);
                let ga = match op {
                    UnaryOp::Max0 => kernels::broadcast_binary(g, a, |gv, x| {
                        if x > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryOp::Pow(p) => {
                        let (p, pm1) = (T::of(p), T::of(p - 1.0));
                        kernels::broadcast_binary(g, a, |gv, x| gv * p * x.powf(pm1))
                    }
                    UnaryOp::Scale(c) => Ok(g.scale(T::of(c))),
                };
                vec![Some(ga.unwrap())]
            }),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(UnaryOp::Max0)
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        self.unary(UnaryOp::Pow(p))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let out = self.value().map(|x| x + T::of(c));
        self.graph.push_op("add_scalar", out, &[self], Box::new(|args| vec![Some(args.grad.clone())]))
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(self, c: &Tensor<T>) -> Result<Var<'g, T>> {
        let k = self.graph.constant(c.clone());
        self.mul(k)
    }

    pub fn reduce(self, op: ReduceOp, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        match op {
            ReduceOp::Sum => self.sum(axis, keepdim),
            ReduceOp::Max => self.max(axis, keepdim),
            ReduceOp::L2Norm => self.l2norm(axis, keepdim),
        }
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let in_shape = self.shape();
        let out = kernels::sum_axis(&self.value(), axis, keepdim)?;
        Ok(self.graph.push_op(
            "sum",
            out,
            &[self],
            Box::new(move |args| {
                let mut kshape = in_shape.clone();
                kshape[axis] = 1;
                let g = args.grad.reshape(&kshape).unwrap();
                let ones = Tensor::ones(&in_shape);
                vec![Some(kernels::broadcast_binary(&ones, &g, |_, y| y).unwrap())]
            }),
        ))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let in_shape = self.shape();
        let out = Tensor::scalar(self.value().sum_all());
        self.graph.push_op(
            "sum_all",
            out,
            &[self],
            Box::new(move |args| vec![Some(Tensor::full(&in_shape, args.grad.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Max along `axis`; the gradient goes to the first maximal entry.
    pub fn max(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let in_shape = self.shape();
        let (out, arg) = kernels::max_axis(&self.value(), axis, keepdim)?;
        Ok(self.graph.push_op(
            "max",
            out,
            &[self],
            Box::new(move |args| {
                let mut g = Tensor::zeros(&in_shape);
                for (&src, &gv) in arg.iter().zip(args.grad.data()) {
                    g.data_mut()[src] += gv;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `sqrt(Σ x²)` along `axis`; gradient is zero where the norm vanishes.
    pub fn l2norm(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let in_shape = self.shape();
        let sq = self.value().map(|x| x * x);
        let out = kernels::sum_axis(&sq, axis, keepdim)?.map(|s| s.sqrt());
        Ok(self.graph.push_op(
            "l2norm",
            out,
            &[self],
            Box::new(move |args| {
                let mut kshape = in_shape.clone();
                kshape[axis] = 1;
                let n = args.out.reshape(&kshape).unwrap();
                let g = args.grad.reshape(&kshape).unwrap();
                let scale = kernels::broadcast_binary(&g, &n, |gv, nv| {
                    if nv > T::zero() {
                        gv / nv
                    } else {
                        T::zero()
                    }
                })
                .unwrap();
                vec![Some(kernels::broadcast_binary(args.inputs[0], &scale, |x, s| x * s).unwrap())]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.graph.push_op(
            "matmul",
            out,
            &[self, other],
            Box::new(|args| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let bt = kernels::transpose_last2(b).unwrap();
                    let full = kernels::matmul(g, &bt).unwrap();
                    kernels::reduce_to(&full, a.shape())
                });
                let gb = args.needs[1].then(|| {
                    let at = kernels::transpose_last2(a).unwrap();
                    let full = kernels::matmul(&at, g).unwrap();
                    kernels::reduce_to(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let in_shape = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push_op(
            "reshape",
            out,
            &[self],
            Box::new(move |args| vec![Some(args.grad.reshape(&in_shape).unwrap())]),
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let out = kernels::permute(&self.value(), axes)?;
        let inv = kernels::inverse_perm(axes);
        Ok(self.graph.push_op(
            "permute",
            out,
            &[self],
            Box::new(move |args| vec![Some(kernels::permute(args.grad, &inv).unwrap())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(dim_err("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Grouped 2-D cross-correlation. `weight` is `[Cout, Cin/groups, k, k]`;
    /// `groups == Cin` is a depthwise convolution.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'g, T>> {
        let kernel = *weight.value().shape().get(2).ok_or_else(|| dim_err("conv2d weight rank"))?;
        let geom = ConvGeometry::new(self.value().shape(), kernel, stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(&self.value(), &weight.value(), &geom, groups)?;
        Ok(self.graph.push_op(
            "conv2d",
            out,
            &[self, weight],
            Box::new(move |args| {
                let (dx, dw) = kernels::conv2d_backward(
                    args.grad,
                    args.inputs[1],
                    &cols,
                    &geom,
                    groups,
                    args.needs[0],
                );
                let dx = dx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d));
                let dw = Tensor::from_parts(args.inputs[1].shape().to_vec(), dw);
                vec![dx, Some(dw)]
            }),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let out = softmax_last(&self.value())?;
        Ok(self.graph.push_op(
            "softmax",
            out,
            &[self],
            Box::new(|args| {
                let (p, g) = (args.out, args.grad);
                let n = *p.shape().last().unwrap();
                let mut dz = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in
                    p.data().chunks(n).zip(g.data().chunks(n)).zip(dz.chunks_mut(n))
                {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
                        *d = pv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_parts(p.shape().to_vec(), dz))]
            }),
        ))
    }
}

pub fn softmax_last<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *z.shape().last().ok_or_else(|| dim_err("softmax on rank-0 tensor"))?;
    let mut out = vec![T::zero(); z.len()];
    for (zr, or) in z.data().chunks(n).zip(out.chunks_mut(n)) {
        let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &x) in or.iter_mut().zip(zr) {
            *o = (x - m).exp();
            s += *o;
        }
        for o in or.iter_mut() {
            *o /= s;
        }
    }
    Ok(Tensor::from_parts(z.shape().to_vec(), out))
}
