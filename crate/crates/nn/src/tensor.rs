//! Reverse-mode tape autograd over `f64` ndarrays.
//!
//! Every backward rule is itself expressed through `Tensor` ops, so gradients
//! are ordinary graph nodes and can be differentiated again. That second
//! derivative path is what the R1 gradient-penalty training step relies on.
//!
//! Shape mismatches are programmer errors and panic; fallible domain checks
//! live in the crates that build graphs out of these ops.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, Axis, IxDyn};

use crate::conv::{ConvGeom, ConvGeom3};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

pub(crate) struct Node {
    id: u64,
    value: ArrayD<f64>,
    op: Option<Op>,
    parents: Vec<Tensor>,
    requires_grad: bool,
}

/// Primitive ops. Each variant's backward produces per-parent gradient
/// contributions built from `Tensor` ops (never raw arrays), keeping the
/// graph differentiable to any order.
#[derive(Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Abs,
    Softplus,
    Exp,
    Ln,
    MatMul,
    Transpose,
    Reshape,
    Permute(Vec<usize>),
    Broadcast { from: Vec<usize> },
    SumAll,
    SumAxis(usize),
    Concat(usize),
    Slice { axis: usize, start: usize },
    PadEmbed { axis: usize, start: usize },
    Im2col2d(ConvGeom),
    Col2im2d(ConvGeom),
    Im2col3d(ConvGeom3),
    Col2im3d(ConvGeom3),
}

impl Tensor {
    fn from_op(value: ArrayD<f64>, op: Op, parents: Vec<Tensor>) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                op: Some(op),
                parents,
                requires_grad,
            }),
        }
    }

    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                op: None,
                parents: Vec::new(),
                requires_grad: false,
            }),
        }
    }

    pub fn leaf(value: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                op: None,
                parents: Vec::new(),
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.inner.value
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn len(&self) -> usize {
        self.inner.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.value.is_empty()
    }

    /// Scalar extraction; panics if the tensor is not 0-d or single-element.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        *self.inner.value.iter().next().expect("empty tensor")
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        Tensor::from_op(
            &self.inner.value + &rhs.inner.value,
            Op::Add,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        Tensor::from_op(
            &self.inner.value - &rhs.inner.value,
            Op::Sub,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        Tensor::from_op(
            &self.inner.value * &rhs.inner.value,
            Op::Mul,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        Tensor::from_op(
            &self.inner.value / &rhs.inner.value,
            Op::Div,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(-&self.inner.value, Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(&self.inner.value * c, Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(&self.inner.value + c, Op::AddScalar, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(
            self.inner.value.mapv(sigmoid_f),
            Op::Sigmoid,
            vec![self.clone()],
        )
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(
            self.inner.value.mapv(f64::tanh),
            Op::Tanh,
            vec![self.clone()],
        )
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        Tensor::from_op(
            self.inner.value.mapv(|x| if x >= 0.0 { x } else { alpha * x }),
            Op::LeakyRelu(alpha),
            vec![self.clone()],
        )
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(
            self.inner.value.mapv(f64::abs),
            Op::Abs,
            vec![self.clone()],
        )
    }

    /// ln(1 + e^x), evaluated in overflow-safe form.
    pub fn softplus(&self) -> Tensor {
        Tensor::from_op(
            self.inner.value.mapv(softplus_f),
            Op::Softplus,
            vec![self.clone()],
        )
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.inner.value.mapv(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.inner.value.mapv(f64::ln), Op::Ln, vec![self.clone()])
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ---- linear algebra / shape ----

    /// 2-d matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = as_2d(&self.inner.value);
        let b = as_2d(&rhs.inner.value);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims differ");
        let out = a.dot(&b);
        Tensor::from_op(out.into_dyn(), Op::MatMul, vec![self.clone(), rhs.clone()])
    }

    pub fn transpose(&self) -> Tensor {
        let a = as_2d(&self.inner.value);
        Tensor::from_op(
            a.t().to_owned().into_dyn(),
            Op::Transpose,
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape: element count mismatch");
        let flat: Vec<f64> = self.inner.value.iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape");
        Tensor::from_op(out, Op::Reshape, vec![self.clone()])
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape().len(), "permute: rank mismatch");
        let out = self
            .inner
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .to_owned();
        Tensor::from_op(out, Op::Permute(perm.to_vec()), vec![self.clone()])
    }

    /// Broadcast to `shape` following trailing-alignment rules (a source axis
    /// must equal the target axis or be 1; missing leading axes are added).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let from = self.shape().to_vec();
        assert!(from.len() <= shape.len(), "broadcast: rank grows only");
        for (i, &d) in from.iter().rev().enumerate() {
            let t = shape[shape.len() - 1 - i];
            assert!(d == t || d == 1, "broadcast: {from:?} -> {shape:?}");
        }
        let out = self
            .inner
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast")
            .to_owned();
        Tensor::from_op(out, Op::Broadcast { from }, vec![self.clone()])
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.inner.value.sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll,
            vec![self.clone()],
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let out = self.inner.value.sum_axis(Axis(axis));
        Tensor::from_op(out, Op::SumAxis(axis), vec![self.clone()])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.inner.value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        Tensor::from_op(out, Op::Concat(axis), parts.to_vec())
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let out = self
            .inner
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(out, Op::Slice { axis, start }, vec![self.clone()])
    }

    /// Embed into a zero tensor whose `axis` has size `total`, at offset
    /// `start`. Adjoint of `slice_axis`.
    pub fn pad_embed(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        assert!(start + len <= total, "pad_embed: slice out of range");
        shape[axis] = total;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
            .assign(&self.inner.value);
        Tensor::from_op(out, Op::PadEmbed { axis, start }, vec![self.clone()])
    }

    // ---- convolution building blocks ----

    /// [B,C,H,W] -> [C*kh*kw, B*Ho*Wo] patch matrix.
    pub fn im2col2d(&self, geom: &ConvGeom) -> Tensor {
        assert_eq!(self.shape(), &geom.in_shape()[..], "im2col2d: input shape");
        let out = crate::conv::im2col2d(&self.inner.value, geom);
        Tensor::from_op(out, Op::Im2col2d(geom.clone()), vec![self.clone()])
    }

    /// Adjoint of [`Tensor::im2col2d`]: scatter-add patches back to [B,C,H,W].
    pub fn col2im2d(&self, geom: &ConvGeom) -> Tensor {
        let out = crate::conv::col2im2d(&self.inner.value, geom);
        Tensor::from_op(out, Op::Col2im2d(geom.clone()), vec![self.clone()])
    }

    /// [B,C,D,H,W] -> [C*kd*kh*kw, B*Do*Ho*Wo] patch matrix.
    pub fn im2col3d(&self, geom: &ConvGeom3) -> Tensor {
        assert_eq!(self.shape(), &geom.in_shape()[..], "im2col3d: input shape");
        let out = crate::conv::im2col3d(&self.inner.value, geom);
        Tensor::from_op(out, Op::Im2col3d(geom.clone()), vec![self.clone()])
    }

    pub fn col2im3d(&self, geom: &ConvGeom3) -> Tensor {
        let out = crate::conv::col2im3d(&self.inner.value, geom);
        Tensor::from_op(out, Op::Col2im3d(geom.clone()), vec![self.clone()])
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as_2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d tensor")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Op {
    /// Gradient contributions for each parent given the node and the incoming
    /// gradient (same shape as the node value). `None` marks a parent that
    /// needs no gradient.
    fn backward(&self, node: &Node, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = &node.parents;
        // only materialize contributions for grad-requiring parents
        let need = |i: usize| p[i].requires_grad();
        match self {
            Op::Add => vec![
                need(0).then(|| grad.clone()),
                need(1).then(|| grad.clone()),
            ],
            Op::Sub => vec![need(0).then(|| grad.clone()), need(1).then(|| grad.neg())],
            Op::Mul => vec![
                need(0).then(|| grad.mul(&p[1])),
                need(1).then(|| grad.mul(&p[0])),
            ],
            Op::Div => vec![
                need(0).then(|| grad.div(&p[1])),
                need(1).then(|| grad.mul(&p[0]).div(&p[1].mul(&p[1])).neg()),
            ],
            Op::Neg => vec![Some(grad.neg())],
            Op::Scale(c) => vec![Some(grad.scale(*c))],
            Op::AddScalar => vec![Some(grad.clone())],
            Op::Sigmoid => {
                let s = p[0].sigmoid();
                let one_minus = s.neg().add_scalar(1.0);
                vec![Some(grad.mul(&s.mul(&one_minus)))]
            }
            Op::Tanh => {
                let t = p[0].tanh();
                let d = t.mul(&t).neg().add_scalar(1.0);
                vec![Some(grad.mul(&d))]
            }
            Op::LeakyRelu(alpha) => {
                let mask = Tensor::constant(
                    p[0].value().mapv(|x| if x >= 0.0 { 1.0 } else { *alpha }),
                );
                vec![Some(grad.mul(&mask))]
            }
            Op::Abs => {
                // piecewise-constant sign; exact almost everywhere
                let sign = Tensor::constant(
                    p[0].value().mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 }),
                );
                vec![Some(grad.mul(&sign))]
            }
            Op::Softplus => vec![Some(grad.mul(&p[0].sigmoid()))],
            Op::Exp => vec![Some(grad.mul(&p[0].exp()))],
            Op::Ln => vec![Some(grad.div(&p[0]))],
            Op::MatMul => vec![
                need(0).then(|| grad.matmul(&p[1].transpose())),
                need(1).then(|| p[0].transpose().matmul(grad)),
            ],
            Op::Transpose => vec![Some(grad.transpose())],
            Op::Reshape => vec![Some(grad.reshape(p[0].shape()))],
            Op::Permute(perm) => vec![Some(grad.permute(&inverse_perm(perm)))],
            Op::Broadcast { from } => {
                let to = node.value.shape();
                let mut g = grad.clone();
                // collapse the leading axes broadcasting added
                for _ in 0..(to.len() - from.len()) {
                    g = g.sum_axis(0);
                }
                // collapse size-1 source axes
                for (ax, &d) in from.iter().enumerate() {
                    if d == 1 && g.shape()[ax] != 1 {
                        g = g.sum_axis(ax).reshape(&insert_axis(g.shape(), ax));
                    }
                }
                vec![Some(g.reshape(from))]
            }
            Op::SumAll => vec![Some(grad.broadcast_to(p[0].shape()))],
            Op::SumAxis(axis) => {
                let target = p[0].shape().to_vec();
                let with_axis = insert_axis_shape(grad.shape(), *axis);
                vec![Some(grad.reshape(&with_axis).broadcast_to(&target))]
            }
            Op::Concat(axis) => {
                let mut out = Vec::with_capacity(p.len());
                let mut offset = 0usize;
                for part in p {
                    let len = part.shape()[*axis];
                    out.push(
                        part.requires_grad()
                            .then(|| grad.slice_axis(*axis, offset, len)),
                    );
                    offset += len;
                }
                out
            }
            Op::Slice { axis, start } => {
                let total = p[0].shape()[*axis];
                vec![Some(grad.pad_embed(*axis, *start, total))]
            }
            Op::PadEmbed { axis, start } => {
                let len = p[0].shape()[*axis];
                vec![Some(grad.slice_axis(*axis, *start, len))]
            }
            Op::Im2col2d(geom) => vec![Some(grad.col2im2d(geom))],
            Op::Col2im2d(geom) => vec![Some(grad.im2col2d(geom))],
            Op::Im2col3d(geom) => vec![Some(grad.col2im3d(geom))],
            Op::Col2im3d(geom) => vec![Some(grad.im2col3d(geom))],
        }
    }
}

fn insert_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    // shape already has the axis (size != 1 collapsed to scalar by sum_axis);
    // rebuild with a 1 in its place
    let mut s: Vec<usize> = shape.to_vec();
    s[axis] = 1;
    s
}

fn insert_axis_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.insert(axis, 1);
    s
}

/// Reverse-mode gradients of a scalar `root` with respect to `wrt`.
///
/// The returned tensors are graph nodes themselves: any scalar built from
/// them can be passed to `grad` again for higher-order derivatives. Tensors
/// in `wrt` that the root does not depend on get zero gradients.
pub fn grad(root: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    assert_eq!(root.len(), 1, "grad: root must be scalar");
    let order = topo_order(root);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::scalar(1.0).reshape(root.shape()));

    for node in order {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let inner = &node.inner;
        if let Some(op) = &inner.op {
            let contribs = op.backward(inner, &g);
            for (parent, contrib) in inner.parents.iter().zip(contribs) {
                if !parent.requires_grad() {
                    continue;
                }
                if let Some(c) = contrib {
                    grads
                        .entry(parent.id())
                        .and_modify(|acc| *acc = acc.add(&c))
                        .or_insert(c);
                }
            }
        }
    }

    wrt.iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::constant(ArrayD::zeros(IxDyn(t.shape()))))
        })
        .collect()
}

/// Nodes reachable from `root` through grad-requiring edges, root first,
/// every node before all of its parents.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut state: HashMap<u64, u8> = HashMap::new(); // 1 = in progress, 2 = done
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];

    while let Some((node, pidx)) = stack.pop() {
        if pidx == 0 {
            match state.get(&node.id()) {
                Some(_) => continue,
                None => {
                    state.insert(node.id(), 1);
                }
            }
        }
        let parents = &node.inner.parents;
        let mut advanced = false;
        for i in pidx..parents.len() {
            let parent = &parents[i];
            if parent.requires_grad() && !state.contains_key(&parent.id()) {
                stack.push((node.clone(), i + 1));
                stack.push((parent.clone(), 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            state.insert(node.id(), 2);
            order.push(node);
        }
    }
    // post-order gives parents before children; reverse for root-first
    order.reverse();
    order
}
