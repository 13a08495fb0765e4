//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a flat tape of nodes; every operation appends a node holding
//! its result value, its parent ids and an opcode. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that (transitively)
//! depends on a trainable leaf. The model code builds a fresh graph per training
//! step, so memory is bounded by a single step's activations.
//!
//! The op set is deliberately small: everything the acoustic model needs is a
//! composition of these primitives, which keeps the gradient surface easy to
//! audit against finite differences.

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating point element type usable in a [`Graph`].
///
/// Training runs in `f32`; gradient verification uses `f64`.
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + Sum<Self> + Display + LowerExp + 'static
{
    /// Byte width on disk (checkpoint payloads are little-endian).
    const WIDTH: usize;
    /// Dtype tag stored in checkpoint tensor blocks.
    const DTYPE_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: usize = 4;
    const DTYPE_TAG: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;
    const DTYPE_TAG: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tid(pub usize);

/// Per-axis strided slice spec used by [`Graph::slice`].
#[derive(Clone, Debug)]
pub struct AxSlice {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl AxSlice {
    pub fn all(len: usize) -> Self {
        AxSlice { start: 0, end: len, step: 1 }
    }
    pub fn range(start: usize, end: usize) -> Self {
        AxSlice { start, end, step: 1 }
    }
    pub fn strided(start: usize, end: usize, step: usize) -> Self {
        AxSlice { start, end, step }
    }
}

enum Op<F: Scalar> {
    Leaf { trainable: bool },
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(F),
    Offset(F),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Abs,
    Square,
    Sqrt,
    /// Full reduction to a single-element tensor of shape `[1]`.
    Sum,
    /// Sum along one axis, keeping it with length 1.
    SumAxisKeep(usize),
    Reshape,
    Permute(Vec<usize>),
    Slice(Vec<AxSlice>),
    Concat { axis: usize, sizes: Vec<usize> },
    Gather { ids: Vec<usize> },
    PadZero { axis: usize, before: usize },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of tensor operations; see module docs.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_2d<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

/// Numpy-style broadcast target shape of two operand shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_to<'a, F: Scalar>(a: &'a ArrayD<F>, shape: &[usize]) -> ArrayViewD<'a, F> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
}

/// Reduce a gradient of broadcast shape back down to the operand's shape.
fn reduce_to_shape<F: Scalar>(grad: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tid) -> &ArrayD<F> {
        &self.nodes[t.0].value
    }

    /// Scalar read of a `[1]` or 0-d tensor.
    pub fn scalar(&self, t: Tid) -> F {
        let v = &self.nodes[t.0].value;
        *v.iter().next().expect("scalar read of empty tensor")
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<usize>, op: Op<F>) -> Tid {
        let needs_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, parents, op, needs_grad });
        Tid(self.nodes.len() - 1)
    }

    /// Non-trainable leaf: inputs, targets, masks, noise draws.
    pub fn constant(&mut self, value: ArrayD<F>) -> Tid {
        self.push(value, vec![], Op::Leaf { trainable: false })
    }

    /// Trainable leaf; receives a gradient slot in [`Graph::backward`].
    pub fn param(&mut self, value: ArrayD<F>) -> Tid {
        self.push(value, vec![], Op::Leaf { trainable: true })
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tid {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = as_2d(&self.nodes[a.0].value).dot(&as_2d(&self.nodes[b.0].value));
        self.push(v.into_dyn(), vec![a.0, b.0], Op::MatMul)
    }

    fn binary(&mut self, a: Tid, b: Tid, op: Op<F>) -> Tid {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape());
        let ba = broadcast_to(va, &shape);
        let bb = broadcast_to(vb, &shape);
        let v = match op {
            Op::Add => &ba + &bb,
            Op::Sub => &ba - &bb,
            Op::Mul => &ba * &bb,
            Op::Div => &ba / &bb,
            _ => unreachable!(),
        };
        self.push(v, vec![a.0, b.0], op)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary(a, b, Op::Div)
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, vec![a.0], Op::Neg)
    }

    pub fn scale(&mut self, a: Tid, c: F) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, vec![a.0], Op::Scale(c))
    }

    pub fn offset(&mut self, a: Tid, c: F) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, vec![a.0], Op::Offset(c))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let one = F::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, vec![a.0], Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, vec![a.0], Op::Tanh)
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let z = F::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { z });
        self.push(v, vec![a.0], Op::Relu)
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, vec![a.0], Op::Exp)
    }

    pub fn abs(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, vec![a.0], Op::Abs)
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, vec![a.0], Op::Square)
    }

    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, vec![a.0], Op::Sqrt)
    }

    pub fn sum(&mut self, a: Tid) -> Tid {
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), vec![a.0], Op::Sum)
    }

    pub fn sum_axis_keep(&mut self, a: Tid, axis: usize) -> Tid {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(v, vec![a.0], Op::SumAxisKeep(axis))
    }

    pub fn mean(&mut self, a: Tid) -> Tid {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, vec![a.0], Op::Reshape)
    }

    pub fn permute(&mut self, a: Tid, order: &[usize]) -> Tid {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(order))
            .as_standard_layout()
            .to_owned();
        self.push(v, vec![a.0], Op::Permute(order.to_vec()))
    }

    pub fn slice(&mut self, a: Tid, spec: &[AxSlice]) -> Tid {
        assert_eq!(spec.len(), self.nodes[a.0].value.ndim(), "slice spec rank mismatch");
        let v = self.nodes[a.0]
            .value
            .slice_each_axis(|ax| {
                let s = &spec[ax.axis.index()];
                Slice::from(s.start..s.end).step_by(s.step as isize)
            })
            .as_standard_layout()
            .to_owned();
        self.push(v, vec![a.0], Op::Slice(spec.to_vec()))
    }

    /// Slice a single axis, full range on the others.
    pub fn slice_axis(&mut self, a: Tid, axis: usize, start: usize, end: usize) -> Tid {
        let spec: Vec<AxSlice> = self.nodes[a.0]
            .value
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &len)| if i == axis { AxSlice::range(start, end) } else { AxSlice::all(len) })
            .collect();
        self.slice(a, &spec)
    }

    pub fn concat(&mut self, parts: &[Tid], axis: usize) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<'_, F>> =
            parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes = parts.iter().map(|t| self.nodes[t.0].value.shape()[axis]).collect();
        let parents = parts.iter().map(|t| t.0).collect();
        self.push(v, parents, Op::Concat { axis, sizes })
    }

    /// Row gather from a 2-d table: `out[i, :] = table[ids[i], :]`.
    pub fn gather(&mut self, table: Tid, ids: &[usize]) -> Tid {
        let t = as_2d(&self.nodes[table.0].value);
        let cols = t.ncols();
        let mut v = Array2::<F>::zeros((ids.len(), cols));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(v.into_dyn(), vec![table.0], Op::Gather { ids: ids.to_vec() })
    }

    pub fn pad_zero(&mut self, a: Tid, axis: usize, before: usize, after: usize) -> Tid {
        let src = &self.nodes[a.0].value;
        let mut shape = src.shape().to_vec();
        shape[axis] += before + after;
        let mut v = ArrayD::<F>::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(before..before + src.shape()[axis]))
            .assign(src);
        self.push(v, vec![a.0], Op::PadZero { axis, before })
    }

    /// Gradients of `root` w.r.t. every tape node; `None` where no gradient
    /// flows or none is needed. `root` must be a single-element tensor.
    pub fn backward(&mut self, root: Tid) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                grads[i] = Some(g_out);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let contributions = self.op_backward(i, &g_out);
            for (pid, contrib) in contributions {
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        grads
    }

    fn op_backward(&self, i: usize, g: &ArrayD<F>) -> Vec<(usize, ArrayD<F>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let pv = |k: usize| &self.nodes[p[k]].value;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::MatMul => {
                let (a, b) = (as_2d(pv(0)), as_2d(pv(1)));
                let g2 = as_2d(g);
                let ga = g2.dot(&b.t()).into_dyn();
                let gb = a.t().dot(&g2).into_dyn();
                vec![(p[0], ga), (p[1], gb)]
            }
            Op::Add => vec![
                (p[0], reduce_to_shape(g, pv(0).shape())),
                (p[1], reduce_to_shape(g, pv(1).shape())),
            ],
            Op::Sub => {
                let gb = reduce_to_shape(g, pv(1).shape()).mapv(|x| -x);
                vec![(p[0], reduce_to_shape(g, pv(0).shape())), (p[1], gb)]
            }
            Op::Mul => {
                let shape = node.value.shape();
                let ga = g * &broadcast_to(pv(1), shape);
                let gb = g * &broadcast_to(pv(0), shape);
                vec![
                    (p[0], reduce_to_shape(&ga, pv(0).shape())),
                    (p[1], reduce_to_shape(&gb, pv(1).shape())),
                ]
            }
            Op::Div => {
                let shape = node.value.shape();
                let b = broadcast_to(pv(1), shape);
                let ga = g / &b;
                let mut gb = (g * &node.value.view()) / &b;
                gb.mapv_inplace(|x| -x);
                vec![
                    (p[0], reduce_to_shape(&ga, pv(0).shape())),
                    (p[1], reduce_to_shape(&gb, pv(1).shape())),
                ]
            }
            Op::Neg => vec![(p[0], g.mapv(|x| -x))],
            Op::Scale(c) => vec![(p[0], g.mapv(|x| x * *c))],
            Op::Offset(_) => vec![(p[0], g.clone())],
            Op::Sigmoid => {
                let y = &node.value;
                vec![(p[0], g * &y.mapv(|y| y * (F::one() - y)))]
            }
            Op::Tanh => {
                let y = &node.value;
                vec![(p[0], g * &y.mapv(|y| F::one() - y * y))]
            }
            Op::Relu => {
                let mask = pv(0).mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                vec![(p[0], g * &mask)]
            }
            Op::Exp => vec![(p[0], g * &node.value)],
            Op::Abs => {
                let sign = pv(0).mapv(|x| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                vec![(p[0], g * &sign)]
            }
            Op::Square => {
                let two = F::from_f64(2.0);
                vec![(p[0], g * &pv(0).mapv(|x| two * x))]
            }
            Op::Sqrt => {
                let half = F::from_f64(0.5);
                vec![(p[0], g * &node.value.mapv(|y| half / y))]
            }
            Op::Sum => {
                let g0 = *g.iter().next().unwrap();
                vec![(p[0], ArrayD::from_elem(pv(0).raw_dim(), g0))]
            }
            Op::SumAxisKeep(axis) => {
                let gb = broadcast_to(g, pv(0).shape()).to_owned();
                let _ = axis;
                vec![(p[0], gb)]
            }
            Op::Reshape => {
                let gp = g.clone().into_shape_with_order(pv(0).raw_dim()).unwrap();
                vec![(p[0], gp)]
            }
            Op::Permute(order) => {
                let mut inverse = vec![0usize; order.len()];
                for (to, &from) in order.iter().enumerate() {
                    inverse[from] = to;
                }
                let gp = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                vec![(p[0], gp)]
            }
            Op::Slice(spec) => {
                let mut gp = ArrayD::<F>::zeros(pv(0).raw_dim());
                gp.slice_each_axis_mut(|ax| {
                    let s = &spec[ax.axis.index()];
                    Slice::from(s.start..s.end).step_by(s.step as isize)
                })
                .assign(g);
                vec![(p[0], gp)]
            }
            Op::Concat { axis, sizes } => {
                let mut out = Vec::with_capacity(p.len());
                let mut offset = 0usize;
                for (k, &sz) in sizes.iter().enumerate() {
                    let gp = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + sz))
                        .to_owned();
                    out.push((p[k], gp));
                    offset += sz;
                }
                out
            }
            Op::Gather { ids } => {
                let mut gp = Array2::<F>::zeros((pv(0).shape()[0], pv(0).shape()[1]));
                let g2 = as_2d(g);
                for (row, &id) in ids.iter().enumerate() {
                    let mut dst = gp.row_mut(id);
                    dst += &g2.row(row);
                }
                vec![(p[0], gp.into_dyn())]
            }
            Op::PadZero { axis, before } => {
                let n = pv(0).shape()[*axis];
                let gp = g
                    .slice_axis(Axis(*axis), Slice::from(*before..*before + n))
                    .to_owned();
                vec![(p[0], gp)]
            }
        }
    }
}
