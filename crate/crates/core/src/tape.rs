//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so node ids are already a topological
//! order; [`Tape::backward`] replays them in reverse exactly once each.
//!
//! The tape is rebuilt for every forward pass and is confined to one
//! thread.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv;
use crate::tensor::{
    check_permutation, gemm, inverse_permutation, matmul_dims, numel, MatRef, Result, Scalar,
    Tensor, TensorError,
};

/// Guard added under the square root wherever a Euclidean norm appears in a
/// denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Exponent clamp for the logistic sigmoid.
const SIGMOID_CLAMP: f64 = 40.0;

/// Identifies which rule produced a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Reshape,
    Permute,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Sum,
    SumSquares,
    Norm,
    AddBias,
    Softmax,
    Gather,
    CapsuleTransform,
    CoupledSum,
    Squash,
    CapsuleRelu,
    MarginLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::SumSquares,
        OpKind::Norm,
        OpKind::AddBias,
        OpKind::Softmax,
        OpKind::Gather,
        OpKind::CapsuleTransform,
        OpKind::CoupledSum,
        OpKind::Squash,
        OpKind::CapsuleRelu,
        OpKind::MarginLoss,
    ];
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    kind: OpKind,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

thread_local! {
    static CORRUPTED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Factor applied to every gradient emitted by a corrupted rule.
pub const CORRUPTION_FACTOR: f64 = 1.25;

/// Runs `f` with the backward rule of `kind` deliberately broken on this
/// thread. Used to confirm that gradient checks actually detect bad rules.
pub fn with_corrupted_backward<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            CORRUPTED.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(CORRUPTED.with(|c| c.replace(Some(kind))));
    f()
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(OpKind::Leaf, value, Vec::new(), requires_grad, None)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an operation with a caller-supplied backward rule. The rule is
    /// dropped when no parent requires a gradient.
    pub fn custom(
        &self,
        kind: OpKind,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(kind, value, ids, requires_grad, backward)
    }

    fn push(
        &self,
        kind: OpKind,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            kind,
            value: Rc::new(value),
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    /// Leaves that require a gradient but are unreachable get zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let corrupted = CORRUPTED.with(|c| c.get());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_node.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let mut parent_grads = rule(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            if corrupted == Some(node.kind) {
                let factor = T::lit(CORRUPTION_FACTOR);
                for pg in parent_grads.iter_mut().flatten() {
                    pg.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
            }
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "{:?}", node.kind);
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.kind == OpKind::Leaf && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn is_scalar<T: Copy>(t: &Tensor<T>) -> bool {
    t.numel() == 1 && t.rank() <= 1
}

fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g.clone()
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.sum()])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn kind(&self) -> OpKind {
        self.tape.nodes.borrow()[self.id].kind
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn op(self, kind: OpKind, value: Tensor<T>, parents: &[Var<'t, T>], bw: BackwardFn<T>) -> Self {
        self.tape.custom(kind, value, parents, bw)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.op(
            OpKind::Reshape,
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]),
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let x = self.value();
        check_permutation(perm, x.rank())?;
        let out = x.permute(perm)?;
        let inv = inverse_permutation(perm);
        Ok(self.op(
            OpKind::Permute,
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.permute(&inv).expect("inverse permutation"))]),
        ))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
        let out = a.matmul(&b)?;
        Ok(self.op(
            OpKind::MatMul,
            out,
            &[self, rhs],
            Box::new(move |g, needs| {
                let gm = MatRef::row_major(g.data(), m, n);
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(T::one(), gm, MatRef::row_major(b.data(), k, n).t(), T::zero(), &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(T::one(), MatRef::row_major(a.data(), m, k).t(), gm, T::zero(), &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    /// Valid cross-correlation of `(B,Cin,H,W)` input with
    /// `(Cout,Cin,kh,kw)` kernels plus a per-channel bias.
    pub fn conv2d(self, kernels: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Self> {
        let x = self.value();
        let w = kernels.value();
        let b = bias.value();
        let geom = conv::Geometry::new(x.shape(), w.shape(), b.shape(), stride)?;
        let keep_cols = kernels.requires_grad();
        let (out, cols) = conv::forward(&geom, x.data(), w.data(), b.data());
        let cols = keep_cols.then_some(cols);
        Ok(self.op(
            OpKind::Conv2d,
            Tensor::from_parts(geom.output_shape().to_vec(), out),
            &[self, kernels, bias],
            Box::new(move |g, needs| {
                let (dx, dw, db) = conv::backward(&geom, g.data(), w.data(), cols.as_deref(), needs);
                vec![
                    dx.map(|d| Tensor::from_parts(geom.input_shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(geom.kernel_shape().to_vec(), d)),
                    db.map(|d| Tensor::from_parts(vec![geom.c_out], d)),
                ]
            }),
        ))
    }

    fn binary_shapes(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
        if a.shape() == b.shape() || is_scalar(b) {
            Ok(a.shape().to_vec())
        } else if is_scalar(a) {
            Ok(b.shape().to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        let shape = Self::binary_shapes("add", &a, &b)?;
        let out = broadcast_zip(&a, &b, &shape, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.op(
            OpKind::Add,
            out,
            &[self, rhs],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| sum_to_shape(g, &sa)),
                    needs[1].then(|| sum_to_shape(g, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Self> {
        self.add(rhs.scale(-T::one()))
    }

    /// Elementwise product; either operand may be a one-element scalar.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        let shape = Self::binary_shapes("mul", &a, &b)?;
        let out = broadcast_zip(&a, &b, &shape, |x, y| x * y);
        Ok(self.op(
            OpKind::Mul,
            out,
            &[self, rhs],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let full = broadcast_zip(g, &b, g.shape(), |gi, bi| gi * bi);
                    sum_to_shape(&full, a.shape())
                });
                let db = needs[1].then(|| {
                    let full = broadcast_zip(g, &a, g.shape(), |gi, ai| gi * ai);
                    sum_to_shape(&full, b.shape())
                });
                vec![da, db]
            }),
        ))
    }

    pub fn scale(self, c: T) -> Self {
        let out = self.value().map(|x| x * c);
        self.op(
            OpKind::Scale,
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|x| x * c))]),
        )
    }

    pub fn add_scalar(self, c: T) -> Self {
        let out = self.value().map(|x| x + c);
        self.op(
            OpKind::AddScalar,
            out,
            &[self],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(self) -> Self {
        let x = self.value();
        let out = x.map(|v| if v < T::zero() { T::zero() } else { v });
        self.op(
            OpKind::Relu,
            out,
            &[self],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn sigmoid(self) -> Self {
        let clamp = T::lit(SIGMOID_CLAMP);
        let out = self
            .value()
            .map(|v| T::one() / (T::one() + (-v.max(-clamp).min(clamp)).exp()));
        let s = out.clone();
        self.op(
            OpKind::Sigmoid,
            out,
            &[self],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(&gi, &si)| gi * si * (T::one() - si))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.op(
            OpKind::Sum,
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Self {
        let n = T::from_usize(self.value().numel()).expect("count");
        self.sum().scale(T::one() / n)
    }

    /// Σ x², with gradient `2·x·g`.
    pub fn sum_squares(self) -> Self {
        let x = self.value();
        self.op(
            OpKind::SumSquares,
            Tensor::scalar(x.sum_squares()),
            &[self],
            Box::new(move |g, _| {
                let gv = g.item();
                let two = T::lit(2.0);
                vec![Some(x.map(|xi| (xi * two) * gv))]
            }),
        )
    }

    /// Euclidean norm along `axis`, which is removed from the shape. The
    /// backward rule is `x/√(‖x‖²+ε)`, so a zero vector gets zero gradient.
    pub fn norm(self, axis: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "norm",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = numel(&shape[..axis]);
        let len = shape[axis];
        let inner: usize = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let v = x.data()[base + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        let sq = out.clone();
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let eps = T::lit(NORM_EPS);
        Ok(self.op(
            OpKind::Norm,
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        let scale = g.data()[r] / (sq[r] + eps).sqrt();
                        for a in 0..len {
                            let idx = (o * len + a) * inner + i;
                            d[idx] = x.data()[idx] * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// `(m,n) + (n)`: adds `bias` to every row.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Self> {
        let x = self.value();
        let b = bias.value();
        let n = match (x.shape(), b.shape()) {
            ([_, n], [nb]) if n == nb => *n,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bi)| *o += bi);
        }
        Ok(self.op(
            OpKind::AddBias,
            out,
            &[self, bias],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        d.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    Tensor::from_parts(vec![n], d)
                });
                vec![needs[0].then(|| g.clone()), db]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let s = out.clone();
        self.op(
            OpKind::Softmax,
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); s.numel()];
                for ((drow, srow), grow) in d
                    .chunks_mut(n)
                    .zip(s.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *dv = sv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_parts(s.shape().to_vec(), d))]
            }),
        )
    }
}

fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let n = numel(shape);
    let data = match (a.numel() == n, b.numel() == n) {
        (true, true) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        (false, true) => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        (false, false) => vec![f(a.data()[0], b.data()[0])],
    };
    Tensor::from_parts(shape.to_vec(), data)
}
