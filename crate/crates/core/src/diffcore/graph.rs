//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only record of operations. Every operation on a
//! [`Var`] computes its value eagerly and appends one node; [`Graph::backward`]
//! walks the nodes once in reverse append order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, AttnDims, ConvDims};
use super::tensor::Tensor;
use super::Real;
use crate::error::{MartError, Result};

/// Reverse rule for [`Graph::custom`]: `(inputs, output, d_output) -> d_inputs`.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Real> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SoftmaxRows(usize),
    CosineSim {
        u: usize,
        v: usize,
        nu: T,
        nv: T,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    Take {
        x: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
    ConcatRows(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        dims: ConvDims,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    attention_calls: Cell<u64>,
    branches: Cell<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the
    /// output.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(MartError::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn as_matrix(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(MartError::dim(format!("{op}: expected a matrix, got {shape:?}"))),
    }
}

fn as_image(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        [c, h, w] => Ok((1, *c, *h, *w)),
        _ => Err(MartError::dim(format!(
            "{op}: expected [batch×channels×height×width], got {shape:?}"
        ))),
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            attention_calls: Cell::new(0),
            branches: Cell::new(FNV_OFFSET),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of attention operations recorded so far.
    pub fn attention_calls(&self) -> u64 {
        self.attention_calls.get()
    }

    /// Fingerprint of every discrete choice made so far: ReLU signs and
    /// max-pool winners. Two evaluations with equal fingerprints lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    fn record_branches(&self, choices: impl Iterator<Item = u64>) {
        let h = choices.fold(self.branches.get(), |h, c| (h ^ c).wrapping_mul(FNV_PRIME));
        self.branches.set(h);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an operation with a caller-supplied reverse rule.
    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push(value, Op::Custom { inputs: ids, backward }, rg)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let first = parts.first().ok_or_else(|| MartError::dim("concat_rows: no inputs"))?;
        let (_, n) = as_matrix("concat_rows", &first.shape())?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            let (r, c) = as_matrix("concat_rows", v.shape())?;
            if c != n {
                return Err(MartError::dim(format!("concat_rows: widths {n} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(ids), rg))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(MartError::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::filled(nodes[output.id].value.shape().to_vec(), T::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backward_rule(&nodes, node, &g)?;
            for (input, dg) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(dg.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_rule<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let need = |i: usize| nodes[i].requires_grad;
    let out = &*node.value;
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix("matmul", val(*a).shape())?;
            let n = val(*b).shape()[1];
            let mut r = Vec::new();
            if need(*a) {
                let mut da = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, false);
                r.push((*a, Tensor::from_parts(vec![m, k], da)));
            }
            if need(*b) {
                let mut db = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, false);
                r.push((*b, Tensor::from_parts(vec![k, n], db)));
            }
            r
        }
        Op::Transpose(a) => vec![(*a, g.transpose2d()?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, zip_with(g, val(*b), |x, y| x * y)),
            (*b, zip_with(g, val(*a), |x, y| x * y)),
        ],
        Op::AddBias(a, b) => {
            let n = val(*b).len();
            let mut db = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (d, &x) in db.iter_mut().zip(row) {
                    *d += x;
                }
            }
            vec![(*a, g.clone()), (*b, Tensor::from_parts(vec![n], db))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::Exp(a) => vec![(*a, zip_with(g, out, |x, y| x * y))],
        Op::Log(a) => vec![(*a, zip_with(g, val(*a), |x, y| x / y))],
        Op::Relu(a) => vec![(
            *a,
            zip_with(g, val(*a), |x, y| if y > T::zero() { x } else { T::zero() }),
        )],
        Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape().to_vec(), g.item()))],
        Op::Mean(a) => {
            let n = T::of(val(*a).len() as f64);
            vec![(*a, Tensor::filled(val(*a).shape().to_vec(), g.item() / n))]
        }
        Op::SumRows(a) => {
            let (m, n) = as_matrix("sum_rows", val(*a).shape())?;
            let mut d = Vec::with_capacity(m * n);
            for &gi in g.data() {
                d.extend(std::iter::repeat_n(gi, n));
            }
            vec![(*a, Tensor::from_parts(vec![m, n], d))]
        }
        Op::SoftmaxRows(a) => {
            let n = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.len()];
            for ((drow, prow), grow) in d
                .chunks_mut(n)
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let dot: T = prow.iter().zip(grow).map(|(&p, &x)| p * x).sum();
                for ((dv, &p), &x) in drow.iter_mut().zip(prow).zip(grow) {
                    *dv = p * (x - dot);
                }
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::CosineSim { u, v, nu, nv } => {
            let s = out.item();
            let gs = g.item();
            let (uu, vv) = (val(*u), val(*v));
            let du = uu
                .data()
                .iter()
                .zip(vv.data())
                .map(|(&a, &b)| gs * (b / (*nu * *nv) - s * a / (*nu * *nu)))
                .collect();
            let dv = uu
                .data()
                .iter()
                .zip(vv.data())
                .map(|(&a, &b)| gs * (a / (*nu * *nv) - s * b / (*nv * *nv)))
                .collect();
            vec![
                (*u, Tensor::from_parts(uu.shape().to_vec(), du)),
                (*v, Tensor::from_parts(vv.shape().to_vec(), dv)),
            ]
        }
        Op::NormalizeRows { x, norms } => {
            let n = out.cols();
            let mut d = vec![T::zero(); out.len()];
            for (i, &nrm) in norms.iter().enumerate() {
                let y = &out.data()[i * n..(i + 1) * n];
                let gr = &g.data()[i * n..(i + 1) * n];
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = (gr[j] - y[j] * dot) / nrm;
                }
            }
            vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), d))]
        }
        Op::GatherRows { x, index } => {
            let src = val(*x);
            let n = src.cols();
            let mut d = vec![T::zero(); src.len()];
            for (r, &i) in index.iter().enumerate() {
                for j in 0..n {
                    d[i * n + j] += g.data()[r * n + j];
                }
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), d))]
        }
        Op::Take { x, index } => {
            let src = val(*x);
            let mut d = vec![T::zero(); src.len()];
            for (r, &i) in index.iter().enumerate() {
                d[i] += g.data()[r];
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), d))]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
        Op::ConcatRows(parts) => {
            let n = out.cols();
            let mut at = 0;
            parts
                .iter()
                .map(|&p| {
                    let shape = val(p).shape().to_vec();
                    let len = shape[0] * n;
                    let d = Tensor::from_parts(shape, g.data()[at..at + len].to_vec());
                    at += len;
                    (p, d)
                })
                .collect()
        }
        Op::Conv2d { x, w, dims } => {
            let (dx, dw) = kernels::conv2d_backward(
                val(*x).data(),
                val(*w).data(),
                g.data(),
                *dims,
                need(*x),
                need(*w),
            );
            let mut r = Vec::new();
            if let Some(dx) = dx {
                r.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            if let Some(dw) = dw {
                r.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), dw)));
            }
            r
        }
        Op::MaxPool2d { x, argmax } => {
            let mut d = vec![T::zero(); val(*x).len()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                d[src] += gv;
            }
            vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), d))]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (b, c, h, w) = as_image("batchnorm", val(*x).shape())?;
            let s = h * w;
            let cnt = T::of((b * s) as f64);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * s;
                    for k in 0..s {
                        dbeta[ci] += g.data()[off + k];
                        dgamma[ci] += g.data()[off + k] * xhat[off + k];
                    }
                }
            }
            let mut r = vec![
                (*gamma, Tensor::from_parts(vec![c], dgamma.clone())),
                (*beta, Tensor::from_parts(vec![c], dbeta.clone())),
            ];
            if need(*x) {
                let mut dx = vec![T::zero(); val(*x).len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        let scale = gam[ci] * inv_std[ci];
                        for k in 0..s {
                            let gy = g.data()[off + k];
                            dx[off + k] = if *train {
                                scale / cnt
                                    * (cnt * gy - dbeta[ci] - xhat[off + k] * dgamma[ci])
                            } else {
                                scale * gy
                            };
                        }
                    }
                }
                r.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            r
        }
        Op::GlobalAvgPool(x) => {
            let (b, c, h, w) = as_image("global_avg_pool", val(*x).shape())?;
            let s = h * w;
            let inv = T::one() / T::of(s as f64);
            let mut d = vec![T::zero(); b * c * s];
            for (i, &gv) in g.data().iter().enumerate() {
                d[i * s..(i + 1) * s].fill(gv * inv);
            }
            vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), d))]
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            probs,
        } => {
            let (dq, dk, dv) = kernels::attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                g.data(),
                *dims,
            );
            vec![
                (*q, Tensor::from_parts(val(*q).shape().to_vec(), dq)),
                (*k, Tensor::from_parts(val(*k).shape().to_vec(), dk)),
                (*v, Tensor::from_parts(val(*v).shape().to_vec(), dv)),
            ]
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let ds = backward(&ins, out, g);
            if ds.len() != inputs.len() {
                return Err(MartError::dim("custom backward returned wrong arity"));
            }
            for (d, t) in ds.iter().zip(&ins) {
                same_shape("custom backward", d.shape(), t.shape())?;
            }
            inputs.iter().copied().zip(ds).collect()
        }
    };
    Ok(res)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = as_matrix("matmul", a.shape())?;
        let (k2, n) = as_matrix("matmul", b.shape())?;
        if k != k2 {
            return Err(MartError::dim(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.binary(other, Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let t = self.value().transpose2d()?;
        Ok(self.unary(t, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", a.shape(), b.shape())?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", a.shape(), b.shape())?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", a.shape(), b.shape())?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), bias.value());
        let (_, n) = as_matrix("add_bias", a.shape())?;
        if b.shape() != [n] {
            return Err(MartError::dim(format!(
                "add_bias: bias {:?} does not fit rows of {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let data = a
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.binary(
            bias,
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddBias(self.id, bias.id),
        ))
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn exp(&self) -> Var<'g, T> {
        let v = self.value().map(T::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        if let Some(bad) = a.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(MartError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a.map(T::ln), Op::Log(self.id)))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let x = self.value();
        self.graph.record_branches(x.data().iter().map(|&v| u64::from(v > T::zero())));
        let v = x.map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let a = self.value();
        let s: T = a.data().iter().copied().sum();
        self.unary(Tensor::scalar(s / T::of(a.len() as f64)), Op::Mean(self.id))
    }

    /// Row sums of an `[m×n]` matrix, giving `[m]`.
    pub fn sum_rows(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let (_, n) = as_matrix("sum_rows", a.shape())?;
        let data: Vec<T> = a.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        Ok(self.unary(Tensor::vector(data), Op::SumRows(self.id)))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        if !a.is_finite() {
            return Err(MartError::Domain("softmax of non-finite input".into()));
        }
        let n = *a.shape().last().unwrap();
        let mut out = Vec::with_capacity(a.len());
        for row in a.data().chunks(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|x| x / z));
        }
        Ok(self.unary(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::SoftmaxRows(self.id),
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_sim(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (u, v) = (self.value(), other.value());
        if u.len() != v.len() {
            return Err(MartError::dim(format!(
                "cosine_sim: lengths {} and {} differ",
                u.len(),
                v.len()
            )));
        }
        let nu = u.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let nv = v.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        if nu == T::zero() || nv == T::zero() {
            return Err(MartError::DegenerateVector(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: T = u.data().iter().zip(v.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.binary(
            other,
            Tensor::scalar(dot / (nu * nv)),
            Op::CosineSim {
                u: self.id,
                v: other.id,
                nu,
                nv,
            },
        ))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let (m, n) = as_matrix("normalize_rows", a.shape())?;
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for (i, row) in a.data().chunks(n).enumerate() {
            let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if nrm == T::zero() || !nrm.is_finite() {
                return Err(MartError::DegenerateVector(format!(
                    "row {i} has norm {nrm}"
                )));
            }
            norms.push(nrm);
            out.extend(row.iter().map(|&x| x / nrm));
        }
        Ok(self.unary(
            Tensor::from_parts(vec![m, n], out),
            Op::NormalizeRows { x: self.id, norms },
        ))
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let (m, n) = as_matrix("gather_rows", a.shape())?;
        if index.is_empty() {
            return Err(MartError::dim("gather_rows: empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(MartError::dim(format!("gather_rows: row {i} out of {m}")));
            }
            out.extend_from_slice(a.row(i));
        }
        Ok(self.unary(
            Tensor::from_parts(vec![index.len(), n], out),
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(&index)
    }

    /// Picks elements by flat index into a vector.
    pub fn take(&self, index: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        if index.is_empty() {
            return Err(MartError::dim("take: empty index"));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            out.push(*a.data().get(i).ok_or_else(|| {
                MartError::dim(format!("take: index {i} out of {}", a.len()))
            })?);
        }
        Ok(self.unary(
            Tensor::vector(out),
            Op::Take {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let t = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// 3×3 cross-correlation with zero padding 1. Input `[B×C×H×W]` (or
    /// `[C×H×W]`), kernels `[O×C×3×3]`.
    pub fn conv2d(&self, kernels: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), kernels.value());
        let (b, c, h, wd) = as_image("conv2d", x.shape())?;
        let (o, ci) = match w.shape() {
            [o, ci, 3, 3] => (*o, *ci),
            s => {
                return Err(MartError::dim(format!(
                    "conv2d: kernels must be [out×in×3×3], got {s:?}"
                )))
            }
        };
        if ci != c {
            return Err(MartError::dim(format!(
                "conv2d: input {:?} has {c} channels, kernels {:?} expect {ci}",
                x.shape(),
                w.shape()
            )));
        }
        let dims = ConvDims {
            batch: b,
            c_in: c,
            c_out: o,
            h,
            w: wd,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), dims);
        let shape = if x.rank() == 3 { vec![o, h, wd] } else { vec![b, o, h, wd] };
        Ok(self.binary(
            kernels,
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x: self.id,
                w: kernels.id,
                dims,
            },
        ))
    }

    /// Non-overlapping max pooling with a `(height, width)` window.
    pub fn maxpool2d(&self, window: (usize, usize)) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = as_image("maxpool2d", x.shape())?;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || wh > h || ww > w {
            return Err(MartError::dim(format!(
                "maxpool2d: window {window:?} does not fit spatial size {h}×{w}"
            )));
        }
        if h % wh != 0 || w % ww != 0 {
            return Err(MartError::dim(format!(
                "maxpool2d: spatial size {h}×{w} not divisible by window {window:?}"
            )));
        }
        let (out, argmax) = kernels::maxpool_forward(x.data(), b * c, h, w, wh, ww);
        self.graph.record_branches(argmax.iter().map(|&i| i as u64));
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / wh;
        shape[r - 1] = w / ww;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::MaxPool2d {
                x: self.id,
                argmax,
            },
        ))
    }

    /// Training-mode batch normalization over `[B×C×H×W]` with per-channel
    /// statistics across batch and space. Also returns the batch mean and
    /// biased variance per channel.
    pub fn batchnorm_train(
        &self,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        eps: T,
    ) -> Result<(Var<'g, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let (b, c, h, w) = as_image("batchnorm", x.shape())?;
        let s = h * w;
        let cnt = T::of((b * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                mean[ci] += x.data()[off..off + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                var[ci] += x.data()[off..off + s]
                    .iter()
                    .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.bn_apply(gamma, beta, &mean, inv_std, true)?;
        Ok((y, mean, var))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &self,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var<'g, T>> {
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.bn_apply(gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(
        &self,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = as_image("batchnorm", x.shape())?;
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] || mean.len() != c || inv_std.len() != c {
            return Err(MartError::dim(format!(
                "batchnorm: parameters must have {c} channels for input {:?}",
                x.shape()
            )));
        }
        let s = h * w;
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for k in 0..s {
                    let xh = (x.data()[off + k] - mean[ci]) * inv_std[ci];
                    xhat[off + k] = xh;
                    y[off + k] = gm.data()[ci] * xh + bt.data()[ci];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Mean over the spatial axes: `[B×C×H×W] -> [B×C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = as_image("global_avg_pool", x.shape())?;
        let s = h * w;
        let inv = T::one() / T::of(s as f64);
        let data = x
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.unary(Tensor::from_parts(vec![b, c], data), Op::GlobalAvgPool(self.id)))
    }

    /// Grouped multi-head scaled dot-product attention with `self` as the
    /// queries. Queries `[G·Q × D]` attend only to keys/values `[G·K × D]` of
    /// their own group; returns concatenated heads `[G·Q × D]`.
    pub fn attention(
        &self,
        keys: &Var<'g, T>,
        values: &Var<'g, T>,
        groups: usize,
        heads: usize,
    ) -> Result<Var<'g, T>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (qr, d) = as_matrix("attention", q.shape())?;
        let (kr, dk) = as_matrix("attention", k.shape())?;
        same_shape("attention keys/values", k.shape(), v.shape())?;
        if dk != d {
            return Err(MartError::dim(format!(
                "attention: query width {d} differs from key width {dk}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(MartError::dim(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(MartError::dim(format!(
                "attention: {qr} queries / {kr} keys do not split into {groups} groups"
            )));
        }
        let dims = AttnDims {
            groups,
            queries: qr / groups,
            keys: kr / groups,
            width: d,
            heads,
        };
        let (out, probs) = kernels::attention_forward(q.data(), k.data(), v.data(), dims);
        self.graph.attention_calls.set(self.graph.attention_calls.get() + 1);
        let rg = self.requires_grad() || keys.requires_grad() || values.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(vec![qr, d], out),
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                dims,
                probs,
            },
            rg,
        ))
    }
}
