//! Reverse-mode differentiation over a single-use tape.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! returns the [`Gradients`] of every node that depends on a parameter.
//! The tape is spent afterwards; the training loop records a new one per
//! step.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::array::{
    matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_into, DenseArray,
};
use crate::error::{Error, Result};

/// Local-gradient rule for a caller-defined operation: maps the upstream
/// gradient of the output to one gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&DenseArray) -> Vec<DenseArray>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    Sum(usize),
    SoftmaxXent {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<f64>,
        active: Vec<bool>,
        count: usize,
    },
    Custom {
        inputs: Vec<usize>,
        backward: BackwardFn,
    },
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Pointwise operations understood by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("spent", &self.spent.get())
            .finish()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.index, self.value().shape())
    }
}

fn finite(data: Vec<f64>, shape: Vec<usize>, op: &str) -> Result<DenseArray> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op.to_string()));
    }
    Ok(DenseArray::from_parts(shape, data))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseArray, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn needs(&self, index: usize) -> bool {
        self.nodes.borrow()[index].needs_grad
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variable recorded on another tape");
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(a);
        self.check_owner(b);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.index].value, &nodes[b.index].value);
            let (m, k) = av.dims2().ok_or_else(|| dim_err("matmul", av, bv))?;
            let (k2, n) = bv.dims2().ok_or_else(|| dim_err("matmul", av, bv))?;
            if k != k2 {
                return Err(dim_err("matmul", av, bv));
            }
            let data = matmul_kernel(av.data(), bv.data(), m, k, n);
            (
                finite(data, vec![m, n], "matmul")?,
                nodes[a.index].needs_grad || nodes[b.index].needs_grad,
            )
        };
        Ok(self.push(value, Op::MatMul(a.index, b.index), needs))
    }

    pub fn elementwise<'t>(
        &'t self,
        op: ElementwiseOp,
        a: Var<'t>,
        b: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        self.check_owner(a);
        match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
                let b = b.ok_or_else(|| {
                    Error::Contract(format!("{op:?} requires a second operand"))
                })?;
                self.check_owner(b);
                let (value, needs) = {
                    let nodes = self.nodes.borrow();
                    let (av, bv) = (&nodes[a.index].value, &nodes[b.index].value);
                    av.same_shape(bv, "elementwise")?;
                    let f: fn(f64, f64) -> f64 = match op {
                        ElementwiseOp::Add => |x, y| x + y,
                        ElementwiseOp::Sub => |x, y| x - y,
                        _ => |x, y| x * y,
                    };
                    let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                    (
                        finite(data, av.shape().to_vec(), "elementwise")?,
                        nodes[a.index].needs_grad || nodes[b.index].needs_grad,
                    )
                };
                let rec = match op {
                    ElementwiseOp::Add => Op::Add(a.index, b.index),
                    ElementwiseOp::Sub => Op::Sub(a.index, b.index),
                    _ => Op::Mul(a.index, b.index),
                };
                Ok(self.push(value, rec, needs))
            }
            ElementwiseOp::Relu | ElementwiseOp::Scale(_) => {
                if b.is_some() {
                    return Err(Error::Contract(format!("{op:?} is unary")));
                }
                let (value, needs) = {
                    let nodes = self.nodes.borrow();
                    let av = &nodes[a.index].value;
                    let data = match op {
                        ElementwiseOp::Relu => av.data().iter().map(|&x| x.max(0.0)).collect(),
                        ElementwiseOp::Scale(c) => av.data().iter().map(|&x| x * c).collect(),
                        _ => unreachable!(),
                    };
                    (
                        finite(data, av.shape().to_vec(), "elementwise")?,
                        nodes[a.index].needs_grad,
                    )
                };
                let rec = match op {
                    ElementwiseOp::Relu => Op::Relu(a.index),
                    ElementwiseOp::Scale(c) => Op::Scale(a.index, c),
                    _ => unreachable!(),
                };
                Ok(self.push(value, rec, needs))
            }
        }
    }

    /// Sum of all entries as a shape-`[1]` node.
    pub fn sum<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(a);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let s = nodes[a.index].value.sum();
            (finite(vec![s], vec![1], "sum")?, nodes[a.index].needs_grad)
        };
        Ok(self.push(value, Op::Sum(a.index), needs))
    }

    /// Mean cross entropy of row-wise softmax against one-hot targets.
    ///
    /// Rows with `ignore_mask == 1` contribute neither value nor gradient.
    /// With every row ignored the loss is exactly zero.
    pub fn softmax_cross_entropy<'t>(
        &'t self,
        logits: Var<'t>,
        targets: &DenseArray,
        ignore_mask: &DenseArray,
    ) -> Result<Var<'t>> {
        self.check_owner(logits);
        let nodes = self.nodes.borrow();
        let lv = &nodes[logits.index].value;
        let (n, classes) = lv
            .dims2()
            .ok_or_else(|| dim_err("softmax_cross_entropy", lv, targets))?;
        lv.same_shape(targets, "softmax_cross_entropy")?;
        if ignore_mask.len() != n {
            return Err(dim_err("softmax_cross_entropy", lv, ignore_mask));
        }
        let mut active = Vec::with_capacity(n);
        for (row, &m) in ignore_mask.data().iter().enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(Error::Validation(format!(
                    "ignore mask entry {row} is {m}, expected 0 or 1"
                )));
            }
            active.push(m == 0.0);
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        let mut count = 0;
        for (row, ((lrow, trow), prow)) in lv
            .data()
            .chunks_exact(classes)
            .zip(targets.data().chunks_exact(classes))
            .zip(probs.chunks_exact_mut(classes))
            .enumerate()
        {
            if !active[row] {
                continue;
            }
            let hot = one_hot_index(trow).ok_or_else(|| {
                Error::Validation(format!("target row {row} is not one-hot: {trow:?}"))
            })?;
            softmax_into(lrow, prow);
            // log-sum-exp form keeps confident rows exact
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - lrow[hot];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let value = finite(vec![loss], vec![1], "softmax_cross_entropy")?;
        let needs = nodes[logits.index].needs_grad;
        drop(nodes);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits: logits.index,
                probs,
                targets: targets.data().to_vec(),
                active,
                count,
            },
            needs,
        ))
    }

    /// Records an operation whose forward value the caller computed and whose
    /// local gradients are produced by `backward`.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: DenseArray,
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::NonFinite("custom".into()));
        }
        for v in inputs {
            self.check_owner(*v);
        }
        let needs = inputs.iter().any(|v| self.needs(v.index));
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.index).collect(),
                backward,
            },
            needs,
        ))
    }

    /// Propagates gradients from a scalar root. The tape can be
    /// differentiated only once.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root);
        if self.spent.get() {
            return Err(Error::State(
                "tape already differentiated; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root.index].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                nodes[root.index].value.shape()
            )));
        }
        self.spent.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.dims2().expect("matmul lhs");
                    let (_, n) = bv.dims2().expect("matmul rhs");
                    if nodes[*a].needs_grad {
                        let ga = matmul_nt_kernel(&g, bv.data(), m, n, k);
                        accumulate(&mut grads, *a, &ga);
                    }
                    if nodes[*b].needs_grad {
                        let gb = matmul_tn_kernel(av.data(), &g, m, k, n);
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate_if(&nodes, &mut grads, *a, &g);
                    accumulate_if(&nodes, &mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate_if(&nodes, &mut grads, *a, &g);
                    if nodes[*b].needs_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        let ga: Vec<f64> =
                            g.iter().zip(nodes[*b].value.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, &ga);
                    }
                    if nodes[*b].needs_grad {
                        let gb: Vec<f64> =
                            g.iter().zip(nodes[*a].value.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(nodes[*a].value.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate_if(&nodes, &mut grads, *a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate_if(&nodes, &mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; nodes[*a].value.len()];
                    accumulate_if(&nodes, &mut grads, *a, &ga);
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    targets,
                    active,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let classes = probs.len() / active.len();
                    let scale = g[0] / *count as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (row, &on) in active.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let span = row * classes..(row + 1) * classes;
                        for ((o, p), t) in gl[span.clone()]
                            .iter_mut()
                            .zip(&probs[span.clone()])
                            .zip(&targets[span])
                        {
                            *o = (p - t) * scale;
                        }
                    }
                    accumulate_if(&nodes, &mut grads, *logits, &gl);
                }
                Op::Custom { inputs, backward } => {
                    let upstream = DenseArray::from_parts(node.value.shape().to_vec(), g);
                    let local = backward(&upstream);
                    assert_eq!(local.len(), inputs.len(), "custom backward arity");
                    for (&input, gi) in inputs.iter().zip(&local) {
                        assert_eq!(
                            gi.shape(),
                            nodes[input].value.shape(),
                            "custom backward gradient shape"
                        );
                        accumulate_if(&nodes, &mut grads, input, gi.data());
                    }
                }
            }
        }

        // Only trainable leaves keep their gradient for the caller.
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    finite(g, node.value.shape().to_vec(), "gradient").map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { grads })
    }
}

fn dim_err(op: &'static str, a: &DenseArray, b: &DenseArray) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, g: &[f64]) {
    match &mut grads[index] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(nodes: &[Node], grads: &mut [Option<Vec<f64>>], index: usize, g: &[f64]) {
    if nodes[index].needs_grad {
        accumulate(grads, index, g);
    }
}

/// Gradients of the trainable leaves reached by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&DenseArray> {
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, DenseArray> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.index].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(ElementwiseOp::Add, self, Some(other))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(ElementwiseOp::Sub, self, Some(other))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.elementwise(ElementwiseOp::Mul, self, Some(other))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.elementwise(ElementwiseOp::Relu, self, None)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.elementwise(ElementwiseOp::Scale(c), self, None)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.sum(self)
    }
}
