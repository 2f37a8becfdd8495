//! Dense f64 tensors, a reverse-mode differentiation tape, and plain SGD.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Tapes
//! never borrow the [`ParamStore`]: parameter values are copied onto the tape
//! when first referenced, and [`Tape::backward`] writes accumulated gradients
//! back into the store. One sentence is one tape.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probability floor applied before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A dense row-major tensor. Rank 0 (shape `[]`) is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named learnable parameters plus the global update counter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    tensors: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Register a trainable parameter.
    pub fn add_trainable(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.add(name, tensor.with_grad(true))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access to a parameter's values. The shape cannot change.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        let t = &mut self.tensors[id.0];
        t.requires_grad = on;
        if !on {
            t.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Discard any populated gradients.
    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    fn grad_buffer(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        let t = &mut self.tensors[id.0];
        if !t.requires_grad {
            return None;
        }
        let n = t.values.len();
        Some(t.grad.get_or_insert_with(|| vec![0.0; n]))
    }

    /// Copy values (not gradients) from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::State("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape != src.shape {
                return Err(Error::State("parameter shapes differ".into()));
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

/// Learning rate after `step` updates: `lr0 / (1 + decay * step)`.
pub fn learning_rate(lr0: f64, decay: f64, step: u64) -> f64 {
    lr0 / (1.0 + decay * step as f64)
}

/// One SGD update over every trainable parameter, then zero the gradients.
///
/// Returns the learning rate that was applied.
pub fn sgd_step(store: &mut ParamStore, lr0: f64, decay: f64) -> Result<f64> {
    if !(lr0 > 0.0) || !lr0.is_finite() {
        return Err(Error::domain("sgd_step", format!("lr0 must be positive, got {lr0}")));
    }
    if !(decay >= 0.0) {
        return Err(Error::domain("sgd_step", format!("decay must be >= 0, got {decay}")));
    }
    for (i, t) in store.tensors.iter().enumerate() {
        if t.requires_grad && t.grad.is_none() {
            return Err(Error::State(format!(
                "no gradient populated for parameter {:?}",
                store.names[i]
            )));
        }
    }
    let lr = learning_rate(lr0, decay, store.step);
    for t in &mut store.tensors {
        if let Some(g) = t.grad.take() {
            for (w, d) in t.values.iter_mut().zip(&g) {
                *w -= lr * d;
            }
        }
    }
    store.step += 1;
    Ok(lr)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Element-wise primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Add,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    ParamRow { param: ParamId, row: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Mask(Var, Vec<f64>),
    SumN(Vec<Var>),
    SumElems(Var),
    Dot(Var, Var),
    Softmax(Var),
    CrossEntropy { probs: Var, gold: usize },
    AverageRows { input: Var, rows: usize },
    MaxOverTime { input: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a scalar (or length-1) node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input. Constants never receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Constant, false)
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Result<Var> {
        if values.is_empty() {
            return Err(Error::dim("vector", "empty vector"));
        }
        let n = values.len();
        Ok(self.push(vec![n], values, Op::Constant, false))
    }

    pub fn zeros(&mut self, n: usize) -> Result<Var> {
        self.vector(vec![0.0; n])
    }

    /// Reference a whole parameter. Repeated references share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.values.clone(), Op::Param(id), t.requires_grad);
        self.params.insert(id, v);
        v
    }

    /// Reference one row of a rank-2 parameter (embedding lookup).
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Result<Var> {
        let t = store.get(id);
        if t.shape.len() != 2 {
            return Err(Error::dim("param_row", format!("expected rank 2, got {}", shape_str(&t.shape))));
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        if row >= rows {
            return Err(Error::Index {
                op: "param_row",
                index: row,
                len: rows,
            });
        }
        let value = t.values[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], value, Op::ParamRow { param: id, row }, t.requires_grad))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`; a rank-1 right operand is a column.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::dim("matmul", format!("cannot multiply {} by {}", shape_str(&sa), shape_str(&sb)));
        if sa.len() != 2 {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n, out_shape) = match sb.len() {
            1 => (sb[0], 1, vec![m]),
            2 => (sb[0], sb[1], vec![m, sb[1]]),
            _ => return Err(bad()),
        };
        if kb != k {
            return Err(bad());
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out_shape, out, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {} and {} differ", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    /// Apply an element-wise primitive. Unary kinds take one operand, binary kinds two.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        match (kind, args) {
            (Elementwise::Sigmoid, [a]) => Ok(self.sigmoid(*a)),
            (Elementwise::Tanh, [a]) => Ok(self.tanh(*a)),
            (Elementwise::Add, [a, b]) => self.add(*a, *b),
            (Elementwise::Mul, [a, b]) => self.mul(*a, *b),
            _ => Err(Error::dim(
                "elementwise",
                format!("{kind:?} does not take {} operands", args.len()),
            )),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Tanh(a), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, factor), ng)
    }

    /// Multiply by a fixed (non-differentiable) mask of the same length.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("mask", format!("mask length {} for {}", mask.len(), shape_str(self.shape(a)))));
        }
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mask(a, mask), ng))
    }

    /// Sum of several same-shape operands.
    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::domain("sum_n", "no operands"));
        };
        let mut value = self.value(first).to_vec();
        for &p in &parts[1..] {
            self.same_shape("sum_n", first, p)?;
            for (o, x) in value.iter_mut().zip(self.value(p)) {
                *o += x;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(self.shape(first).to_vec(), value, Op::SumN(parts.to_vec()), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s], Op::SumElems(a), ng)
    }

    /// Inner product of two same-length vectors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Vec::new(), vec![s], Op::Dot(a, b), ng))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        if x.is_empty() || self.shape(logits).len() > 1 {
            return Err(Error::domain("softmax", format!("need a non-empty vector, got {}", shape_str(self.shape(logits)))));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("softmax", "non-finite logit"));
        }
        let value = softmax(x);
        let n = value.len();
        let ng = self.ng(logits);
        Ok(self.push(vec![n], value, Op::Softmax(logits), ng))
    }

    /// `-ln(max(probs[gold], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, gold: usize) -> Result<Var> {
        let p = self.value(probs);
        if gold >= p.len() {
            return Err(Error::Index {
                op: "cross_entropy",
                index: gold,
                len: p.len(),
            });
        }
        let loss = -p[gold].max(PROB_FLOOR).ln();
        let ng = self.ng(probs);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { probs, gold }, ng))
    }

    /// Column-wise mean of a `[l, d]` matrix.
    pub fn average_rows(&mut self, rows: Var) -> Result<Var> {
        let (l, d) = self.matrix_dims("average_rows", rows)?;
        let x = self.value(rows);
        let mut out = vec![0.0; d];
        for r in 0..l {
            for (o, v) in out.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        let ng = self.ng(rows);
        Ok(self.push(vec![d], out, Op::AverageRows { input: rows, rows: l }, ng))
    }

    /// Column-wise max of a `[t, m]` matrix; the first maximal row wins ties.
    pub fn max_over_time(&mut self, features: Var) -> Result<Var> {
        let (t, m) = self.matrix_dims("max_over_time", features)?;
        let x = self.value(features);
        let mut out = x[..m].to_vec();
        let mut argmax = vec![0usize; m];
        for r in 1..t {
            for c in 0..m {
                let v = x[r * m + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.ng(features);
        Ok(self.push(vec![m], out, Op::MaxOverTime { input: features, argmax }, ng))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            ref s => Err(Error::domain(op, format!("expected a matrix, got {}", shape_str(s)))),
        }
    }

    /// Concatenate scalars and vectors in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no parts"));
        }
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(Error::dim("concat", format!("part of rank {} ({})", self.shape(p).len(), shape_str(self.shape(p)))));
            }
            value.extend_from_slice(self.value(p));
        }
        if parts.len() == 1 && self.shape(parts[0]).len() == 1 {
            return Ok(parts[0]);
        }
        let n = value.len();
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![n], value, Op::Concat(parts.to_vec()), ng))
    }

    /// Stack same-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::domain("stack_rows", "no rows"));
        };
        let d = self.value(first).len();
        let mut value = Vec::with_capacity(d * rows.len());
        for &r in rows {
            if self.shape(r).len() != 1 || self.value(r).len() != d {
                return Err(Error::dim("stack_rows", format!("row {} does not have width {d}", shape_str(self.shape(r)))));
            }
            value.extend_from_slice(self.value(r));
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(vec![rows.len(), d], value, Op::StackRows(rows.to_vec()), ng))
    }

    /// Propagate d(loss)/d(node) back through the tape and add the parameter
    /// gradients into `store`. Every trainable parameter ends up with a
    /// populated gradient (zero when unreachable).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 || !self.nodes[loss.0].shape.is_empty() {
            return Err(Error::domain(
                "backward",
                format!("loss must be a scalar, got {}", shape_str(&self.nodes[loss.0].shape)),
            ));
        }
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_buffer(id);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if let Some(buf) = store.grad_buffer(*id) {
                        for (b, d) in buf.iter_mut().zip(&g) {
                            *b += d;
                        }
                    }
                }
                Op::ParamRow { param, row } => {
                    let w = g.len();
                    if let Some(buf) = store.grad_buffer(*param) {
                        for (b, d) in buf[row * w..(row + 1) * w].iter_mut().zip(&g) {
                            *b += d;
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, &d);
                    }
                    if self.ng(*b) {
                        let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, &d);
                    }
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Scale(a, f) => {
                    let d: Vec<f64> = g.iter().map(|x| x * f).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Mask(a, mask) => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::SumN(parts) => {
                    for &p in parts {
                        if self.ng(p) {
                            accumulate(&mut grads, p, &g);
                        }
                    }
                }
                Op::SumElems(a) => {
                    let d = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &d);
                }
                Op::Dot(a, b) => {
                    if self.ng(*a) {
                        let d: Vec<f64> = self.value(*b).iter().map(|y| g[0] * y).collect();
                        accumulate(&mut grads, *a, &d);
                    }
                    if self.ng(*b) {
                        let d: Vec<f64> = self.value(*a).iter().map(|x| g[0] * x).collect();
                        accumulate(&mut grads, *b, &d);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(x, p)| x * p).sum();
                    let d: Vec<f64> = g.iter().zip(y).map(|(x, p)| p * (x - gy)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::CrossEntropy { probs, gold } => {
                    let p = self.value(*probs);
                    let mut d = vec![0.0; p.len()];
                    if p[*gold] >= PROB_FLOOR {
                        d[*gold] = -g[0] / p[*gold];
                    }
                    accumulate(&mut grads, *probs, &d);
                }
                Op::AverageRows { input, rows } => {
                    let scale = 1.0 / *rows as f64;
                    let mut d = Vec::with_capacity(g.len() * rows);
                    for _ in 0..*rows {
                        d.extend(g.iter().map(|x| x * scale));
                    }
                    accumulate(&mut grads, *input, &d);
                }
                Op::MaxOverTime { input, argmax } => {
                    let m = g.len();
                    let mut d = vec![0.0; self.value(*input).len()];
                    for (c, &r) in argmax.iter().enumerate() {
                        d[r * m + c] = g[c];
                    }
                    accumulate(&mut grads, *input, &d);
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.ng(p) {
                            accumulate(&mut grads, p, &g[off..off + n]);
                        }
                        off += n;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(d) {
                *b += x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain softmax with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter block; blocks at or below this size are checked fully.
    pub coords_per_block: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            epsilon: 1e-5,
            coords_per_block: 16,
            seed: 0,
        }
    }
}

/// Result of checking one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    /// `None` when the block is frozen and was skipped.
    pub max_rel_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub blocks: Vec<BlockCheck>,
}

impl FdReport {
    /// Maximum relative error over all checked blocks.
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .filter_map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn by_name(&self) -> BTreeMap<&str, Option<f64>> {
        self.blocks.iter().map(|b| (b.name.as_str(), b.max_rel_error)).collect()
    }
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare tape gradients against central finite differences.
///
/// `f` builds the loss on a fresh tape from the current store values and must
/// be deterministic. Gradients already in `store` are discarded.
pub fn finite_diff_check<F>(mut f: F, store: &mut ParamStore, opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.clear_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !store.get(id).requires_grad() {
            report.blocks.push(BlockCheck {
                name,
                checked: 0,
                max_rel_error: None,
            });
            continue;
        }
        let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let n = analytic.len();
        let coords: Vec<usize> = if n <= opts.coords_per_block {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = store.get(id).values()[c];
            store.values_mut(id)[c] = orig + opts.epsilon;
            let plus = eval(store)?;
            store.values_mut(id)[c] = orig - opts.epsilon;
            let minus = eval(store)?;
            store.values_mut(id)[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            worst = worst.max(relative_error(analytic[c], numeric));
        }
        report.blocks.push(BlockCheck {
            name,
            checked: coords.len(),
            max_rel_error: Some(worst),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(t: &mut Tape, rows: usize, cols: usize, v: &[f64]) -> Var {
        t.constant(Tensor::new(vec![rows, cols], v.to_vec()).unwrap())
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn tensor_shape_law() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Dimension { .. })));
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let id = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = t.matmul(id, m).unwrap();
        assert_eq!(t.value(r), &[1.0, 2.0, 3.0, 4.0]);

        let col = mat(&mut t, 2, 1, &[5.0, 6.0]);
        let r = t.matmul(m, col).unwrap();
        assert_eq!(t.shape(r), &[2, 1]);
        assert_eq!(t.value(r), &naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1)[..]);
        assert_eq!(t.value(r), &[17.0, 39.0]);

        let z = mat(&mut t, 2, 2, &[0.0; 4]);
        let r = t.matmul(z, m).unwrap();
        assert_eq!(t.value(r), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 3, &[0.0; 6]);
        let b = mat(&mut t, 2, 2, &[0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let z = t.vector(vec![0.0]).unwrap();
        let s = t.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        let h = t.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(t.value(s), &[0.5]);
        assert_eq!(t.value(h), &[0.0]);
        let a = t.vector(vec![2.0, 3.0]).unwrap();
        let b = t.vector(vec![4.0, 5.0]).unwrap();
        let m = t.elementwise(Elementwise::Mul, &[a, b]).unwrap();
        assert_eq!(t.value(m), &[2.0 * 4.0, 3.0 * 5.0]);
        assert!(matches!(t.add(a, z), Err(Error::Dimension { .. })));
        assert!(t.elementwise(Elementwise::Add, &[a]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 1.0, 1.0]).unwrap();
        let p = t.softmax(x).unwrap();
        for v in t.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.vector(vec![3.0, 3.0 + 1e4]).unwrap();
        let p = t.softmax(x).unwrap();
        assert!(t.value(p)[0] < 1e-300 && (t.value(p)[1] - 1.0).abs() < 1e-15);
        let x = t.vector(vec![0.0, 3f64.ln()]).unwrap();
        let p = t.softmax(x).unwrap();
        assert!((t.value(p)[0] - 0.25).abs() < 1e-15);
        assert!((t.value(p)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_and_nonfinite() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::scalar(1.0));
        let m = mat(&mut t, 1, 2, &[0.0, f64::NAN]);
        assert!(t.softmax(m).is_err());
        // a scalar is a length-one input
        assert_eq!({ let v = t.softmax(s).unwrap(); t.value(v) }, &[1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let p = t.vector(vec![1.0, 0.0, 0.0]).unwrap();
        let l = t.cross_entropy(p, 0).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let u = t.vector(vec![0.25; 4]).unwrap();
        assert!(({ let v = t.cross_entropy(u, 3).unwrap(); t.scalar(v) } - 4f64.ln()).abs() < 1e-15);
        let p = t.vector(vec![0.25, 0.75]).unwrap();
        assert!(({ let v = t.cross_entropy(p, 1).unwrap(); t.scalar(v) } + 0.75f64.ln()).abs() < 1e-15);
        assert!(matches!(t.cross_entropy(p, 2), Err(Error::Index { .. })));
        let z = t.vector(vec![0.0, 1.0]).unwrap();
        assert!(({ let v = t.cross_entropy(z, 0).unwrap(); t.scalar(v) } - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn average_and_max_examples() {
        let mut t = Tape::new();
        let one = mat(&mut t, 1, 2, &[4.0, 5.0]);
        assert_eq!({ let v = t.average_rows(one).unwrap(); t.value(v) }, &[4.0, 5.0]);
        let sym = mat(&mut t, 2, 2, &[0.0, 2.0, 2.0, 0.0]);
        assert_eq!({ let v = t.average_rows(sym).unwrap(); t.value(v) }, &[1.0, 1.0]);
        let three = mat(&mut t, 3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!({ let v = t.average_rows(three).unwrap(); t.value(v) }, &[2.0, 2.0]);

        assert_eq!({ let v = t.max_over_time(one).unwrap(); t.value(v) }, &[4.0, 5.0]);
        let m = mat(&mut t, 2, 2, &[1.0, 5.0, 3.0, 2.0]);
        assert_eq!({ let v = t.max_over_time(m).unwrap(); t.value(v) }, &[3.0, 5.0]);
    }

    #[test]
    fn max_over_time_ties_route_to_first_row() {
        let mut store = ParamStore::new();
        let w = store
            .add_trainable("w", Tensor::new(vec![3, 2], vec![7.0; 6]).unwrap())
            .unwrap();
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let m = t.max_over_time(x).unwrap();
        assert_eq!(t.value(m), &[7.0, 7.0]);
        let s = t.sum(m);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_reductions_are_domain_errors() {
        let mut t = Tape::new();
        assert!(matches!(t.stack_rows(&[]), Err(Error::Domain { .. })));
        assert!(matches!(t.sum_n(&[]), Err(Error::Domain { .. })));
        assert!(matches!(t.concat(&[]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]).unwrap();
        let b = t.vector(vec![3.0]).unwrap();
        assert_eq!(t.concat(&[a]).unwrap(), a);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
        let m = mat(&mut t, 2, 2, &[0.0; 4]);
        assert!(matches!(t.concat(&[a, m]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_gradient_splits_back() {
        let mut store = ParamStore::new();
        let a = store.add_trainable("a", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap()).unwrap();
        let b = store.add_trainable("b", Tensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
        let report = finite_diff_check(
            |s, t| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let c = t.concat(&[a, b])?;
                let w = t.vector(vec![1.0, 2.0, 3.0])?;
                let y = t.mul(c, w)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &mut store,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let unused = store.add_trainable("unused", Tensor::zeros(vec![2]).unwrap()).unwrap();
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let s = t.sum(x);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.get(unused).grad().unwrap(), &[0.0, 0.0]);

        let mut store = ParamStore::new();
        let w = store.add_trainable("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let y = t.sigmoid(x);
        let y = t.sum(y);
        t.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let v = t.vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(v, &mut store), Err(Error::Domain { .. })));
    }

    #[test]
    fn reuse_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        let y = t.mul(a, b).unwrap();
        let y = t.sum(y);
        t.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[6.0]);
    }

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        assert!(matches!(sgd_step(&mut store, 0.1, 0.0), Err(Error::State(_))));

        let mut t = Tape::new();
        let x = t.param(&store, w);
        let y = t.scale(x, 2.0);
        let y = t.sum(y);
        t.backward(y, &mut store).unwrap();
        let lr = sgd_step(&mut store, 0.1, 0.0).unwrap();
        assert_eq!(lr, 0.1);
        assert!((store.get(w).values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.step(), 1);
        assert!(store.get(w).grad().is_none());

        // zero gradient: unchanged weights, step still advances
        let mut t = Tape::new();
        let c = t.vector(vec![1.0]).unwrap();
        let y = t.sum(c);
        t.backward(y, &mut store).unwrap();
        let before = store.get(w).values().to_vec();
        sgd_step(&mut store, 0.1, 0.0).unwrap();
        assert_eq!(store.get(w).values(), &before[..]);
        assert_eq!(store.step(), 2);

        assert!(sgd_step(&mut store, -1.0, 0.0).is_err());
        assert!(sgd_step(&mut store, 0.1, -1.0).is_err());
    }

    #[test]
    fn decay_schedule_closed_form() {
        assert!((learning_rate(0.05, 1e-4, 1_000_000) - 0.05 / 101.0).abs() < 1e-18);
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let report = finite_diff_check(
            |s, t| {
                let x = t.param(s, w);
                let y = t.mul(x, x)?;
                let y = t.scale(y, 3.0);
                Ok(t.sum(y))
            },
            &mut store,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8);

        let report = finite_diff_check(
            |_, t| {
                let c = t.vector(vec![2.0])?;
                Ok(t.sum(c))
            },
            &mut store,
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn frozen_blocks_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("frozen", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let report = finite_diff_check(
            |s, t| {
                let x = t.param(s, w);
                Ok(t.sum(x))
            },
            &mut store,
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(report.blocks[0].max_rel_error, None);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut store = ParamStore::new();
        let w = store
            .add_trainable("w", Tensor::new(vec![3, 2], vec![0.4, -0.3, 0.2, 0.9, -0.5, 0.1]).unwrap())
            .unwrap();
        let v = store.add_trainable("v", Tensor::new(vec![3], vec![0.3, -0.6, 0.8]).unwrap()).unwrap();
        let report = finite_diff_check(
            |s, t| {
                let w = t.param(s, w);
                let v = t.param(s, v);
                let x = t.vector(vec![1.0, -2.0])?;
                let h = t.matmul(w, x)?;
                let h = t.tanh(h);
                let h = t.add(h, v)?;
                let rows = t.stack_rows(&[h, v])?;
                let m = t.max_over_time(rows)?;
                let a = t.average_rows(rows)?;
                let z = t.concat(&[m, a])?;
                let p = t.softmax(z)?;
                t.cross_entropy(p, 2)
            },
            &mut store,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let w = store
                .add_trainable("w", Tensor::new(vec![2, 2], vec![0.1, 0.7, -0.3, 0.2]).unwrap())
                .unwrap();
            let mut t = Tape::new();
            let p = t.param(&store, w);
            let x = t.vector(vec![0.5, -1.0]).unwrap();
            let y = t.matmul(p, x).unwrap();
            let y = t.sigmoid(y);
            let pr = t.softmax(y).unwrap();
            let l = t.cross_entropy(pr, 0).unwrap();
            t.backward(l, &mut store).unwrap();
            store.get(w).grad().unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
                let p = softmax(&xs);
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0));
            }

            #[test]
            fn max_pool_gradient_is_a_routing_mask(
                rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()
            ) {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2..3) as f64).collect();
                let mut store = ParamStore::new();
                let w = store.add_trainable("w", Tensor::new(vec![rows, cols], vals).unwrap()).unwrap();
                let mut t = Tape::new();
                let x = t.param(&store, w);
                let m = t.max_over_time(x).unwrap();
                let s = t.sum(m);
                t.backward(s, &mut store).unwrap();
                let g = store.get(w).grad().unwrap();
                for c in 0..cols {
                    let col: Vec<f64> = (0..rows).map(|r| g[r * cols + c]).collect();
                    prop_assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
                    prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
                }
            }
        }
    }
}
