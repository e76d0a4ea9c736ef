//! Dense f64 tensors and a define-by-run reverse-mode graph.
//!
//! Tensors are rank 0, 1 or 2. A [`Graph`] records every operation as it is
//! evaluated; [`Graph::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every tensor in a [`ParamStore`].
//! The only implicit broadcast is adding a vector to each row of a matrix.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", &[&shape]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; parameters the loss does not
/// reach hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    Concat,
    StackRows,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Negate,
    Embedding,
    Slice,
    Row,
    Pick,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Negate(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Slice { x: Var, start: usize, end: usize },
    Row(Var, usize),
    Pick(Var, usize),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log(_) => OpKind::Log,
            Op::Negate(_) => OpKind::Negate,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Slice { .. } => OpKind::Slice,
            Op::Row(..) => OpKind::Row,
            Op::Pick(..) => OpKind::Pick,
            Op::Sum(_) => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) | Op::StackRows(xs) => xs.clone(),
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Negate(x)
            | Op::Row(x, _)
            | Op::Pick(x, _)
            | Op::Sum(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A computation graph recorded in evaluation order.
///
/// Nodes can only reference earlier nodes, so the construction order is a
/// topological order and backward is a single reverse sweep.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input ids of a node; every id is smaller than `v`'s own.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), self.params.get(id).clone());
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A constant copy of `x`'s value; gradient does not flow through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let out = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = &ta.data[i * k..(i + 1) * k];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for (p, &av) in row.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &tb.data[p * n..(p + 1) * n];
                        for (d, &bv) in dst.iter_mut().zip(brow) {
                            *d += av * bv;
                        }
                    }
                }
                Tensor { shape: vec![m, n], data: out }
            }
            (2, 1) if sa[1] == sb[0] => {
                let (m, k) = (sa[0], sa[1]);
                let out = (0..m)
                    .map(|i| dot(&ta.data[i * k..(i + 1) * k], &tb.data))
                    .collect();
                Tensor { shape: vec![m], data: out }
            }
            (1, 2) if sa[0] == sb[0] => {
                let n = sb[1];
                let mut out = vec![0.0; n];
                for (p, &av) in ta.data.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (d, &bv) in out.iter_mut().zip(&tb.data[p * n..(p + 1) * n]) {
                        *d += av * bv;
                    }
                }
                Tensor { shape: vec![n], data: out }
            }
            _ => return Err(Error::shape("matmul", &[sa, sb])),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Element-wise sum; `b` may also be a vector added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect()
        } else if ta.shape.len() == 2 && tb.shape.len() == 1 && ta.shape[1] == tb.shape[0] {
            let n = tb.len();
            ta.data
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data[i % n])
                .collect()
        } else {
            return Err(Error::shape("add", &[ta.shape(), tb.shape()]));
        };
        let shape = ta.shape.clone();
        Ok(self.push(Op::Add(a, b), Tensor { shape, data: out }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.negate(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("mul", &[ta.shape(), tb.shape()]));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Op::Mul(a, b), Tensor { shape, data }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * factor).collect();
        let shape = t.shape.clone();
        self.push(Op::Scale(x, factor), Tensor { shape, data })
    }

    /// Concatenates along the last axis. Matrices must agree on row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rank = self.shape(*first).len();
        let rows = self.value(*first).rows();
        if rank == 0
            || xs.iter().any(|&x| {
                let t = self.value(x);
                t.shape.len() != rank || t.rows() != rows
            })
        {
            let shapes: Vec<&[usize]> = xs.iter().map(|&x| self.shape(x)).collect();
            return Err(Error::shape("concat_last_axis", &shapes));
        }
        let width: usize = xs.iter().map(|&x| self.value(x).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &x in xs {
                let t = self.value(x);
                let w = t.last_dim();
                data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![width] } else { vec![rows, width] };
        Ok(self.push(Op::Concat(xs.to_vec()), Tensor { shape, data }))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 1 || xs.iter().any(|&x| self.shape(x) != s0.as_slice()) {
            let shapes: Vec<&[usize]> = xs.iter().map(|&x| self.shape(x)).collect();
            return Err(Error::shape("stack_rows", &shapes));
        }
        let mut data = Vec::with_capacity(xs.len() * s0[0]);
        for &x in xs {
            data.extend_from_slice(&self.value(x).data);
        }
        let shape = vec![xs.len(), s0[0]];
        Ok(self.push(Op::StackRows(xs.to_vec()), Tensor { shape, data }))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        self.push(op, Tensor { shape, data })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn negate(&mut self, x: Var) -> Var {
        self.unary(x, Op::Negate(x), |v| -v)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.is_empty() {
            return Err(Error::shape("softmax_last_axis", &[t.shape()]));
        }
        let w = t.last_dim();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data.chunks(w) {
            data.extend(softmax_slice(row));
        }
        let shape = t.shape.clone();
        Ok(self.push(Op::Softmax(x), Tensor { shape, data }))
    }

    /// Gathers rows of `table` into an `[ids.len(), width]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding_lookup", &[t.shape()]));
        }
        let (v, w) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, size: v });
        }
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&t.data[i * w..(i + 1) * w]);
        }
        let shape = vec![ids.len(), w];
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor { shape, data },
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        if t.shape.is_empty() || start >= end || end > w {
            return Err(Error::shape("slice", &[t.shape(), &[start, end]]));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for row in t.data.chunks(w) {
            data.extend_from_slice(&row[start..end]);
        }
        let shape = if t.shape.len() == 1 {
            vec![end - start]
        } else {
            vec![t.shape[0], end - start]
        };
        Ok(self.push(Op::Slice { x, start, end }, Tensor { shape, data }))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 || i >= t.shape[0] {
            return Err(Error::shape("row", &[t.shape(), &[i]]));
        }
        let w = t.shape[1];
        let data = t.data[i * w..(i + 1) * w].to_vec();
        Ok(self.push(Op::Row(x, i), Tensor { shape: vec![w], data }))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 1 || i >= t.shape[0] {
            return Err(Error::shape("pick", &[t.shape(), &[i]]));
        }
        let v = t.data[i];
        Ok(self.push(Op::Pick(x, i), Tensor::scalar(v)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::InvalidArgument("sum of nothing".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (g, d) in out.grads[id.0].data.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (sa, sb) = (&ta.shape, &tb.shape);
                    match (sa.len(), sb.len()) {
                        (2, 2) => {
                            let (m, k, n) = (sa[0], sa[1], sb[1]);
                            {
                                let da = acc(&mut grads, *a, ta.len());
                                for i in 0..m {
                                    let drow = &dy[i * n..(i + 1) * n];
                                    for p in 0..k {
                                        da[i * k + p] += dot(drow, &tb.data[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                            let db = acc(&mut grads, *b, tb.len());
                            for i in 0..m {
                                let drow = &dy[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let av = ta.data[i * k + p];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                        *d += av * g;
                                    }
                                }
                            }
                        }
                        (2, 1) => {
                            let (m, k) = (sa[0], sa[1]);
                            {
                                let da = acc(&mut grads, *a, ta.len());
                                for i in 0..m {
                                    let g = dy[i];
                                    for (d, &bv) in da[i * k..(i + 1) * k].iter_mut().zip(&tb.data) {
                                        *d += g * bv;
                                    }
                                }
                            }
                            let db = acc(&mut grads, *b, tb.len());
                            for i in 0..m {
                                let g = dy[i];
                                if g == 0.0 {
                                    continue;
                                }
                                for (d, &av) in db.iter_mut().zip(&ta.data[i * k..(i + 1) * k]) {
                                    *d += g * av;
                                }
                            }
                        }
                        (1, 2) => {
                            let n = sb[1];
                            {
                                let da = acc(&mut grads, *a, ta.len());
                                for (p, d) in da.iter_mut().enumerate() {
                                    *d += dot(&dy, &tb.data[p * n..(p + 1) * n]);
                                }
                            }
                            let db = acc(&mut grads, *b, tb.len());
                            for (p, &av) in ta.data.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(&dy) {
                                    *d += av * g;
                                }
                            }
                        }
                        _ => unreachable!("matmul shapes checked on construction"),
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy);
                    let nb = self.value(*b).len();
                    let db = acc(&mut grads, *b, nb);
                    if nb == dy.len() {
                        add_into(db, &dy);
                    } else {
                        for row in dy.chunks(nb) {
                            add_into(db, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    {
                        let da = acc(&mut grads, *a, dy.len());
                        for ((d, g), bv) in da.iter_mut().zip(&dy).zip(&tb.data) {
                            *d += g * bv;
                        }
                    }
                    let db = acc(&mut grads, *b, dy.len());
                    for ((d, g), av) in db.iter_mut().zip(&dy).zip(&ta.data) {
                        *d += g * av;
                    }
                }
                Op::Scale(x, f) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    for (d, g) in dx.iter_mut().zip(&dy) {
                        *d += g * f;
                    }
                }
                Op::Concat(xs) => {
                    let rows = y.rows();
                    let width = y.last_dim();
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.value(x).last_dim();
                        let dx = acc(&mut grads, x, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dx[r * w..(r + 1) * w],
                                &dy[r * width + offset..r * width + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::StackRows(xs) => {
                    let w = y.last_dim();
                    for (r, &x) in xs.iter().enumerate() {
                        add_into(acc(&mut grads, x, w), &dy[r * w..(r + 1) * w]);
                    }
                }
                Op::Tanh(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    for ((d, g), yv) in dx.iter_mut().zip(&dy).zip(&y.data) {
                        *d += g * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    for ((d, g), yv) in dx.iter_mut().zip(&dy).zip(&y.data) {
                        *d += g * yv * (1.0 - yv);
                    }
                }
                Op::Softmax(x) => {
                    let w = y.last_dim();
                    let dx = acc(&mut grads, *x, dy.len());
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(w).zip(dy.chunks(w)).zip(y.data.chunks(w))
                    {
                        let inner = dot(grow, yrow);
                        for ((d, g), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (g - inner);
                        }
                    }
                }
                Op::Log(x) => {
                    let xv = &self.value(*x).data;
                    let dx = acc(&mut grads, *x, dy.len());
                    for ((d, g), v) in dx.iter_mut().zip(&dy).zip(xv) {
                        *d += g / v;
                    }
                }
                Op::Negate(x) => {
                    let dx = acc(&mut grads, *x, dy.len());
                    for (d, g) in dx.iter_mut().zip(&dy) {
                        *d -= g;
                    }
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let w = t.shape[1];
                    let dt = acc(&mut grads, *table, t.len());
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * w..(i + 1) * w], &dy[r * w..(r + 1) * w]);
                    }
                }
                Op::Slice { x, start, end } => {
                    let t = self.value(*x);
                    let (w, sw) = (t.last_dim(), end - start);
                    let dx = acc(&mut grads, *x, t.len());
                    for (r, g) in dy.chunks(sw).enumerate() {
                        add_into(&mut dx[r * w + start..r * w + end], g);
                    }
                }
                Op::Row(x, i) => {
                    let t = self.value(*x);
                    let w = t.last_dim();
                    let dx = acc(&mut grads, *x, t.len());
                    add_into(&mut dx[i * w..(i + 1) * w], &dy);
                }
                Op::Pick(x, i) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n)[*i] += dy[0];
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    for d in acc(&mut grads, *x, n) {
                        *d += dy[0];
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.add(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.tanh(x);
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_hand_product() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let v = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, v), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(g.mul(a, v), Err(Error::Shape { op: "mul", .. })));
    }

    #[test]
    fn square_gradient() {
        let (s, ids) = store_with(&[("w", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&s);
        let w = g.param(ids[0]);
        let l = g.mul(w, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[0]).item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let (s, ids) = store_with(&[("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let y = g.softmax(x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        for &d in grads.get(ids[0]).data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        // x = (1, 2, 3), k = 1: softmax = e^x / (e + e^2 + e^3)
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let e3 = 3f64.exp();
        let z = e1 + e2 + e3;
        let expected = [e1 / z, e2 / z - 1.0, e3 / z];

        let (s, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let p = g.softmax(x).unwrap();
        let pk = g.pick(p, 1).unwrap();
        let lp = g.log(pk);
        let l = g.negate(lp);
        let grads = g.backward(l).unwrap();
        for (d, e) in grads.get(ids[0]).data().iter().zip(expected) {
            assert!((d - e).abs() < 1e-14, "{d} vs {e}");
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (s, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let (s, ids) = store_with(&[
            ("a", Tensor::scalar(2.0)),
            ("b", Tensor::vector(vec![1.0, 1.0])),
        ]);
        let mut g = Graph::new(&s);
        let a = g.param(ids[0]);
        let l = g.scale(a, 4.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[0]).item(), 4.0);
        assert_eq!(grads.get(ids[1]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        let a2 = g.slice(c, 0, 2).unwrap();
        let b2 = g.slice(c, 2, 5).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn graph_inputs_precede_nodes() {
        let (s, ids) = store_with(&[("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&s);
        let w = g.param(ids[0]);
        let t = g.tanh(w);
        let c = g.concat(&[t, w]).unwrap();
        let l = g.sum(c);
        for v in [w, t, c, l] {
            assert!(g.inputs(v).iter().all(|i| i.0 < v.0));
        }
        assert_eq!(g.kind(c), OpKind::Concat);
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let (s, ids) = store_with(&[
            ("m", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let mut g = Graph::new(&s);
        let m = g.param(ids[0]);
        let b = g.param(ids[1]);
        let y = g.add(m, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[1]).data(), &[2.0, 2.0]);
    }
}
