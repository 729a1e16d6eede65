//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. It borrows the parameter
//! store read-only, records each operation as a node, and [`Tape::backward`]
//! replays the record in reverse to produce gradients for every reachable
//! node and parameter. Parameter gradients are returned as [`ParamGrads`]
//! rather than written in place, so several tapes can run against the same
//! parameters concurrently and be reduced afterwards in a fixed order.
//!
//! Every value is viewed as a matrix; row vectors are `1 × n`, scalars
//! are `1 × 1`.

use std::collections::BTreeMap;

use crate::error::{FitError, Result};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Lookup { param: ParamId, row: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    Dot(Var, Var),
    AddN(Vec<Var>),
    Bce { p: Var, label: f64 },
    BceSum { p: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    // Empty for `Op::Param`; the value lives in the parameter store.
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a node copied out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. It receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(FitError::dims("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let t = self.params.get(id);
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, Vec::new(), Op::Param(id), t.requires_grad))
    }

    /// Row `row` of a parameter matrix as a `1 × cols` vector. The gradient
    /// flows back to that row only.
    pub fn lookup(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let t = self.params.get(id);
        let (r, c) = t.dims2()?;
        if row >= r {
            return Err(FitError::Index {
                what: format!("embedding dictionary {}", self.params.name(id)),
                index: row,
                size: r,
            });
        }
        let value = t.row_slice(row).to_vec();
        Ok(self.push(1, c, value, Op::Lookup { param: id, row }, t.requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(FitError::dims("matmul", &[m, k], &[k2, n]));
        }
        let out = mm(self.value(a), self.value(b), m, k, n);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), g))
    }

    /// Elementwise sum of equal shapes, or `m × n` plus a `1 × n` row
    /// broadcast over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sb = self.shape(b);
        let g = self.needs(a) || self.needs(b);
        if sb == (m, n) {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| x + y)
                .collect();
            Ok(self.push(m, n, out, Op::Add(a, b), g))
        } else if sb == (1, n) {
            let bias = self.value(b).to_vec();
            let mut out = self.value(a).to_vec();
            for row in out.chunks_mut(n.max(1)) {
                row.iter_mut().zip(&bias).for_each(|(x, y)| *x += y);
            }
            Ok(self.push(m, n, out, Op::AddRow(a, b), g))
        } else {
            Err(FitError::dims("add", &[m, n], &[sb.0, sb.1]))
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let g = self.needs(a);
        self.push(m, n, out, Op::Scale(a, c), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let g = self.needs(a);
        self.push(m, n, out, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let g = self.needs(a);
        self.push(m, n, out, Op::Sigmoid(a), g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if n == 0 || m == 0 {
            return Err(FitError::invalid("softmax of an empty vector"));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let g = self.needs(a);
        Ok(self.push(m, n, out, Op::Softmax(a), g))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| FitError::invalid("concat of an empty list"))?;
        let m = self.shape(first).0;
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(FitError::dims("concat", &[m, n], &[r, c]));
            }
            n += c;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, n, out, Op::Concat(parts.to_vec()), g))
    }

    /// Stacks `1 × n` rows into an `m × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| FitError::invalid("stack of an empty list"))?;
        let n = self.shape(first).1;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.shape(r) != (1, n) {
                let (a, b) = self.shape(r);
                return Err(FitError::dims("stack_rows", &[1, n], &[a, b]));
            }
            out.extend_from_slice(self.value(r));
        }
        let g = rows.iter().any(|&r| self.needs(r));
        Ok(self.push(rows.len(), n, out, Op::StackRows(rows.to_vec()), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let g = self.needs(a);
        self.push(n, m, out, Op::Transpose(a), g)
    }

    /// Mean over rows: `m × n -> 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(FitError::invalid("mean over zero rows"));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for row in v.chunks(n.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let g = self.needs(a);
        Ok(self.push(1, n, out, Op::MeanRows(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let g = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), g)
    }

    /// Inner product of two `1 × n` row vectors, as a `1 × 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.0 != 1 || sa != sb {
            return Err(FitError::dims("dot", &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(1, 1, vec![s], Op::Dot(a, b), g))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| FitError::invalid("add_n of an empty list"))?;
        let (m, n) = self.shape(first);
        let mut out = vec![0.0; m * n];
        for &p in parts {
            if self.shape(p) != (m, n) {
                let (a, b) = self.shape(p);
                return Err(FitError::dims("add_n", &[m, n], &[a, b]));
            }
            out.iter_mut()
                .zip(self.value(p))
                .for_each(|(o, x)| *o += x);
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, n, out, Op::AddN(parts.to_vec()), g))
    }

    /// Binary cross-entropy of a probability node against a 0/1 label.
    /// The probability is clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        if label != 0.0 && label != 1.0 {
            return Err(FitError::invalid(format!("label {label} is not 0 or 1")));
        }
        if self.shape(p) != (1, 1) {
            let (a, b) = self.shape(p);
            return Err(FitError::dims("bce", &[1, 1], &[a, b]));
        }
        let loss = bce_value(self.value(p)[0], label);
        let g = self.needs(p);
        Ok(self.push(1, 1, vec![loss], Op::Bce { p, label }, g))
    }

    /// Summed binary cross-entropy of every element of `p` against
    /// `labels`, in row-major order.
    pub fn bce_sum(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(FitError::invalid(format!("label {bad} is not 0 or 1")));
        }
        let (a, b) = self.shape(p);
        if a * b != labels.len() {
            return Err(FitError::dims("bce_sum", &[labels.len()], &[a, b]));
        }
        let loss = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&x, &l)| bce_value(x, l))
            .sum();
        let g = self.needs(p);
        Ok(self.push(1, 1, vec![loss], Op::BceSum { p, labels: labels.to_vec() }, g))
    }

    /// Backpropagates from a scalar node. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (a, b) = self.shape(loss);
            return Err(FitError::invalid(format!(
                "backward from a non-scalar node of shape {a}x{b}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::default();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamGrads,
    ) {
        let (m, n) = (node.rows, node.cols);
        let mut acc = |v: Var, delta: &[f64]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d),
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.add_dense(*id, g),
            Op::Lookup { param, row } => params.add_row(*param, *row, g),
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                if self.needs(*a) {
                    acc(*a, &mm_bt(g, self.value(*b), m, n, k));
                }
                if self.needs(*b) {
                    acc(*b, &mm_at(self.value(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::AddRow(a, b) => {
                acc(*a, g);
                let mut gb = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                acc(*b, &gb);
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                acc(*a, &d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(*a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                acc(*a, &d);
            }
            Op::Softmax(a) => {
                let mut d = vec![0.0; m * n];
                for ((drow, yrow), grow) in d
                    .chunks_mut(n)
                    .zip(node.value.chunks(n))
                    .zip(g.chunks(n))
                {
                    let inner: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                    for ((o, y), gi) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = y * (gi - inner);
                    }
                }
                acc(*a, &d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    let mut d = Vec::with_capacity(m * c);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * n + offset..i * n + offset + c]);
                    }
                    acc(p, &d);
                    offset += c;
                }
            }
            Op::StackRows(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, &g[i * n..(i + 1) * n]);
                }
            }
            Op::Transpose(a) => {
                // output is m × n, so the input was n × m
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g[i * n + j];
                    }
                }
                acc(*a, &d);
            }
            Op::MeanRows(a) => {
                let rows = self.shape(*a).0;
                let inv = 1.0 / rows as f64;
                let mut d = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    d.extend(g.iter().map(|x| x * inv));
                }
                acc(*a, &d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, &vec![g[0]; r * c]);
            }
            Op::Dot(a, b) => {
                let ga: Vec<f64> = self.value(*b).iter().map(|x| x * g[0]).collect();
                let gb: Vec<f64> = self.value(*a).iter().map(|x| x * g[0]).collect();
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(p, g);
                }
            }
            Op::Bce { p, label } => {
                let pc = self.value(*p)[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
                let d = g[0] * (-label / pc + (1.0 - label) / (1.0 - pc));
                acc(*p, &[d]);
            }
            Op::BceSum { p, labels } => {
                let d: Vec<f64> = self
                    .value(*p)
                    .iter()
                    .zip(labels)
                    .map(|(&x, l)| {
                        let pc = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (-l / pc + (1.0 - l) / (1.0 - pc))
                    })
                    .collect();
                acc(*p, &d);
            }
        }
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Gradient for one parameter: a dense part from whole-matrix uses and a
/// sparse row part from embedding lookups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrad {
    pub dense: Option<Vec<f64>>,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl ParamGrad {
    /// Adds this gradient into a dense buffer laid out like the parameter.
    pub fn add_to(&self, out: &mut [f64], cols: usize) {
        if let Some(d) = &self.dense {
            out.iter_mut().zip(d).for_each(|(o, x)| *o += x);
        }
        for (&r, g) in &self.rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(g)
                .for_each(|(o, x)| *o += x);
        }
    }

    fn scale(&mut self, c: f64) {
        if let Some(d) = &mut self.dense {
            d.iter_mut().for_each(|x| *x *= c);
        }
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    fn merge(&mut self, other: ParamGrad) {
        match (&mut self.dense, other.dense) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        for (r, g) in other.rows {
            match self.rows.get_mut(&r) {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                None => {
                    self.rows.insert(r, g);
                }
            }
        }
    }
}

/// Parameter gradients keyed by id, reducible across tapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    entries: BTreeMap<ParamId, ParamGrad>,
}

impl ParamGrads {
    fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        let e = self.entries.entry(id).or_default();
        match &mut e.dense {
            Some(d) => d.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        let e = self.entries.entry(id).or_default();
        match e.rows.get_mut(&row) {
            Some(d) => d.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            None => {
                e.rows.insert(row, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: ParamGrads) {
        for (id, g) in other.entries {
            match self.entries.get_mut(&id) {
                Some(e) => e.merge(g),
                None => {
                    self.entries.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.entries.values_mut().for_each(|g| g.scale(c));
    }

    /// The full gradient of one parameter as a dense array.
    pub fn dense(&self, id: ParamId, params: &ParamSet) -> Vec<f64> {
        let t = params.get(id);
        let mut out = vec![0.0; t.numel()];
        if let Some(g) = self.entries.get(&id) {
            g.add_to(&mut out, t.cols());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|g| {
            g.dense.iter().flatten().all(|x| x.is_finite())
                && g.rows.values().flatten().all(|x| x.is_finite())
        })
    }
}

impl ParamSet {
    /// Adds gradients into each parameter's `grad` buffer.
    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            let t = self.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let cols = t.cols();
            let numel = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; numel]);
            g.add_to(buf, cols);
        }
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

pub fn bce_value(p: f64, label: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln())
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

// a: m×k, b: k×n
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

// g: m×n, b: k×n -> g·bᵀ : m×k
fn mm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a: m×k, g: m×n -> aᵀ·g : k×n
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-9 {
            (a - b).abs()
        } else {
            (a - b).abs() / scale
        }
    }

    /// Central finite difference of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut hi = x.clone();
                hi.data_mut()[i] += eps;
                let mut lo = x.clone();
                lo.data_mut()[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let i2 = tape.leaf(&Tensor::identity(2)).unwrap();
        let m = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let col = tape.constant(2, 1, vec![5.0, 7.0]).unwrap();
        let out = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.shape(out), (1, 1));
        assert_eq!(tape.value(out), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let a = tape.zeros(2, 3);
        let b = tape.zeros(2, 3);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng).with_grad();
        let b = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let va = tape.leaf(&a).unwrap();
        let vb = tape.leaf(&b).unwrap();
        let prod = tape.matmul(va, vb).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.wrt(va).unwrap();

        let numeric = numeric_grad(&a, |x| {
            let mut t = Tape::new(&ps);
            let va = t.leaf(x).unwrap();
            let vb = t.leaf(&b).unwrap();
            let p = t.matmul(va, vb).unwrap();
            let s = t.sum(p);
            t.scalar(s)
        });
        for (x, y) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*x, *y) < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_examples() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let a = tape.constant(1, 3, vec![1000.0; 3]).unwrap();
        let s = tape.softmax(a).unwrap();
        for &x in tape.value(s) {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }

        let a = tape.constant(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let s = tape.softmax(a).unwrap();
        assert!(close(tape.value(s)[0], 0.25, 1e-15));
        assert!(close(tape.value(s)[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_of_empty_is_rejected() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let a = tape.zeros(1, 0);
        assert!(matches!(tape.softmax(a), Err(FitError::InvalidArgument(_))));
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(close(sigmoid(50.0), 1.0, 1e-12));
        assert!(sigmoid(-800.0).is_finite());

        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(&Tensor::scalar(1.0).with_grad()).unwrap();
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        let s1 = sigmoid(1.0);
        let analytic = g.wrt(x).unwrap()[0];
        assert!(close(analytic, s1 * (1.0 - s1), 1e-15));
        assert!(close(analytic, 0.196612, 1e-6));
        let numeric = (sigmoid(1.0 + 1e-5) - sigmoid(1.0 - 1e-5)) / 2e-5;
        assert!(rel_err(analytic, numeric) < 1e-8);
    }

    #[test]
    fn concat_examples_and_gradient_split() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let a = tape.leaf(&Tensor::row(vec![1.0, 2.0]).with_grad()).unwrap();
        let b = tape.leaf(&Tensor::row(vec![3.0]).with_grad()).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let single = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));

        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).unwrap(), &[1.0]);

        assert!(matches!(tape.concat(&[]), Err(FitError::InvalidArgument(_))));
    }

    #[test]
    fn bce_examples() {
        assert!(close(bce_value(0.5, 1.0), std::f64::consts::LN_2, 1e-12));
        assert!(bce_value(1.0 - BCE_EPS, 1.0) < 1e-11);
        assert!(close(bce_value(0.9, 0.0), -(0.1f64).ln(), 1e-12));
        assert!(close(bce_value(0.9, 0.0), std::f64::consts::LN_10, 1e-9));
        assert!(bce_value(0.0, 1.0).is_finite());

        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let p = tape.constant(1, 1, vec![0.3]).unwrap();
        assert!(matches!(tape.bce(p, 2.0), Err(FitError::InvalidArgument(_))));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad()).unwrap();
        let x2 = tape.dot(x, x).unwrap();
        let g = tape.backward(x2).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);

        let mut tape = Tape::new(&ps);
        let x = tape.leaf(&Tensor::row(vec![1.0, 2.0]).with_grad()).unwrap();
        let twice = tape.add(x, x).unwrap();
        let s = tape.sum(twice);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(&Tensor::row(vec![1.0, 2.0]).with_grad()).unwrap();
        assert!(matches!(tape.backward(x), Err(FitError::InvalidArgument(_))));
    }

    #[test]
    fn lookup_gradient_selects_one_row() {
        let mut ps = ParamSet::new();
        let id = ps.add("emb", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut tape = Tape::new(&ps);
        let r = tape.lookup(id, 2).unwrap();
        assert_eq!(tape.value(r), &[5.0, 6.0]);
        let r1 = tape.lookup(id, 1).unwrap();
        let r1b = tape.lookup(id, 1).unwrap();
        let both = tape.add(r1, r1b).unwrap();
        let s = tape.sum(both);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.params.dense(id, &ps), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(matches!(tape.lookup(id, 3), Err(FitError::Index { .. })));
    }

    #[test]
    fn accumulate_grads_populates_tensor_grad() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let grads = {
            let mut tape = Tape::new(&ps);
            let w = tape.param(id).unwrap();
            let s = tape.sum(w);
            tape.backward(s).unwrap().into_params()
        };
        ps.accumulate_grads(&grads);
        ps.accumulate_grads(&grads);
        assert_eq!(ps.get(id).grad.as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::uniform(&[4, 4], -2.0, 2.0, &mut rng));
        let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let run = || {
            let mut tape = Tape::new(&ps);
            let xv = tape.leaf(&x).unwrap();
            let wv = tape.param(w).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.softmax(h).unwrap();
            let r = tape.relu(s);
            let m = tape.mean_rows(r).unwrap();
            let l = tape.sum(m);
            tape.backward(l).unwrap().params.dense(w, &ps)
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
