//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Nodes are
//! only ever appended after their inputs, so the node index order is a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Operations fail with [`TensorError::Shape`] on incompatible inputs and with
//! [`TensorError::NonFinite`] (naming the op) if they produce NaN or infinity.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

enum LeafKind {
    Constant,
    Param(ParamId),
    Input,
    Interior,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    leaf: LeafKind,
}

/// Records operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
///
/// Holds one entry per trainable parameter reachable from the loss, plus one
/// per reachable [`Tape::input`] node. Frozen parameters never appear.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty() -> Self {
        Self {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn by_name(&self, store: &ParamStore<T>, name: &str) -> Option<&Tensor<T>> {
        store.id(name).and_then(|id| self.params.get(&id))
    }

    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.inputs.get(&var.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.params.insert(id, g);
    }

    /// Names of every parameter with a gradient entry, in id order.
    pub fn names<'s>(&self, store: &'s ParamStore<T>) -> Vec<&'s str> {
        self.params.keys().map(|&id| store.get(id).name.as_str()).collect()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, leaf: LeafKind) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, rg, LeafKind::Interior))
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false, LeafKind::Constant)
    }

    /// A non-parameter leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true, LeafKind::Input)
    }

    /// Loads a parameter. Repeated loads of the same id share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let value = Arc::clone(&p.tensor);
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                op: Op::Leaf,
                requires_grad: p.trainable,
                leaf: LeafKind::Param(id),
            });
            Var {
                tape: self,
                id: nodes.len() - 1,
            }
        };
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns) of rank-2 inputs.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let vals: Vec<_> = parts.iter().map(|p| self.value(p.id)).collect();
        if vals.iter().any(|v| v.rank() != 2) {
            return shape_err("concat", "rank-2 inputs required");
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        match axis {
            0 => {
                let cols = vals[0].cols();
                if vals.iter().any(|v| v.cols() != cols) {
                    return shape_err("concat", "column counts differ");
                }
                let rows: usize = vals.iter().map(|v| v.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for v in &vals {
                    data.extend_from_slice(v.data());
                }
                self.push_op("concat", Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids)
            }
            1 => {
                let rows = vals[0].rows();
                if vals.iter().any(|v| v.rows() != rows) {
                    return shape_err("concat", "row counts differ");
                }
                let cols: usize = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row(r));
                    }
                }
                self.push_op("concat", Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(ids.clone()), &ids)
            }
            _ => Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for rank-2 inputs"),
            }),
        }
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embed<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let tv = self.value(table.id);
        if tv.rank() != 2 {
            return shape_err("embed_lookup", "table must be rank-2");
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embed_lookup",
                detail: "empty id list".into(),
            });
        }
        let (n, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(TensorError::Invalid {
                    op: "embed_lookup",
                    detail: format!("id {i} outside table of {n} rows"),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        self.push_op(
            "embed_lookup",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embed {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        )
    }

    /// Mean token-level cross-entropy over the rows selected by `mask`.
    pub fn cross_entropy<'t>(&'t self, logits: Var<'t, T>, targets: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
        let lv = self.value(logits.id);
        if lv.rank() != 2 {
            return shape_err("cross_entropy", "logits must be rank-2");
        }
        let (r, v) = (lv.rows(), lv.cols());
        if targets.len() != r || mask.len() != r {
            return shape_err(
                "cross_entropy",
                format!("{r} rows but {} targets and {} mask entries", targets.len(), mask.len()),
            );
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: "empty mask".into(),
            });
        }
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    detail: format!("target {t} outside vocabulary of {v}"),
                });
            }
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            total += z.ln() + m - row[t];
        }
        let loss = total / c::<T>(count as f64);
        self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits.id],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut out = Gradients::empty();
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match node.leaf {
                LeafKind::Param(pid) => {
                    if !g.is_finite() {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    out.params.insert(pid, g);
                    continue;
                }
                LeafKind::Input => {
                    out.inputs.insert(id, g);
                    continue;
                }
                LeafKind::Constant => continue,
                LeafKind::Interior => {}
            }
            backprop(&nodes, node, &g, &mut grads)?;
        }
        Ok(out)
    }
}

fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants<T: Scalar>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if wants(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                acc(nodes, grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if wants(nodes, *b) {
                let mut db = vec![T::zero(); k * n];
                gemm_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                acc(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::MatMulNt(a, b) => {
            // c[m×n] = a[m×k] · b[n×k]ᵀ
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if wants(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                gemm_acc(g.data(), bv.data(), &mut da, m, n, k);
                acc(nodes, grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if wants(nodes, *b) {
                let mut db = vec![T::zero(); n * k];
                gemm_tn_acc(g.data(), av.data(), &mut db, m, n, k);
                acc(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::Transpose(a) => acc(nodes, grads, *a, g.transpose()?),
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(nodes, *a) {
                acc(nodes, grads, *a, g.zip_map(bv, |x, y| x * y));
            }
            if wants(nodes, *b) {
                acc(nodes, grads, *b, g.zip_map(av, |x, y| x * y));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            acc(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::AddRow(x, b) => {
            acc(nodes, grads, *x, g.clone());
            if wants(nodes, *b) {
                let cols = g.cols();
                let mut db = vec![T::zero(); cols];
                for r in 0..g.rows() {
                    for (d, &v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(nodes, grads, *b, Tensor::new(nodes[*b].value.shape().to_vec(), db)?);
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            let k0: T = c(SQRT_2_OVER_PI);
            let k1: T = c(GELU_CUBIC);
            let half: T = c(0.5);
            let three: T = c(3.0);
            let dx = g.zip_map(xv, |gv, x| {
                let u = k0 * (x + k1 * x * x * x);
                let t = u.tanh();
                let du = k0 * (T::one() + three * k1 * x * x);
                gv * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
            });
            acc(nodes, grads, *x, dx);
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let cols = y.cols();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    dx[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(nodes, grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gain].value;
            let cols = g.cols();
            let rows = g.rows();
            if wants(nodes, *gain) || wants(nodes, *bias) {
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let gg = g.data()[r * cols + j];
                        dg[j] += gg * xhat[r * cols + j];
                        db[j] += gg;
                    }
                }
                acc(nodes, grads, *gain, Tensor::new(gv.shape().to_vec(), dg)?);
                acc(nodes, grads, *bias, Tensor::new(nodes[*bias].value.shape().to_vec(), db)?);
            }
            if wants(nodes, *x) {
                let n: T = c(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        let d = g.data()[r * cols + j] * gv.data()[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * cols + j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..cols {
                        let d = g.data()[r * cols + j] * gv.data()[j];
                        dx[r * cols + j] = rstd[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
                    }
                }
                acc(nodes, grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
        }
        Op::Embed { table, ids } => {
            let tv = &nodes[*table].value;
            let d = tv.cols();
            let mut dt = vec![T::zero(); tv.len()];
            for (r, &i) in ids.iter().enumerate() {
                for (o, &v) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            acc(nodes, grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                if wants(nodes, p) {
                    acc(nodes, grads, p, g.slice_rows(start, rows)?);
                }
                start += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let cols = nodes[p].value.cols();
                if wants(nodes, p) {
                    acc(nodes, grads, p, g.slice_cols(start, cols)?);
                }
                start += cols;
            }
        }
        Op::SliceRows { x, start } => {
            let xv = &nodes[*x].value;
            let cols = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            dx[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            acc(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::SliceCols { x, start } => {
            let xv = &nodes[*x].value;
            let cols = xv.cols();
            let w = g.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for r in 0..xv.rows() {
                dx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Sum(x) => {
            let gv = g.item();
            acc(nodes, grads, *x, Tensor::full(nodes[*x].value.shape(), gv));
        }
        Op::Mean(x) => {
            let xv = &nodes[*x].value;
            let gv = g.item() / c::<T>(xv.len() as f64);
            acc(nodes, grads, *x, Tensor::full(xv.shape(), gv));
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let lv = &nodes[*logits].value;
            let v = lv.cols();
            let scale = g.item() / c::<T>(*count as f64);
            let mut dl = vec![T::zero(); lv.len()];
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                for j in 0..v {
                    dl[i * v + j] = probs[i * v + j] * scale;
                }
                dl[i * v + t] -= scale;
            }
            acc(nodes, grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
        }
    }
    Ok(())
}

/// Row-wise softmax over the last dimension, stabilized by max subtraction.
/// Entries with `mask[i] == false` get exactly zero weight.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let cols = x.cols();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut m = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > m {
                m = v;
            }
        }
        if m == T::neg_infinity() {
            return Err(TensorError::Invalid {
                op: "softmax",
                detail: format!("row {r} has no unmasked entry"),
            });
        }
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - m).exp();
                out[r * cols + j] = e;
                z += e;
            }
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return shape_err("matmul", format!("{:?} × {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        self.tape
            .push_op("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self · otherᵀ`, without materializing the transpose.
    pub fn matmul_nt(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return shape_err("matmul_nt", format!("{:?} × {:?}ᵀ", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(a.data(), b.data(), &mut out, m, k, n);
        self.tape.push_op(
            "matmul_nt",
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let t = self.value().transpose()?;
        self.tape.push_op("transpose", t, Op::Transpose(self.id), &[self.id])
    }

    fn binary(&self, other: &Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        self.tape.push_op(name, a.zip_map(&b, f), op, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x * s);
        self.tape.push_op("scale", v, Op::Scale(self.id, s), &[self.id])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias);
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.cols() {
            return shape_err("add_row", format!("{:?} + {:?}", x.shape(), b.shape()));
        }
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += b.data()[i % cols];
        }
        self.tape.push_op(
            "add_row",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::AddRow(self.id, bias.id),
            &[self.id, bias.id],
        )
    }

    /// `x · w + b` with `w: [in × out]`, `b: [out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(w)?.add_row(b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let k0: T = c(SQRT_2_OVER_PI);
        let k1: T = c(GELU_CUBIC);
        let half: T = c(0.5);
        let v = self
            .value()
            .map(|x| half * x * (T::one() + (k0 * (x + k1 * x * x * x)).tanh()));
        self.tape.push_op("gelu", v, Op::Gelu(self.id), &[self.id])
    }

    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let v = softmax_rows(&self.value(), None)?;
        self.tape.push_op("softmax", v, Op::Softmax(self.id), &[self.id])
    }

    /// Softmax where `mask == false` entries get zero weight; `mask` is
    /// row-major with the same shape as `self`.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.len() != x.len() {
            return shape_err("softmax", format!("mask of {} for {:?}", mask.len(), x.shape()));
        }
        let v = softmax_rows(&x, Some(mask))?;
        self.tape.push_op("softmax", v, Op::Softmax(self.id), &[self.id])
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let cols = x.cols();
        if g.len() != cols || b.len() != cols {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape()),
            );
        }
        let rows = x.rows();
        let n: T = c(cols as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.tape.push_op(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().slice_rows(start, len)?;
        self.tape.push_op("slice_rows", v, Op::SliceRows { x: self.id, start }, &[self.id])
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().slice_cols(start, len)?;
        self.tape.push_op("slice_cols", v, Op::SliceCols { x: self.id, start }, &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape.push_op("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.sum() / c::<T>(x.len() as f64);
        self.tape.push_op("mean", Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0]), None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[1000.0, 0.0]), None).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300 && s.is_finite());
        let s = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0]), None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[i] - x.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let s = softmax_rows(&t(&[2, 2], &[5.0, 1.0, 2.0, 3.0]), Some(&[false, true, true, true])).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[1], 1.0);
        assert!(softmax_rows(&t(&[1, 2], &[1.0, 2.0]), Some(&[false, false])).is_err());
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[3], &[1.0, -2.0, 0.5]), Group::Llm).unwrap();
        let tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn frozen_parameters_are_absent_from_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[2], &[1.0, 2.0]), Group::Llm).unwrap();
        let b = store.add("b", t(&[2], &[3.0, 4.0]), Group::Vision).unwrap();
        store.set_trainable(b, false);
        let tape = Tape::new();
        let loss = tape.param(&store, a).mul(&tape.param(&store, b)).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let logits = t(&[2, 5], &[0.3, -1.2, 2.0, 0.0, 0.7, 1.5, 1.5, -0.4, 0.2, -2.0]);
        let targets = [2, 4];
        let tape = Tape::new();
        let l = tape.input(logits.clone());
        let ce = tape.cross_entropy(l, &targets, &[true, true]).unwrap().value().item();
        let mut want = 0.0;
        for (r, &tg) in targets.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            want += lse - row[tg];
        }
        assert!((ce - want / 2.0).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows_and_rejects_empty_mask() {
        let tape = Tape::new();
        let l = tape.input(t(&[2, 2], &[50.0, -50.0, 0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[0, 1], &[true, false]).unwrap().value().item();
        assert!(ce < 1e-40);
        assert!(tape.cross_entropy(l, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let tape = Tape::new();
        let x = tape.input(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let g = tape.input(t(&[3], &[1.5, 1.5, 1.5]));
        let b = tape.input(t(&[3], &[0.1, 0.2, 0.3]));
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().value();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn non_finite_values_are_reported_with_the_op() {
        let tape = Tape::new();
        let x = tape.input(t(&[1], &[1e300]));
        let err = x.mul(&x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul" }), "{err:?}");
    }
}
