//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] records every op of one forward pass. Nodes that do not depend on
//! a trainable parameter are marked `requires_grad = false` and are skipped by
//! [`Tape::backward`], so a frozen prefix of a network costs nothing in the
//! backward pass and frozen weights never receive a gradient.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::kernels::{self, AttnDims};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("backward called on an empty tape (no forward pass recorded)")]
    NoForward,
    #[error("backward needs a scalar loss, node {0} has shape {1:?}")]
    NonScalarLoss(usize, Vec<usize>),
    #[error("masked cross-entropy selected no positions (empty loss)")]
    EmptyLoss,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
}

/// A named model tensor. Tensors are shared (`Arc`) so recording a parameter
/// on a tape does not copy it.
#[derive(Clone, Debug)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub tensor: Arc<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Self {
        Self { name: name.into(), tensor: Arc::new(tensor), trainable }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, param: ParamTensor<T>) -> Result<usize, AutogradError> {
        if self.index.contains_key(&param.name) {
            return Err(AutogradError::DuplicateParam(param.name));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<T>, AutogradError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn by_id(&self, id: usize) -> &ParamTensor<T> {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Replaces a tensor's values, keeping name and trainable flag.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), AutogradError> {
        let i = *self.index.get(name).ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?;
        let old = &self.params[i].tensor;
        if old.shape() != tensor.shape() {
            return Err(TensorError::Mismatch {
                op: "param set",
                lhs: old.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            }
            .into());
        }
        self.params[i].tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    tensor: Arc::new(p.tensor.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    GatedAdd { base: Var, gate: Var, delta: Var },
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name. Only trainable parameters appear.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T = f32>(pub BTreeMap<String, Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self`; names missing on either side are kept.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.0.values_mut() {
            g.scale(factor);
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(TensorError::Rank { op, expected: rank, shape: t.shape().to_vec() });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, p: &ParamTensor<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::clone(&p.tensor),
            op: Op::Param(p.name.clone()),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank(av, 2, "matmul")?;
        expect_rank(bv, 2, "matmul")?;
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(TensorError::Mismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            }
            .into());
        }
        let out = kernels::matmul(av.data(), bv.data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::Mismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            }
            .into());
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutogradError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        if bv.len() != cols {
            return Err(TensorError::Mismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            }
            .into());
        }
        let b = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + b[i % cols]).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, bias), rg))
    }

    /// `x · w + b` for `w[k,m]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutogradError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutogradError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(TensorError::Mismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            }
            .into());
        }
        let (y, mean, rstd) = kernels::layer_norm(xv.data(), gv.data(), bv.data(), cols, T::from_f64(eps));
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, y)?, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg))
    }

    /// Multi-head scaled dot-product attention. `q[n,d]`, `k[m,d]`, `v[m,d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var, AutogradError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for t in [qv, kv, vv] {
            expect_rank(t, 2, "attention")?;
        }
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let m = kv.shape()[0];
        let mismatch = kv.shape()[1] != d
            || vv.shape() != kv.shape()
            || heads == 0
            || d % heads != 0
            || (causal && n != m);
        if mismatch {
            return Err(TensorError::Mismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            }
            .into());
        }
        let dims = AttnDims { n, m, d, heads, causal };
        let (out, probs) = kernels::attention(qv.data(), kv.data(), vv.data(), dims);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// `base + tanh(gate) · delta` with a one-element `gate`.
    pub fn gated_add(&mut self, base: Var, gate: Var, delta: Var) -> Result<Var, AutogradError> {
        let (bv, gv, dv) = (self.value(base), self.value(gate), self.value(delta));
        if bv.shape() != dv.shape() || gv.len() != 1 {
            return Err(TensorError::Mismatch {
                op: "gated_add",
                lhs: bv.shape().to_vec(),
                rhs: dv.shape().to_vec(),
            }
            .into());
        }
        let g = gv.item().tanh();
        let data = bv.data().iter().zip(dv.data()).map(|(&b, &d)| b + g * d).collect();
        let shape = bv.shape().to_vec();
        let rg = self.rg(&[base, gate, delta]);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatedAdd { base, gate, delta }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutogradError> {
        let tv = self.value(table);
        expect_rank(tv, 2, "gather")?;
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for table of {rows}")).into());
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), cols], data)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Mean NLL over masked-in rows of `logits[n,V]`; scalar output.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, AutogradError> {
        let lv = self.value(logits);
        expect_rank(lv, 2, "masked_cross_entropy")?;
        let (n, vocab) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::Mismatch {
                op: "masked_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            }
            .into());
        }
        if let Some(&id) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab).map(|(t, _)| t) {
            return Err(AutogradError::TargetOutOfRange { id, vocab });
        }
        let (loss, probs, count) = kernels::masked_cross_entropy(lv.data(), vocab, targets, mask);
        if count == 0 {
            return Err(AutogradError::EmptyLoss);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            rg,
        ))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var, AutogradError> {
        if vars.is_empty() {
            return Err(TensorError::Invalid("mean of zero nodes".into()).into());
        }
        let mut total = T::zero();
        for &v in vars {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(AutogradError::NonScalarLoss(v.0, t.shape().to_vec()));
            }
            total += t.item();
        }
        let out = total / T::from_f64(vars.len() as f64);
        let rg = self.rg(vars);
        Ok(self.push(Tensor::scalar(out), Op::Mean(vars.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every trainable
    /// parameter recorded on this tape; an unused trainable parameter gets zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutogradError::NoForward);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutogradError::NonScalarLoss(loss.0, lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // frozen parameters and constant subgraphs are never visited
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if let Op::Param(name) = &node.op {
                    out.0
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.propagate(idx, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<(), AutogradError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.0.get_mut(name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        out.0.insert(name.clone(), t);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let da = kernels::matmul_grad_a(&g, bv.data(), n, k, m);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_grad_b(av.data(), &g, n, k, m);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::AddRow(a, bias) => {
                if self.requires_grad(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = av.data().iter().zip(&g).map(|(&x, &gy)| gy * kernels::gelu_grad(x)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_grad(&g, xv.data(), self.value(*gamma).data(), mean, rstd, xv.cols());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_grad(
                    &g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    *dims,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatedAdd { base, gate, delta } => {
                let gv = self.value(*gate).item();
                let t = gv.tanh();
                if self.requires_grad(*gate) {
                    let dv = self.value(*delta).data();
                    let s: T = kernels::dot(&g, dv);
                    self.accumulate(grads, *gate, vec![(T::one() - t * t) * s]);
                }
                if self.requires_grad(*delta) {
                    self.accumulate(grads, *delta, g.iter().map(|&x| x * t).collect());
                }
                self.accumulate(grads, *base, g);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &x) in dt[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / T::from_f64(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut dl[i * vocab..(i + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *d = p * scale;
                    }
                    row[t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mean(vars) => {
                let share = g[0] / T::from_f64(vars.len() as f64);
                for &v in vars {
                    self.accumulate(grads, v, vec![share]);
                }
            }
        }
        Ok(())
    }
}
