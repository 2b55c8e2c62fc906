//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters enter through [`Graph::param`]; whether they receive gradients
//! is decided by the graph's trainable-prefix list, so frozen components cost
//! nothing in the backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// Identical shapes.
    Same,
    /// Right shape is a suffix of the left shape; repeated over leading axes.
    Suffix,
    /// Right shape is a prefix of the left shape; repeated over trailing axes.
    Prefix,
}

/// A fixed sparse linear map: `out[j] = Σ w · in[i]` over the entries of row `j`.
///
/// Gathers, zero padding, window partitions, interpolation and segment sums
/// are all instances.
#[derive(Clone, Debug)]
pub struct SparseMap {
    in_len: usize,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMap {
    /// Each output element copies one input element, or is zero for `None`.
    pub fn gather(in_len: usize, out_shape: Vec<usize>, src: &[Option<usize>]) -> Self {
        debug_assert_eq!(out_shape.iter().product::<usize>(), src.len());
        let mut offsets = Vec::with_capacity(src.len() + 1);
        let mut index = Vec::with_capacity(src.len());
        offsets.push(0);
        for s in src {
            if let Some(i) = s {
                debug_assert!(*i < in_len);
                index.push(*i);
            }
            offsets.push(index.len());
        }
        let weight = vec![1.0; index.len()];
        Self {
            in_len,
            out_shape,
            offsets,
            index,
            weight,
        }
    }

    /// Row-level gather on a `[rows, cols]` input: output row `r` is input row `src[r]`.
    pub fn gather_rows(in_rows: usize, cols: usize, src_rows: &[Option<usize>]) -> Self {
        let flat: Vec<Option<usize>> = src_rows
            .iter()
            .flat_map(|r| (0..cols).map(move |c| r.map(|r| r * cols + c)))
            .collect();
        Self::gather(in_rows * cols, vec![src_rows.len(), cols], &flat)
    }

    /// General weighted form; `rows[j]` lists `(input index, weight)` pairs.
    pub fn weighted(in_len: usize, out_shape: Vec<usize>, rows: &[Vec<(usize, f64)>]) -> Self {
        debug_assert_eq!(out_shape.iter().product::<usize>(), rows.len());
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(i, w) in row {
                debug_assert!(i < in_len);
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Self {
            in_len,
            out_shape,
            offsets,
            index,
            weight,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Input indices feeding output element `j`.
    pub fn sources(&self, j: usize) -> &[usize] {
        &self.index[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let n = self.offsets.len() - 1;
        let mut out = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.offsets[j], self.offsets[j + 1]);
            let mut acc = 0.0;
            for e in lo..hi {
                acc += self.weight[e] * input[self.index[e]];
            }
            *o = acc;
        }
        out
    }

    fn apply_transpose_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (j, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for e in self.offsets[j]..self.offsets[j + 1] {
                grad_in[self.index[e]] += self.weight[e] * g;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sparse(Var, Arc<SparseMap>),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumLastAxis(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and computes gradients of a scalar output.
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<String>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// A graph where no parameter is trainable (inference).
    pub fn new() -> Self {
        Self::with_trainable(Vec::<String>::new())
    }

    /// Parameters whose names start with any of `prefixes` receive gradients.
    pub fn with_trainable<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            nodes: Vec::new(),
            trainable: prefixes.into_iter().map(Into::into).collect(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input that receives a gradient (retrieve with [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for the named parameter, created once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let trainable = self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_shape_check(&self, a: Var, b: Var, mode: Bcast) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = match mode {
            Bcast::Same => sa == sb,
            Bcast::Suffix => sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            Bcast::Prefix => sb.len() <= sa.len() && sa[..sb.len()] == *sb,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{mode:?} broadcast of {sb:?} onto {sa:?}"
            )))
        }
    }

    fn broadcast_index(&self, a: Var, b: Var, mode: Bcast) -> impl Fn(usize) -> usize {
        let nb = self.value(b).numel().max(1);
        let inner = match mode {
            Bcast::Prefix => self.value(a).numel() / nb,
            _ => 1,
        };
        move |i: usize| match mode {
            Bcast::Same => i,
            Bcast::Suffix => i % nb,
            Bcast::Prefix => i / inner,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_bcast(a, b, Bcast::Same)
    }

    pub fn add_bcast(&mut self, a: Var, b: Var, mode: Bcast) -> Result<Var> {
        self.binary_shape_check(a, b, mode)?;
        let idx = self.broadcast_index(a, b, mode);
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[idx(i)])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b, mode), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul_bcast(a, b, Bcast::Same)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var, mode: Bcast) -> Result<Var> {
        self.binary_shape_check(a, b, mode)?;
        let idx = self.broadcast_index(a, b, mode);
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[idx(i)])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b, mode), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let data = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let value = Tensor::new(vec![sa[0], sb[1]], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `x [B, n, k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::dim(format!(
                "bmm {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let am = &da[bi * m * k..(bi + 1) * m * k];
            let bm = &db[bi * k * n..(bi + 1) * k * n];
            let out = if trans_b {
                kernels::matmul_bt(am, bm, m, k, n)
            } else {
                kernels::matmul(am, bm, m, k, n)
            };
            data.extend(out);
        }
        let value = Tensor::new(vec![batch, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!(
                "permutation {perm:?} for shape {shape:?}"
            )));
        }
        let value = permute_tensor(self.value(a), perm);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sparse(&mut self, a: Var, map: &Arc<SparseMap>) -> Result<Var> {
        if self.value(a).numel() != map.in_len() {
            return Err(Error::dim(format!(
                "sparse map expects {} inputs, got shape {:?}",
                map.in_len(),
                self.shape(a)
            )));
        }
        let data = map.apply(self.value(a).data());
        let value = Tensor::new(map.out_shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sparse(a, Arc::clone(map)), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::dim(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim(format!(
                "layer norm over {cols} channels with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = v.numel().checked_div(cols).unwrap_or(0);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                data.push((row[c] - mu) * rs * g[c] + b[c]);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap_or(&1);
        let shape = v.shape()[..v.ndim().saturating_sub(1)].to_vec();
        let data = if cols == 0 {
            vec![0.0; shape.iter().product()]
        } else {
            v.data().chunks(cols).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::new(shape, data).expect("reduced shape");
        let rg = self.rg(a);
        self.push(value, Op::SumLastAxis(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Backpropagates from the scalar `out`.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.shape(out).to_vec(), 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable parameters touched by the graph.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, mode) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.value(*a), gd.iter().copied());
                }
                if self.rg(*b) {
                    let reduced = self.reduce_bcast(*a, *b, *mode, gd.iter().copied());
                    accumulate(grads, *b, self.value(*b), reduced.into_iter());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.value(*a), gd.iter().copied());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.value(*b), gd.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b, mode) => {
                let idx = self.broadcast_index(*a, *b, *mode);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let it = gd.iter().enumerate().map(|(k, &x)| x * vb[idx(k)]);
                    accumulate(grads, *a, self.value(*a), it);
                }
                if self.rg(*b) {
                    let prod = gd.iter().zip(va).map(|(&x, &y)| x * y);
                    let reduced = self.reduce_bcast(*a, *b, *mode, prod);
                    accumulate(grads, *b, self.value(*b), reduced.into_iter());
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, self.value(*a), gd.iter().map(|x| x * c));
            }
            Op::AddScalar(a) => {
                accumulate(grads, *a, self.value(*a), gd.iter().copied());
            }
            Op::Powf(a, p) => {
                let va = self.value(*a).data();
                let it = gd.iter().zip(va).map(|(&x, &y)| x * p * y.powf(p - 1.0));
                accumulate(grads, *a, self.value(*a), it);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let it = gd
                    .iter()
                    .zip(va)
                    .map(|(&x, &y)| if y > 0.0 { x } else { 0.0 });
                accumulate(grads, *a, self.value(*a), it);
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                let it = gd
                    .iter()
                    .zip(va)
                    .map(|(&x, &y)| if y > 0.0 { x } else { slope * x });
                accumulate(grads, *a, self.value(*a), it);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let it = gd.iter().zip(y).map(|(&x, &t)| x * (1.0 - t * t));
                accumulate(grads, *a, self.value(*a), it);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let it = gd.iter().zip(va).map(|(&x, &y)| x * gelu_grad(y));
                accumulate(grads, *a, self.value(*a), it);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let ga = kernels::matmul_bt(gd, self.value(*b).data(), m, n, k);
                    accumulate(grads, *a, self.value(*a), ga.into_iter());
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_at(self.value(*a).data(), gd, m, k, n);
                    accumulate(grads, *b, self.value(*b), gb.into_iter());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(batch * m * k);
                    for bi in 0..batch {
                        let gm = &gd[bi * m * n..(bi + 1) * m * n];
                        let bm = &db[bi * k * n..(bi + 1) * k * n];
                        // dA = G B^T, where B is [k, n] (or stored [n, k] when transposed)
                        let part = if *trans_b {
                            kernels::matmul(gm, bm, m, n, k)
                        } else {
                            kernels::matmul_bt(gm, bm, m, n, k)
                        };
                        ga.extend(part);
                    }
                    accumulate(grads, *a, self.value(*a), ga.into_iter());
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(batch * k * n);
                    for bi in 0..batch {
                        let gm = &gd[bi * m * n..(bi + 1) * m * n];
                        let am = &da[bi * m * k..(bi + 1) * m * k];
                        let part = if *trans_b {
                            // d(B^T) = A^T G  =>  dB = G^T A, shape [n, k]
                            kernels::matmul_at(gm, am, m, n, k)
                        } else {
                            kernels::matmul_at(am, gm, m, k, n)
                        };
                        gb.extend(part);
                    }
                    accumulate(grads, *b, self.value(*b), gb.into_iter());
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(g, &inv);
                accumulate(grads, *a, self.value(*a), back.into_data().into_iter());
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, self.value(*a), gd.iter().copied());
            }
            Op::Sparse(a, map) => {
                let mut gin = vec![0.0; map.in_len()];
                map.apply_transpose_into(gd, &mut gin);
                accumulate(grads, *a, self.value(*a), gin.into_iter());
            }
            Op::Concat(parts, axis) => {
                let base = self.shape(parts[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = node.value.shape()[*axis];
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let lo = (o * total + start) * inner;
                            gp.extend_from_slice(&gd[lo..lo + len * inner]);
                        }
                        accumulate(grads, p, self.value(p), gp.into_iter());
                    }
                    start += len;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                if let Some(rows) = y.len().checked_div(cols) {
                    for r in 0..rows {
                        let (yr, gr) =
                            (&y[r * cols..(r + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                accumulate(grads, *a, self.value(*a), ga.into_iter());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let cols = gv.len();
                let rows = mean.len();
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                let mut gx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; cols];
                let mut gxhat = vec![0.0; cols];
                for r in 0..rows {
                    let off = r * cols;
                    for c in 0..cols {
                        xhat[c] = (xv[off + c] - mean[r]) * rstd[r];
                        ggamma[c] += gd[off + c] * xhat[c];
                        gbeta[c] += gd[off + c];
                        gxhat[c] = gd[off + c] * gv[c];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[off + c] = rstd[r] * (gxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, self.value(*x), gx.into_iter());
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, self.value(*gamma), ggamma.into_iter());
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, self.value(*beta), gbeta.into_iter());
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, self.value(*a), std::iter::repeat_n(gd[0], n));
            }
            Op::SumLastAxis(a) => {
                let va = self.value(*a);
                let cols = *va.shape().last().unwrap_or(&1);
                let it = (0..va.numel()).map(|k| gd[k / cols.max(1)]);
                accumulate(grads, *a, va, it);
            }
        }
        Ok(())
    }

    fn reduce_bcast(&self, a: Var, b: Var, mode: Bcast, g: impl Iterator<Item = f64>) -> Vec<f64> {
        let nb = self.value(b).numel();
        let idx = self.broadcast_index(a, b, mode);
        let mut out = vec![0.0; nb];
        for (k, x) in g.enumerate() {
            out[idx(k)] += x;
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, g: impl Iterator<Item = f64>) {
    let slot = &mut grads[v.0];
    match slot {
        Some(t) => {
            for (dst, x) in t.data_mut().iter_mut().zip(g) {
                *dst += x;
            }
        }
        None => {
            let data: Vec<f64> = g.collect();
            *slot = Some(Tensor::new(like.shape().to_vec(), data).expect("gradient shape"));
        }
    }
}

/// Permutes the axes of `t` so that output axis `i` is input axis `perm[i]`.
pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut counter = vec![0usize; nd];
    let src = t.data();
    for _ in 0..n {
        let off: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        data.push(src[off]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permuted shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
