//! Reverse-mode tape.
//!
//! Operations are appended in execution order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use rand::Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    BatchMatMulNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    Sum { a: Var },
    Mean { a: Var },
    WeightedSum { a: Var, weights: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    SwapMiddle { a: Var, dims: [usize; 4] },
    MaskedSoftmax { x: Var },
    LogSoftmax { x: Var },
    Pick { x: Var, cols: Vec<usize> },
    CosineRows { a: Var, b: Var, eps: f64, na: Vec<f64>, nb: Vec<f64> },
    L2NormRows { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations plus gradient accumulators for leaves.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients accumulate for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shaped like its value")
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt { a, b, m, k, n },
            rg,
        ))
    }

    fn batch_dims(&self, v: Var, op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
        let s = self.shape(v);
        if s.len() < 3 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let r = s[s.len() - 2];
        let c = s[s.len() - 1];
        Ok((s[..s.len() - 2].to_vec(), r, c))
    }

    /// Batched `a[..×m×k] · b[..×k×n]` over identical leading axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (lead, m, k) = self.batch_dims(a, "batch_matmul")?;
        let (lead_b, k2, n) = self.batch_dims(b, "batch_matmul")?;
        if lead != lead_b || k != k2 {
            return Err(shape_err("batch_matmul", self.value(a), self.value(b)));
        }
        let batch: usize = lead.iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            out.extend(kernels::matmul(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchMatMul { a, b, batch, m, k, n },
            rg,
        ))
    }

    /// Batched `a[..×m×k] · b[..×n×k]ᵀ`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (lead, m, k) = self.batch_dims(a, "batch_matmul_nt")?;
        let (lead_b, n, k2) = self.batch_dims(b, "batch_matmul_nt")?;
        if lead != lead_b || k != k2 {
            return Err(shape_err("batch_matmul_nt", self.value(a), self.value(b)));
        }
        let batch: usize = lead.iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            out.extend(kernels::matmul_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            ));
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchMatMulNt { a, b, batch, m, k, n },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        if self.shape(bias) != [w] {
            return Err(shape_err("add_bias", self.value(a), self.value(bias)));
        }
        let bd = self.value(bias).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(w)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale { a, s }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean { a }, rg))
    }

    /// `Σ wᵢ aᵢ` over all elements, left to right.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(&weights)
            .fold(0.0, |acc, (x, w)| acc + x * w);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { a, weights }, rg))
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(shape_err("layer_norm", self.value(x), self.value(gamma)));
        }
        let rows = self.value(x).leading();
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * w];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mean = row.iter().fold(0.0, |a, v| a + v) / w as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gelu { x }, rg))
    }

    /// Inverted dropout in training mode; identity (same handle) otherwise.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Rows of a `[V×d]` table selected by `ids`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::Input(format!(
                "id {id} at position {pos} out of range for table with {v} rows"
            )));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), rows, cols);
        let t = Tensor::new(vec![cols, rows], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose { a, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// `[d0, d1, d2, d3] → [d0, d2, d1, d3]`; splits or merges attention heads.
    pub fn swap_middle(&mut self, a: Var) -> Result<Var> {
        let dims: [usize; 4] = self.shape(a).try_into().map_err(|_| Error::Dimension {
            op: "swap_middle",
            lhs: self.shape(a).to_vec(),
            rhs: vec![],
        })?;
        let out = swap_middle_data(self.value(a).data(), dims);
        let t = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SwapMiddle { a, dims }, rg))
    }

    /// Softmax over the last axis where `keep[m * last + j]` selects which
    /// columns participate; `m` advances every `rows_per_mask` rows. Dropped
    /// columns receive exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool], rows_per_mask: usize) -> Result<Var> {
        let w = self.value(x).last_dim();
        let rows = self.value(x).leading();
        if rows_per_mask == 0 || rows % rows_per_mask != 0 || keep.len() != (rows / rows_per_mask) * w {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let km = &keep[(r / rows_per_mask) * w..(r / rows_per_mask + 1) * w];
            let row = &xd[r * w..(r + 1) * w];
            let max = row
                .iter()
                .zip(km)
                .filter(|(_, &k)| k)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * w..(r + 1) * w];
            let mut total = 0.0;
            for j in 0..w {
                if km[j] {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::MaskedSoftmax { x },
            rg,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if w < 2 {
            return Err(Error::Dimension {
                op: "log_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![2],
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (src, dst) in xd.chunks(w).zip(out.chunks_mut(w)) {
            kernels::log_softmax_row(src, dst);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x }, rg))
    }

    /// One element per row of a 2-D tensor: `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, w) = self.matrix_dims(x, "pick")?;
        if cols.len() != rows || cols.iter().any(|&c| c >= w) {
            return Err(Error::Dimension {
                op: "pick",
                lhs: self.shape(x).to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let xd = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &c)| xd[i * w + c]).collect();
        let t = Tensor::new(vec![rows], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise cosine similarity `(a·b) / (max(‖a‖, eps) · max(‖b‖, eps))`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let w = self.value(a).last_dim();
        let rows = self.value(a).leading();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut na = vec![0.0; rows];
        let mut nb = vec![0.0; rows];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let (x, y) = (&ad[r * w..(r + 1) * w], &bd[r * w..(r + 1) * w]);
            na[r] = kernels::norm(x);
            nb[r] = kernels::norm(y);
            out[r] = kernels::dot(x, y) / (na[r].max(eps) * nb[r].max(eps));
        }
        let t = Tensor::new(vec![rows], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::CosineRows { a, b, eps, na, nb }, rg))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let n = self.value(a).len();
        let a2 = self.reshape(a, &[1, n])?;
        let b2 = self.reshape(b, &[1, n])?;
        self.cosine_rows(a2, b2, eps)
    }

    /// Euclidean norm of each row.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        let out = self.value(a).data().chunks(w).map(kernels::norm).collect();
        let t = Tensor::vector(out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::L2NormRows { a }, rg))
    }

    /// Accumulates `∂loss/∂leaf` into every leaf that requires a gradient.
    /// Calling it again without [`Tape::zero_grad`] adds to the previous result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                add_into(&mut self.leaf_grads[idx], g);
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, c: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], c);
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    send(a, kernels::matmul_nt(&g, val(b), m, n, k));
                }
                if self.rg(b) {
                    send(b, kernels::matmul_tn(val(a), &g, k, m, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.rg(a) {
                    send(a, kernels::matmul(&g, val(b), m, n, k));
                }
                if self.rg(b) {
                    send(b, kernels::matmul_tn(&g, val(a), n, m, k));
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (ad, bd) = (val(a), val(b));
                if self.rg(a) {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for i in 0..batch {
                        da.extend(kernels::matmul_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    send(a, da);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(batch * k * n);
                    for i in 0..batch {
                        db.extend(kernels::matmul_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                        ));
                    }
                    send(b, db);
                }
            }
            &Op::BatchMatMulNt { a, b, batch, m, k, n } => {
                let (ad, bd) = (val(a), val(b));
                if self.rg(a) {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for i in 0..batch {
                        da.extend(kernels::matmul(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        ));
                    }
                    send(a, da);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(batch * n * k);
                    for i in 0..batch {
                        db.extend(kernels::matmul_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            n,
                            m,
                            k,
                        ));
                    }
                    send(b, db);
                }
            }
            &Op::Add { a, b } => {
                send(a, g.clone());
                send(b, g);
            }
            &Op::Sub { a, b } => {
                send(b, g.iter().map(|v| -v).collect());
                send(a, g);
            }
            &Op::Mul { a, b } => {
                send(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                send(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
            }
            &Op::AddBias { a, bias } => {
                if self.rg(bias) {
                    let w = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; w];
                    for row in g.chunks(w) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(bias, db);
                }
                send(a, g);
            }
            &Op::Scale { a, s } => send(a, g.iter().map(|v| v * s).collect()),
            &Op::Sum { a } => send(a, vec![g[0]; self.nodes[a.0].value.len()]),
            &Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                send(a, vec![g[0] / n as f64; n]);
            }
            Op::WeightedSum { a, weights } => send(*a, weights.iter().map(|w| w * g[0]).collect()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = self.nodes[gamma.0].value.len();
                let gm = val(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; w];
                    let mut dbeta = vec![0.0; w];
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            dg[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    send(*gamma, dg);
                    send(*beta, dbeta);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, hr), dr)) in g
                        .chunks(w)
                        .zip(xhat.chunks(w))
                        .zip(dx.chunks_mut(w))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..w {
                            let dh = gr[j] * gm[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= w as f64;
                        mean_dh /= w as f64;
                        for j in 0..w {
                            let dh = gr[j] * gm[j];
                            dr[j] = inv_std[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    send(*x, dx);
                }
            }
            &Op::Gelu { x } => send(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            ),
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].value.last_dim();
                let mut dt = vec![0.0; self.nodes[table.0].value.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                send(*table, dt);
            }
            &Op::Transpose { a, rows, cols } => send(a, kernels::transpose(&g, cols, rows)),
            &Op::Reshape { a } => send(a, g),
            &Op::SwapMiddle { a, dims } => {
                send(a, swap_middle_data(&g, [dims[0], dims[2], dims[1], dims[3]]))
            }
            &Op::MaskedSoftmax { x } => {
                let p = node.value.data();
                let w = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((pr, gr), dr) in p.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let inner = pr.iter().zip(gr).fold(0.0, |a, (p, g)| a + p * g);
                    for j in 0..w {
                        dr[j] = pr[j] * (gr[j] - inner);
                    }
                }
                send(x, dx);
            }
            &Op::LogSoftmax { x } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let total = gr.iter().fold(0.0, |a, v| a + v);
                    for j in 0..w {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                send(x, dx);
            }
            Op::Pick { x, cols } => {
                let w = self.nodes[x.0].value.last_dim();
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * w + c] = g[i];
                }
                send(*x, dx);
            }
            Op::CosineRows { a, b, eps, na, nb } => {
                let (ad, bd) = (val(*a), val(*b));
                let w = self.nodes[a.0].value.last_dim();
                let c = node.value.data();
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for r in 0..c.len() {
                    let (x, y) = (&ad[r * w..(r + 1) * w], &bd[r * w..(r + 1) * w]);
                    let (ea, eb) = (na[r].max(*eps), nb[r].max(*eps));
                    let inv = g[r] / (ea * eb);
                    let ka = if na[r] > *eps { g[r] * c[r] / (na[r] * ea) } else { 0.0 };
                    let kb = if nb[r] > *eps { g[r] * c[r] / (nb[r] * eb) } else { 0.0 };
                    for j in 0..w {
                        da[r * w + j] = inv * y[j] - ka * x[j];
                        db[r * w + j] = inv * x[j] - kb * y[j];
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            &Op::L2NormRows { a } => {
                let ad = val(a);
                let w = self.nodes[a.0].value.last_dim();
                let norms = node.value.data();
                let mut da = vec![0.0; ad.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n > 0.0 {
                        for j in 0..w {
                            da[r * w + j] = g[r] * ad[r * w + j] / n;
                        }
                    }
                }
                send(a, da);
            }
        }
    }
}

fn swap_middle_data(src: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [d0, d1, d2, d3] = dims;
    let mut out = vec![0.0; src.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let s = ((i * d1 + j) * d2 + k) * d3;
                let t = ((i * d2 + k) * d1 + j) * d3;
                out[t..t + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}
