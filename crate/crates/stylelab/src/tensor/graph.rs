//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records every operation in topological order; `backward`
//! walks the tape in exact reverse and accumulates gradients into every
//! node on a path to the loss. Repeated `backward` calls accumulate
//! (callers reset by building a fresh graph per step).

use super::ops::{matmul_at_into, matmul_bt_into, matmul_into, softmax_rows_into};
use super::{require_2d, Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId },
    AddRowBias { a: NodeId, bias: NodeId },
    Silu { a: NodeId },
    Log { a: NodeId },
    RmsNorm { a: NodeId, gain: NodeId },
    SoftmaxRows { a: NodeId },
    MeanAll { a: NodeId },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { inputs: Vec<NodeId> },
    GatherRows { table: NodeId, indices: Vec<usize> },
    Unpatchify { a: NodeId, channels: usize, patch: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op,
    // saved scalar for Scale
    aux: f64,
}

/// Recorded computation over tensors; confined to one thread per forward/backward.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op, aux: f64) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
            aux,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<S>> {
        self.nodes[id]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id].value.shape(), g.clone()).unwrap())
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf, 0.0)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_2d(self.value(a), "matmul lhs")?;
        let (k2, n) = require_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dimension(
                "matmul inner",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Matmul { a, b }, 0.0))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, m]);
        {
            let d = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    d[j * m + i] = src[i * n + j];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, ng, Op::Transpose { a }, 0.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Add { a, b }, 0.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Sub { a, b }, 0.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                "mul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Mul { a, b }, 0.0))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).scale(S::from_f64(c));
        let ng = self.needs(a);
        self.push(out, ng, Op::Scale { a }, c)
    }

    /// a[m×n] + bias[n] broadcast over rows.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "add_row_bias lhs")?;
        if self.value(bias).numel() != n {
            return Err(Error::dimension(
                "add_row_bias",
                self.value(a).shape(),
                self.value(bias).shape(),
            ));
        }
        let bdat = self.value(bias).data();
        let mut out = self.value(a).clone();
        {
            let d = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = d[i * n + j] + bdat[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, ng, Op::AddRowBias { a, bias }, 0.0))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| {
            let s = S::one() / (S::one() + (-x).exp());
            x * s
        });
        let ng = self.needs(a);
        self.push(out, ng, Op::Silu { a }, 0.0)
    }

    /// Natural log, elementwise. Inputs must be positive.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.ln());
        let ng = self.needs(a);
        self.push(out, ng, Op::Log { a }, 0.0)
    }

    /// Row-wise RMS normalization with a learned gain vector.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "rms_norm")?;
        if self.value(gain).numel() != n {
            return Err(Error::dimension(
                "rms_norm gain",
                self.value(a).shape(),
                self.value(gain).shape(),
            ));
        }
        let g = self.value(gain).data();
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[m, n]);
        {
            let d = out.data_mut();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()
                    / n as f64;
                let inv = S::from_f64(1.0 / (ms + RMS_EPS).sqrt());
                for j in 0..n {
                    d[i * n + j] = row[j] * inv * g[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(gain);
        Ok(self.push(out, ng, Op::RmsNorm { a, gain }, 0.0))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "softmax_rows")?;
        let mut out = self.value(a).clone();
        softmax_rows_into(out.data_mut(), m, n);
        let ng = self.needs(a);
        Ok(self.push(out, ng, Op::SoftmaxRows { a }, 0.0))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let numel = self.value(a).numel();
        let sum: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(S::from_f64(sum / numel as f64));
        let ng = self.needs(a);
        self.push(out, ng, Op::MeanAll { a }, 0.0)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "slice_cols")?;
        if start + len > n {
            return Err(Error::Parameter(format!(
                "slice_cols {start}..{} out of {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[m, len]);
        {
            let d = out.data_mut();
            for i in 0..m {
                d[i * len..(i + 1) * len]
                    .copy_from_slice(&src[i * n + start..i * n + start + len]);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, ng, Op::SliceCols { a, start }, 0.0))
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Parameter("concat_cols: empty input list".into()));
        }
        let m = require_2d(self.value(inputs[0]), "concat_cols")?.0;
        let mut total = 0usize;
        for &id in inputs {
            let (mi, ni) = require_2d(self.value(id), "concat_cols")?;
            if mi != m {
                return Err(Error::dimension(
                    "concat_cols rows",
                    self.value(inputs[0]).shape(),
                    self.value(id).shape(),
                ));
            }
            total += ni;
        }
        let mut out = Tensor::zeros(&[m, total]);
        {
            let d = out.data_mut();
            let mut off = 0usize;
            for &id in inputs {
                let ni = self.nodes[id].value.cols();
                let src = self.nodes[id].value.data();
                for i in 0..m {
                    d[i * total + off..i * total + off + ni]
                        .copy_from_slice(&src[i * ni..(i + 1) * ni]);
                }
                off += ni;
            }
        }
        let ng = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            out,
            ng,
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
            0.0,
        ))
    }

    /// Select rows of an embedding table by index; backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, n) = require_2d(self.value(table), "gather_rows")?;
        for &ix in indices {
            if ix >= v {
                return Err(Error::Parameter(format!(
                    "gather_rows index {ix} out of {v} rows"
                )));
            }
        }
        let src = self.value(table).data();
        let mut out = Tensor::zeros(&[indices.len(), n]);
        {
            let d = out.data_mut();
            for (i, &ix) in indices.iter().enumerate() {
                d[i * n..(i + 1) * n].copy_from_slice(&src[ix * n..(ix + 1) * n]);
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            ng,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            0.0,
        ))
    }

    /// Rearrange patch tokens [gh·gw × C·p·p] back into an image [C,H,W].
    /// Tokens are row-major over the patch grid; within a token the layout
    /// is (channel, patch_row, patch_col).
    pub fn unpatchify(&mut self, a: NodeId, channels: usize, patch: usize) -> Result<NodeId> {
        let (tokens, pd) = require_2d(self.value(a), "unpatchify")?;
        if pd != channels * patch * patch {
            return Err(Error::Parameter(format!(
                "unpatchify: token dim {pd} != {channels}·{patch}²"
            )));
        }
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens {
            return Err(Error::Parameter(format!(
                "unpatchify: token count {tokens} is not a square grid"
            )));
        }
        let side = grid * patch;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[channels, side, side]);
        {
            let d = out.data_mut();
            scatter_patches(src, d, channels, patch, grid, false);
        }
        let ng = self.needs(a);
        Ok(self.push(out, ng, Op::Unpatchify { a, channels, patch }, 0.0))
    }

    /// Backpropagate from a scalar loss node. Each call runs one clean
    /// reverse pass and adds the resulting gradients into every node with
    /// `needs_grad`, so repeated calls without a fresh graph accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut pass: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        self.accum(&mut pass, loss, &[S::one()]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad || pass[id].is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out_grad = pass[id].clone().unwrap();
            self.backward_op(&mut pass, id, &op, &out_grad);
        }
        for (id, g) in pass.into_iter().enumerate() {
            if let Some(g) = g {
                let stored = self.nodes[id]
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (si, gi) in stored.iter_mut().zip(&g) {
                    *si = *si + *gi;
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, pass: &mut [Option<Vec<S>>], id: NodeId, delta: &[S]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let g = pass[id].get_or_insert_with(|| vec![S::zero(); numel]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi = *gi + d;
        }
    }

    fn accum_fn(&mut self, pass: &mut [Option<Vec<S>>], id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let mut g = pass[id].take().unwrap_or_else(|| vec![S::zero(); numel]);
        f(&mut g);
        pass[id] = Some(g);
    }

    fn backward_op(&mut self, pass: &mut [Option<Vec<S>>], id: NodeId, op: &Op, og: &[S]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let m = self.nodes[a].value.shape()[0];
                let k = self.nodes[a].value.shape()[1];
                let n = self.nodes[b].value.shape()[1];
                if self.needs(a) {
                    let bval = self.nodes[b].value.data().to_vec();
                    self.accum_fn(pass, a, |ga| matmul_bt_into(og, &bval, ga, m, n, k));
                }
                if self.needs(b) {
                    let aval = self.nodes[a].value.data().to_vec();
                    self.accum_fn(pass, b, |gb| matmul_at_into(&aval, og, gb, m, k, n));
                }
            }
            Op::Transpose { a } => {
                let (n, m) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let mut da = vec![S::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = og[i * m + j];
                    }
                }
                self.accum(pass, a, &da);
            }
            Op::Add { a, b } => {
                self.accum(pass, a, og);
                self.accum(pass, b, og);
            }
            Op::Sub { a, b } => {
                self.accum(pass, a, og);
                let neg: Vec<S> = og.iter().map(|&g| -g).collect();
                self.accum(pass, b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let d: Vec<S> = og
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(pass, a, &d);
                }
                if self.needs(b) {
                    let d: Vec<S> = og
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(pass, b, &d);
                }
            }
            Op::Scale { a } => {
                let c = S::from_f64(self.nodes[id].aux);
                let d: Vec<S> = og.iter().map(|&g| g * c).collect();
                self.accum(pass, a, &d);
            }
            Op::AddRowBias { a, bias } => {
                self.accum(pass, a, og);
                if self.needs(bias) {
                    let n = self.nodes[bias].value.numel();
                    let m = og.len() / n;
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + og[i * n + j];
                        }
                    }
                    self.accum(pass, bias, &db);
                }
            }
            Op::Silu { a } => {
                let d: Vec<S> = og
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(&g, &x)| {
                        let s = S::one() / (S::one() + (-x).exp());
                        g * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                self.accum(pass, a, &d);
            }
            Op::Log { a } => {
                let d: Vec<S> = og
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.accum(pass, a, &d);
            }
            Op::RmsNorm { a, gain } => {
                let n = self.nodes[a].value.cols();
                let m = self.nodes[a].value.rows();
                let x = self.nodes[a].value.data().to_vec();
                let g = self.nodes[gain].value.data().to_vec();
                if self.needs(a) {
                    let mut da = vec![S::zero(); m * n];
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let ms: f64 =
                            row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n as f64;
                        let r = (ms + RMS_EPS).sqrt();
                        let inv = 1.0 / r;
                        // dot = Σ_j og_j · g_j · x_j
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += og[i * n + j].as_f64() * g[j].as_f64() * row[j].as_f64();
                        }
                        let c = dot / (n as f64 * r * r * r);
                        for j in 0..n {
                            let v = og[i * n + j].as_f64() * g[j].as_f64() * inv
                                - row[j].as_f64() * c;
                            da[i * n + j] = S::from_f64(v);
                        }
                    }
                    self.accum(pass, a, &da);
                }
                if self.needs(gain) {
                    let mut dg = vec![S::zero(); n];
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let ms: f64 =
                            row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n as f64;
                        let inv = S::from_f64(1.0 / (ms + RMS_EPS).sqrt());
                        for j in 0..n {
                            dg[j] = dg[j] + og[i * n + j] * row[j] * inv;
                        }
                    }
                    self.accum(pass, gain, &dg);
                }
            }
            Op::SoftmaxRows { a } => {
                let n = self.nodes[id].value.cols();
                let m = self.nodes[id].value.rows();
                let y = self.nodes[id].value.data().to_vec();
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot = dot + og[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (og[i * n + j] - dot);
                    }
                }
                self.accum(pass, a, &da);
            }
            Op::MeanAll { a } => {
                let numel = self.nodes[a].value.numel();
                let c = og[0] / S::from_f64(numel as f64);
                let d = vec![c; numel];
                self.accum(pass, a, &d);
            }
            Op::SliceCols { a, start } => {
                let n = self.nodes[a].value.cols();
                let m = self.nodes[a].value.rows();
                let len = self.nodes[id].value.cols();
                self.accum_fn(pass, a, |ga| {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] = ga[i * n + start + j] + og[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { ref inputs } => {
                let m = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut off = 0usize;
                for &input in inputs {
                    let ni = self.nodes[input].value.cols();
                    if self.needs(input) {
                        let mut d = vec![S::zero(); m * ni];
                        for i in 0..m {
                            d[i * ni..(i + 1) * ni]
                                .copy_from_slice(&og[i * total + off..i * total + off + ni]);
                        }
                        self.accum(pass, input, &d);
                    }
                    off += ni;
                }
            }
            Op::GatherRows { table, ref indices } => {
                let n = self.nodes[table].value.cols();
                let indices = indices.clone();
                self.accum_fn(pass, table, |gt| {
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..n {
                            gt[ix * n + j] = gt[ix * n + j] + og[i * n + j];
                        }
                    }
                });
            }
            Op::Unpatchify { a, channels, patch } => {
                let tokens = self.nodes[a].value.rows();
                let grid = (tokens as f64).sqrt().round() as usize;
                let mut da = vec![S::zero(); self.nodes[a].value.numel()];
                scatter_patches(og, &mut da, channels, patch, grid, true);
                self.accum(pass, a, &da);
            }
        }
    }
}

/// Copy between token layout [gh·gw × C·p·p] and image layout [C, H, W].
/// `to_tokens = false` scatters tokens into the image; `true` is the inverse.
fn scatter_patches<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    channels: usize,
    patch: usize,
    grid: usize,
    to_tokens: bool,
) {
    let side = grid * patch;
    let pd = channels * patch * patch;
    for gh in 0..grid {
        for gw in 0..grid {
            let tok = gh * grid + gw;
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let ti = tok * pd + c * patch * patch + py * patch + px;
                        let ii = c * side * side + (gh * patch + py) * side + (gw * patch + px);
                        if to_tokens {
                            dst[ti] = dst[ti] + src[ii];
                        } else {
                            dst[ii] = src[ti];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`Graph::unpatchify`] on plain tensors: image [C,H,W] (H = W,
/// H divisible by `patch`) to tokens [grid² × C·p·p].
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] % patch != 0 {
        return Err(Error::Parameter(format!(
            "patchify: expected square [C,H,H] with H divisible by {patch}, got {shape:?}"
        )));
    }
    let (channels, side) = (shape[0], shape[1]);
    let grid = side / patch;
    let mut out = Tensor::zeros(&[grid * grid, channels * patch * patch]);
    scatter_patches(image.data(), out.data_mut(), channels, patch, grid, true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::matmul;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued builder with respect
    /// to one leaf tensor.
    fn finite_diff(
        build: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId,
        x: &Tensor<f64>,
        h: f64,
    ) -> Vec<f64> {
        let mut grads = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let leaf = g.leaf(xp, false);
                let loss = build(&mut g, leaf);
                g.value(loss).item()
            };
            grads.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        grads
    }

    fn check_grad(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, x: Tensor<f64>, tol: f64) {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let loss = build(&mut g, leaf);
        g.backward(loss).unwrap();
        let analytic = g.grad(leaf).unwrap().to_vec();
        let numeric = finite_diff(&build, &x, 1e-4);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = n.abs().max(1e-3);
            assert!(
                (a - n).abs() / denom < tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64_slice(&[1, 2], &[1.0, 2.0]).unwrap(), true);
        let sq = g.mul(w, w).unwrap();
        let mean = g.mean_all(sq);
        let loss = g.scale(mean, 2.0); // mean·2 = sum for 2 elements
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grads() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap(), true);
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.mean_all(c);
        g.backward(loss).unwrap();
        // no path from loss to w
        assert!(g.grad(w).is_none() || g.grad(w).unwrap().iter().all(|&v| v == 0.0));
        let _ = w;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 3.0]).unwrap(), true);
        let loss = g.mean_all(w);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);

        // dA with B fixed
        let b2 = b.clone();
        check_grad(
            move |g, leaf| {
                let bc = g.constant(b2.clone());
                let c = g.matmul(leaf, bc).unwrap();
                let sq = g.mul(c, c).unwrap();
                g.mean_all(sq)
            },
            a.clone(),
            1e-5,
        );

        // dB with A fixed
        check_grad(
            move |g, leaf| {
                let ac = g.constant(a.clone());
                let c = g.matmul(ac, leaf).unwrap();
                let sq = g.mul(c, c).unwrap();
                g.mean_all(sq)
            },
            b,
            1e-5,
        );
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        check_grad(
            |g, leaf| {
                let s = g.silu(leaf);
                let sq = g.mul(s, s).unwrap();
                g.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        check_grad(
            |g, leaf| {
                let y = g.softmax_rows(leaf).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let pos = x.map(|v| v.abs() + 0.5);
        check_grad(
            |g, leaf| {
                let y = g.log(leaf);
                g.mean_all(y)
            },
            pos,
            1e-4,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        check_grad(
            |g, leaf| {
                let s = g.slice_cols(leaf, 1, 3).unwrap();
                let t = g.transpose(s).unwrap();
                let sq = g.mul(t, t).unwrap();
                g.mean_all(sq)
            },
            x.clone(),
            1e-4,
        );
        let gain = Tensor::<f64>::randn(&[6], 0.3, &mut rng).map(|v| v + 1.0);
        check_grad(
            move |g, leaf| {
                let gn = g.constant(gain.clone());
                let y = g.rms_norm(leaf, gn).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.mean_all(sq)
            },
            x,
            1e-4,
        );
        let img = Tensor::<f64>::randn(&[16, 12], 1.0, &mut rng);
        check_grad(
            |g, leaf| {
                let im = g.unpatchify(leaf, 3, 2).unwrap();
                let sq = g.mul(im, im).unwrap();
                g.mean_all(sq)
            },
            img,
            1e-4,
        );
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(
            Tensor::from_f64_slice(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            true,
        );
        let gathered = g.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = g.mean_all(gathered);
        g.backward(loss).unwrap();
        let grad = g.grad(table).unwrap();
        // each gathered element contributes 1/6
        let c = 1.0 / 6.0;
        assert_eq!(grad, &[c, c, 2.0 * c, 2.0 * c, 0.0, 0.0]);
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
        let tokens = patchify(&img, 4).unwrap();
        assert_eq!(tokens.shape(), &[4, 48]);
        let mut g = Graph::new();
        let t = g.constant(tokens);
        let back = g.unpatchify(t, 3, 4).unwrap();
        assert_eq!(g.value(back).data(), img.data());
    }

    #[test]
    fn graph_matches_eager_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[4, 7], 1.0, &mut rng);
        let eager = matmul(&a, &b).unwrap();
        let mut g = Graph::new();
        let an = g.constant(a);
        let bn = g.constant(b);
        let cn = g.matmul(an, bn).unwrap();
        assert_eq!(g.value(cn).data(), eager.data());
    }
}
