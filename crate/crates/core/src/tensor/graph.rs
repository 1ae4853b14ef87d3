//! Reverse-mode tape.
//!
//! Every recorded op keeps the activations its vector-Jacobian product needs.
//! `backward` walks the node list from the output down to index 0, which is
//! exactly the reverse of construction order. Nodes that cannot reach a
//! gradient-requiring leaf are skipped.

use super::{layer_norm_rows, matmul, matmul_nt, matmul_tn, softmax_rows, transpose, Tensor, L2_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    NormalizeCols {
        x: Var,
        sums: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    ArcMargin {
        cos: Var,
        label: usize,
        /// d(target logit)/d(cos) at the target entry.
        target_slope: f64,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]. Nodes that do not lead to a
/// gradient-requiring leaf have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when the output did not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x[r×c] + b[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect()).expect("same shape");
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::dim("mul_const", xv.shape(), mask.shape()));
        }
        let data = xv.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, mask), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) = layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Divides each column by its sum.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut sums = vec![0.0; c];
        for i in 0..r {
            for (s, v) in sums.iter_mut().zip(xv.row_slice(i)) {
                *s += v;
            }
        }
        if let Some(j) = sums.iter().position(|s| s.abs() < 1e-20) {
            return Err(Error::Degenerate(format!("column {j} sums to zero")));
        }
        let data = xv.data().iter().enumerate().map(|(i, v)| v / sums[i % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::NormalizeCols { x, sums }, &[x]))
    }

    /// Scales each row to unit L2 norm; rows with norm ≤ 1e-12 pass through.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > L2_EPS {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != r {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Column means of `x[r×c]` as a `1×c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (s, v) in data.iter_mut().zip(xv.row_slice(i)) {
                *s += v;
            }
        }
        data.iter_mut().for_each(|s| *s /= r as f64);
        self.push(Tensor::row(data), Op::MeanRows(x), &[x])
    }

    /// Margin-adjusted, scaled logits: `scale · AF(cos_n, [n == label], margin)`.
    pub fn arc_margin(&mut self, cos: Var, label: usize, margin: f64, scale: f64) -> Result<Var> {
        let cv = self.value(cos);
        if label >= cv.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                cv.len()
            )));
        }
        let mut data: Vec<f64> = cv.data().iter().map(|s| scale * s).collect();
        let s = cv.data()[label];
        data[label] = scale * crate::training::adjusted_cosine(s, true, margin);
        let target_slope = crate::training::adjusted_cosine_slope(s, true, margin);
        let out = Tensor::new(cv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::ArcMargin {
                cos,
                label,
                target_slope,
                scale,
            },
            &[cos],
        ))
    }

    /// `−log softmax(logits)[label]` as a `1×1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                lv.len()
            )));
        }
        let mut probs = lv.data().to_vec();
        super::softmax_in_place(&mut probs);
        let loss = super::log_sum_exp(lv.data()) - lv.data()[label];
        Ok(self.push(
            Tensor::row(vec![loss]),
            Op::CrossEntropy { logits, label, probs },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::dim("backward", out.shape(), &[1]));
        }
        self.backward_with(output, Tensor::filled(out.shape(), 1.0))
    }

    /// Reverse pass seeded with an arbitrary cotangent for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dim("backward_with", seed.shape(), self.value(output).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let da = matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                if self.wants(*a) {
                    let da = matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, transpose(g)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(x, s) => {
                let dx = g.data().iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::MulConst(x, mask) => {
                let dx = g.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = g.cols();
                let rows = g.rows();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xr = normalized.row_slice(r);
                        for j in 0..c {
                            dgain[j] += gr[j] * xr[j];
                            dbias[j] += gr[j];
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gshape, dgain)?);
                    self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let n = c as f64;
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xr = normalized.row_slice(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = inv_std[r] / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::NormalizeCols { x, sums } => {
                let y = &node.value;
                let c = y.cols();
                let mut inner = vec![0.0; c];
                for r in 0..y.rows() {
                    for (j, acc) in inner.iter_mut().enumerate() {
                        *acc += g.get(r, j) * y.get(r, j);
                    }
                }
                let dx = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| (gv - inner[i % c]) / sums[i % c])
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.data().to_vec();
                for (r, n) in norms.iter().enumerate() {
                    if *n <= L2_EPS {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * inner) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let len = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for r in 0..g.rows() {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), data)?);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let r = xv.rows() as f64;
                let c = xv.cols();
                let dx = (0..xv.len()).map(|i| g.data()[i % c] / r).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ArcMargin {
                cos,
                label,
                target_slope,
                scale,
            } => {
                let mut dx: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
                dx[*label] = g.data()[*label] * scale * target_slope;
                self.accumulate(grads, *cos, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let up = g.data()[0];
                let mut dx: Vec<f64> = probs.iter().map(|p| p * up).collect();
                dx[*label] -= up;
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, dx)?);
            }
        }
        Ok(())
    }
}
