use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// The differentiable primitives a [`Graph`] can record. Every entry has a
/// forward rule (the `Graph` method of the same name) and a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    ScaleBy,
    Softmax,
    LayerNorm,
    Gelu,
    LeakyRelu,
    L2Normalize,
    Mean,
    SumAll,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SliceRows,
    GatherRows,
    ScatterEntries,
    Diag,
    MaskedLogSumExp,
    Exp,
    Log,
    ClampMax,
    Incidence,
}

impl Primitive {
    pub const ALL: [Primitive; 27] = [
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::AddBias,
        Primitive::Scale,
        Primitive::ScaleBy,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Gelu,
        Primitive::LeakyRelu,
        Primitive::L2Normalize,
        Primitive::Mean,
        Primitive::SumAll,
        Primitive::ConcatCols,
        Primitive::ConcatRows,
        Primitive::SliceCols,
        Primitive::SliceRows,
        Primitive::GatherRows,
        Primitive::ScatterEntries,
        Primitive::Diag,
        Primitive::MaskedLogSumExp,
        Primitive::Exp,
        Primitive::Log,
        Primitive::ClampMax,
        Primitive::Incidence,
    ];
}

pub fn primitive_set() -> &'static [Primitive] {
    &Primitive::ALL
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterEntries {
        values: Var,
        positions: Vec<(usize, usize)>,
    },
    Diag(Var),
    MaskedLogSumExp {
        x: Var,
        probs: Vec<f64>,
    },
    Exp(Var),
    Log(Var),
    ClampMax(Var, f64),
    Incidence {
        scores: Var,
        omega: Vec<Vec<usize>>,
        pre: Tensor,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mean { .. } => "mean",
            Op::SumAll(..) => "sum_all",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterEntries { .. } => "scatter_entries",
            Op::Diag(..) => "diag",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMax(..) => "clamp_max",
            Op::Incidence { .. } => "incidence",
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            shapes: format!("expected a matrix, got {s:?}"),
        }),
    }
}

/// Row-wise softmax restricted to the columns flagged `true`. Rows with no
/// valid column are all zeros.
pub(crate) fn masked_softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Vec<f64> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let valid = |j: usize| mask.is_none_or(|mk| mk[j]);
        let max = (0..n)
            .filter(|&j| valid(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in (0..n).filter(|&j| valid(j)) {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            total += e;
        }
        for v in &mut out[i * n..(i + 1) * n] {
            *v /= total;
        }
    }
    out
}

/// Hyperedge weights from per-row scores and support sets.
///
/// Returns `(pre, post)`: `pre` has a unit diagonal and a softmax over
/// `scores[i, omega[i]]` in each row; `post` additionally copies row 0 into
/// column 0 (`post[i,0] = pre[0,i]` for `i >= 1`).
pub(crate) fn incidence_weights(scores: &Tensor, omega: &[Vec<usize>]) -> (Tensor, Tensor) {
    let n = scores.rows();
    let mut pre = Tensor::zeros(&[n, n]);
    for (i, support) in omega.iter().enumerate() {
        if !support.is_empty() {
            let max = support
                .iter()
                .map(|&j| scores.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = support
                .iter()
                .map(|&j| (scores.get(i, j) - max).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            for (&j, e) in support.iter().zip(&exps) {
                pre.set(i, j, e / total);
            }
        }
        pre.set(i, i, 1.0);
    }
    let mut post = pre.clone();
    for i in 1..n {
        post.set(i, 0, pre.get(0, i));
    }
    (pre, post)
}

impl Graph {
    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg, None)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg, None))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        dims2(self.value(x), "transpose")?;
        let value = self.value(x).transpose();
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg, None))
    }

    /// Adds the vector `bias` (length = column count) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = dims2(tx, "add_bias")?;
        if tb.numel() != n {
            return Err(Error::shape("add_bias", &[tx.shape(), tb.shape()]));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg, None))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by", &[self.shape(x), self.shape(s)]));
        }
        let c = self.value(s).data()[0];
        let value = self.map(x, |v| v * c);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg, None))
    }

    /// Row-wise softmax. With a column mask, masked columns get exactly zero
    /// probability and the softmax runs over the remaining columns.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "softmax")?;
        if let Some(mk) = &mask {
            if mk.len() != n {
                return Err(Error::shape("softmax", &[self.shape(x), &[mk.len()]]));
            }
        }
        let data = masked_softmax_rows(self.value(x), mask.as_deref());
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.unary(x, value, Op::Softmax { x }))
    }

    /// Row-wise layer normalization followed by the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "layer_norm")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                &[self.shape(x), tg.shape(), tb.shape()],
            ));
        }
        let tx = self.value(x);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            None,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, gelu);
        self.unary(x, value, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.map(x, |v| leaky(v, slope));
        self.unary(x, value, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::NonFinite(format!("log of non-positive value {v}")));
        }
        let value = self.map(x, f64::ln);
        Ok(self.unary(x, value, Op::Log(x)))
    }

    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        let value = self.map(x, |v| v.min(max));
        self.unary(x, value, Op::ClampMax(x, max))
    }

    /// Scales each row (last axis) to unit L2 norm. An all-zero row stays zero
    /// and a warning is recorded.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let m = tx.numel() / n.max(1);
        let mut out = tx.data().to_vec();
        let mut norms = vec![0.0; m];
        let mut zero_rows = Vec::new();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm == 0.0 {
                zero_rows.push(i);
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        if !zero_rows.is_empty() {
            self.warn(format!(
                "l2_normalize: zero vector at rows {zero_rows:?} mapped to zero"
            ));
        }
        Ok(self.unary(x, value, Op::L2Normalize { x, norms }))
    }

    /// Mean over `axis` of a matrix: axis 0 gives `[1, cols]`, axis 1 gives `[rows, 1]`.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "mean")?;
        let tx = self.value(x);
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(tx.row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::new(vec![1, n], out)?
            }
            1 => {
                let out = (0..m)
                    .map(|i| tx.row(i).iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::new(vec![m, 1], out)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "mean",
                    shapes: format!("axis {axis} out of range for {:?}", tx.shape()),
                })
            }
        };
        Ok(self.unary(x, value, Op::Mean { x, axis }))
    }

    /// Sum of all entries, as a shape-`[]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.unary(x, value, Op::SumAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::ShapeMismatch {
            op: "concat_cols",
            shapes: "no inputs".into(),
        })?;
        let (m, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", &[self.shape(first), self.shape(p)]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg, None))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::ShapeMismatch {
            op: "concat_rows",
            shapes: "no inputs".into(),
        })?;
        let (_, n) = dims2(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", &[self.shape(first), self.shape(p)]));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg, None))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                shapes: format!("{start}..{end} of {:?}", self.shape(x)),
            });
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let value = Tensor::new(vec![m, end - start], out)?;
        Ok(self.unary(x, value, Op::SliceCols { x, start }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_rows")?;
        if start > end || end > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                shapes: format!("{start}..{end} of {:?}", self.shape(x)),
            });
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], out)?;
        Ok(self.unary(x, value, Op::SliceRows { x, start }))
    }

    /// Stacks the rows `x[index[0]], x[index[1]], ...`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather_rows")?;
        if let Some(bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                shapes: format!("row {bad} of {:?}", self.shape(x)),
            });
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in &index {
            out.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![index.len(), n], out)?;
        Ok(self.unary(x, value, Op::GatherRows { x, index }))
    }

    /// Places the entries of `values` (any shape, `positions.len()` elements)
    /// at `positions` of a zero `rows × cols` matrix. Positions must be distinct.
    pub fn scatter_entries(
        &mut self,
        values: Var,
        positions: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let tv = self.value(values);
        if tv.numel() != positions.len()
            || positions.iter().any(|&(i, j)| i >= rows || j >= cols)
        {
            return Err(Error::ShapeMismatch {
                op: "scatter_entries",
                shapes: format!(
                    "{} values into {} positions of [{rows}, {cols}]",
                    tv.numel(),
                    positions.len()
                ),
            });
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for (&(i, j), &v) in positions.iter().zip(tv.data()) {
            out.set(i, j, v);
        }
        Ok(self.unary(values, out, Op::ScatterEntries { values, positions }))
    }

    /// Diagonal of a square matrix as an `[n, 1]` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "diag")?;
        if m != n {
            return Err(Error::shape("diag", &[self.shape(x)]));
        }
        let out = (0..n).map(|i| self.value(x).get(i, i)).collect();
        let value = Tensor::new(vec![n, 1], out)?;
        Ok(self.unary(x, value, Op::Diag(x)))
    }

    /// Row-wise `log Σ_j mask[i,j] exp(x[i,j])` as an `[m, 1]` column.
    /// `mask` is row-major with the shape of `x`; every row needs at least one
    /// retained entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "masked_logsumexp")?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_logsumexp", &[self.shape(x), &[mask.len()]]));
        }
        let tx = self.value(x);
        let mut out = vec![0.0; m];
        let mut probs = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let keep = &mask[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep[j])
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::ShapeMismatch {
                    op: "masked_logsumexp",
                    shapes: format!("row {i} has no retained entry"),
                });
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| keep[j]) {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                total += e;
            }
            for j in 0..n {
                probs[i * n + j] /= total;
            }
            out[i] = max + total.ln();
        }
        let value = Tensor::new(vec![m, 1], out)?;
        Ok(self.unary(x, value, Op::MaskedLogSumExp { x, probs }))
    }

    /// Hyperedge weight matrix from a square score matrix and per-row support
    /// sets. See [`crate::hgnn::build_incidence`] for the construction; the
    /// supports are fixed inputs, so gradients reach `scores` only at the
    /// selected positions.
    pub fn incidence(&mut self, scores: Var, omega: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = dims2(self.value(scores), "incidence")?;
        if m != n || omega.len() != n || omega.iter().flatten().any(|&j| j >= n) {
            return Err(Error::ShapeMismatch {
                op: "incidence",
                shapes: format!("scores {:?} with {} support rows", self.shape(scores), omega.len()),
            });
        }
        let (pre, post) = incidence_weights(self.value(scores), &omega);
        Ok(self.unary(scores, post, Op::Incidence { scores, omega, pre }))
    }
}
