use super::ops::{gelu_grad, Op};
use super::{backward_fault_active, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{GradRecord, Tensor};

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

impl Graph {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns one gradient per named parameter that the loss depends on.
    /// A loss that depends on no parameter yields an empty record.
    pub fn backward(&self, loss: Var) -> Result<GradRecord> {
        let lv = self.value(loss);
        if !(lv.shape().is_empty() || lv.shape() == [1]) {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut record = GradRecord::new();
        if !self.requires_grad(loss) {
            return Ok(record);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(name) = &node.param {
                let grad = Tensor::new(node.value.shape().to_vec(), g)?;
                record.insert(name.clone(), grad);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(record)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.rows(), out.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g[i * n + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if needs(*b) {
                    let n = out.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                if needs(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
                if needs(*s) {
                    let tx = self.value(*x);
                    let ds: f64 = g.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Softmax { x, .. } => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                if backward_fault_active() {
                    dx.iter_mut().for_each(|v| *v *= 1.05);
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let tg = self.value(*gamma);
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, grow) in g.chunks(n).enumerate() {
                        let h = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (grow, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * h[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; n];
                    for grow in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let dx = g.iter().zip(tx.data()).map(|(a, &v)| a * gelu_grad(v)).collect();
                accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(a, &v)| if v >= 0.0 { *a } else { a * slope })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.iter().zip(out.data()).map(|(a, y)| a * y).collect();
                accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let dx = g.iter().zip(tx.data()).map(|(a, v)| a / v).collect();
                accumulate(grads, *x, dx);
            }
            Op::ClampMax(x, max) => {
                let tx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(a, v)| if v < max { *a } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (grow[j] - yrow[j] * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean { x, axis } => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = if *axis == 0 {
                            g[j] / m as f64
                        } else {
                            g[i] / n as f64
                        };
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let len = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(*p) {
                        let mut dp = Vec::with_capacity(out.rows() * w);
                        for row in g.chunks(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if needs(*p) {
                        accumulate(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (n, w) = (tx.cols(), out.cols());
                let mut dx = vec![0.0; tx.numel()];
                for (i, grow) in g.chunks(w.max(1)).enumerate().take(out.rows()) {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&grow[..w]);
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScatterEntries { values, positions } => {
                let cols = out.cols();
                let dv = positions.iter().map(|&(i, j)| g[i * cols + j]).collect();
                accumulate(grads, *values, dv);
            }
            Op::Diag(x) => {
                let n = out.rows();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = g[i];
                }
                accumulate(grads, *x, dx);
            }
            Op::MaskedLogSumExp { x, probs, .. } => {
                let n = self.value(*x).cols();
                let mut dx = probs.clone();
                for (i, row) in dx.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v *= g[i]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Incidence { scores, omega, pre } => {
                let n = out.rows();
                // Undo the column-0 overwrite: those entries were copies of row 0.
                let mut dpre = g.to_vec();
                for i in 1..n {
                    dpre[i] += g[i * n];
                    dpre[i * n] = 0.0;
                }
                let mut ds = vec![0.0; n * n];
                for (i, support) in omega.iter().enumerate() {
                    let dot: f64 = support
                        .iter()
                        .map(|&j| pre.get(i, j) * dpre[i * n + j])
                        .sum();
                    for &j in support {
                        ds[i * n + j] = pre.get(i, j) * (dpre[i * n + j] - dot);
                    }
                }
                accumulate(grads, *scores, ds);
            }
        }
    }
}
