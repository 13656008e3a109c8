//! Wengert tape: forward ops are recorded in order and replayed in reverse to
//! accumulate adjoints.

use std::sync::Arc;

use super::{
    masked_softmax, matmul_nt_raw, matmul_raw, matmul_tn_raw, Mask, ParamId, ParamStore, Result,
    Tensor, TensorError,
};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Masked entries have zero probability, hence zero adjoint, so the
    /// mask itself is not needed in the reverse pass.
    Softmax {
        x: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    MinMaxScale {
        x: Var,
        lo: Vec<usize>,
        hi: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation. Single owner; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every tape node reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = self
                .op_inputs(&op)
                .iter()
                .all(|i| self.value(*i).is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "non-finite output from {op:?} on finite inputs"
            );
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.matrix_dims("matmul")?;
        let (k2, n) = tb.matrix_dims("matmul")?;
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.matrix_dims("matmul_nt")?;
        let (n, k2) = tb.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let out = Tensor::new(vec![m, n], matmul_nt_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = ta.matrix_dims("add_row")?;
        if tr.numel() != n {
            return Err(shape_err("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = tx.matrix_dims("layer_norm")?;
        if d < 2 {
            return Err(TensorError::Invalid(
                "layer_norm needs at least 2 features".into(),
            ));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row softmax over allowed entries; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<Mask>) -> Result<Var> {
        let out = masked_softmax(self.value(x), Some(&mask))?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = masked_softmax(self.value(x), None)?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Selects rows of a matrix by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.matrix_dims("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.matrix_dims("concat_rows")?;
            if c != d {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.value(parts[0]).matrix_dims("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat_cols")?;
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.value(parts[0]),
                    self.value(p),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = t.matrix_dims("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let out = Tensor::new(
            vec![len, d],
            t.data()[start * d..(start + len) * d].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = t.matrix_dims("slice_cols")?;
        if len == 0 || start + len > d {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: d,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ_i w_i Σ_c (pred_ic − target_ic)²`.
    pub fn mse(&mut self, pred: Var, target: Tensor, weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        let (m, c) = p.matrix_dims("mse")?;
        if p.shape() != target.shape() || weights.len() != m {
            return Err(shape_err("mse", p, &target));
        }
        let mut total = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..c {
                let diff = p.data()[i * c + j] - target.data()[i * c + j];
                row += diff * diff;
            }
            total += weights[i] * row;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Mse {
                pred,
                target,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `−Σ_i w_i Σ_a target_ia · log softmax(logits_i)_a`.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: Tensor,
        weights: &[f64],
    ) -> Result<Var> {
        let l = self.value(logits);
        let (m, a) = l.matrix_dims("soft_cross_entropy")?;
        if l.shape() != target.shape() || weights.len() != m {
            return Err(shape_err("soft_cross_entropy", l, &target));
        }
        let mut probs = vec![0.0; m * a];
        let mut total = 0.0;
        for i in 0..m {
            let row = &l.data()[i * a..(i + 1) * a];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut ce = 0.0;
            for j in 0..a {
                let logp = row[j] - lse;
                probs[i * a + j] = logp.exp();
                let t = target.data()[i * a + j];
                if t != 0.0 {
                    ce -= t * logp;
                }
            }
            total += weights[i] * ce;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                logits,
                target,
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Rescales each row to `[0, 1]` by its own min and max.
    pub fn min_max_scale(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = t.matrix_dims("min_max_scale")?;
        let mut lo = Vec::with_capacity(m);
        let mut hi = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            let row = t.row(i);
            let (mut a, mut b) = (0, 0);
            for (j, &v) in row.iter().enumerate() {
                if v < row[a] {
                    a = j;
                }
                if v > row[b] {
                    b = j;
                }
            }
            let range = row[b] - row[a] + LAYER_NORM_EPS;
            out.extend(row.iter().map(|v| (v - row[a]) / range));
            lo.push(a);
            hi.push(b);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MinMaxScale { x, lo, hi }))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::MinMaxScale { x, .. } => vec![*x],
        }
    }

    /// Reverse pass from a scalar `loss`. The tape is left untouched, so the
    /// same tape can be replayed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                acc(*a, matmul_nt_raw(g, tb.data(), m, n, k));
                acc(*b, matmul_tn_raw(ta.data(), g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                acc(*a, matmul_raw(g, tb.data(), m, n, k));
                acc(*b, matmul_tn_raw(g, ta.data(), m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).numel();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (s, v) in gr.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*a, g.to_vec());
                acc(*row, gr);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let m = rstd.len();
                let mut dx = vec![0.0; m * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for i in 0..m {
                    let gy = &g[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        dg[j] += gy[j] * xh[j];
                        db[j] += gy[j];
                    }
                    let scale = rstd[i] / d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        dx[i * d + j] = scale * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Softmax { x, .. } => {
                let p = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; p.len()];
                for i in 0..p.len() / n {
                    let pr = &p[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    acc(p, dp);
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let d = t.cols();
                let mut dx = vec![0.0; t.numel()];
                dx[start * d..start * d + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let d = t.cols();
                let len = node.value.cols();
                let mut dx = vec![0.0; t.numel()];
                for i in 0..t.rows() {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mse {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred);
                let c = p.cols();
                let dp = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(idx, (pv, tv))| 2.0 * weights[idx / c] * (pv - tv) * g[0])
                    .collect();
                acc(*pred, dp);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                weights,
                probs,
            } => {
                let a = self.value(*logits).cols();
                let mut dl = vec![0.0; probs.len()];
                for i in 0..probs.len() / a {
                    let t = &target.data()[i * a..(i + 1) * a];
                    let mass: f64 = t.iter().sum();
                    for j in 0..a {
                        dl[i * a + j] = weights[i] * (probs[i * a + j] * mass - t[j]) * g[0];
                    }
                }
                acc(*logits, dl);
            }
            Op::MinMaxScale { x, lo, hi } => {
                let t = self.value(*x);
                let d = t.cols();
                let mut dx = vec![0.0; t.numel()];
                for i in 0..t.rows() {
                    let row = t.row(i);
                    let (a, b) = (lo[i], hi[i]);
                    let range = row[b] - row[a] + LAYER_NORM_EPS;
                    let gy = &g[i * d..(i + 1) * d];
                    let mut d_lo = 0.0;
                    let mut d_hi = 0.0;
                    for j in 0..d {
                        let y = (row[j] - row[a]) / range;
                        dx[i * d + j] += gy[j] / range;
                        d_lo += gy[j] * (y - 1.0) / range;
                        d_hi -= gy[j] * y / range;
                    }
                    dx[i * d + a] += d_lo;
                    dx[i * d + b] += d_hi;
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }

    /// Sums adjoints of every use of each parameter. Unused parameters get
    /// zero tensors.
    pub fn param_gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads.get(idx).and_then(|g| g.as_ref()) {
                    for (o, v) in out[id.index()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
        out.into_iter()
            .zip(store.iter())
            .map(|(g, (_, _, t))| Tensor::new(t.shape().to_vec(), g).expect("shape preserved"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let i2 = tape.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.input(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random(&mut rng, vec![4, 2]);
        let w = random(&mut rng, vec![3, 2]);
        let a = random(&mut rng, vec![3, 4]);
        let err = finite_diff_check(
            |tape, x| {
                let bv = tape.input(b.clone());
                let wv = tape.input(w.clone());
                let c = tape.matmul(x, bv)?;
                let cw = tape.mul(c, wv)?;
                Ok(tape.sum(cw))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.input(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let b = tape.input(Tensor::zeros(vec![2]));
        let c = tape.input(Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap());
        let y = tape.layer_norm(c, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.input(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.input(random(&mut rng, vec![2, 8]));
        let g8 = tape.input(Tensor::new(vec![8], vec![1.0; 8]).unwrap());
        let b8 = tape.input(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g8, b8).unwrap();
        for i in 0..2 {
            let mean: f64 = tape.value(y).row(i).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![3, 1]));
        let g = tape.input(Tensor::zeros(vec![1]));
        assert!(tape.layer_norm(x, g, g).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn replaying_backward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.input(random(&mut rng, vec![3, 4]));
        let w = tape.input(random(&mut rng, vec![4, 4]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax(h).unwrap();
        let l = tape.sum(s);
        let sq = tape.mul(h, h).unwrap();
        let l2 = tape.sum(sq);
        let total = tape.add(l, l2).unwrap();
        let g1 = tape.backward(total).unwrap();
        let g2 = tape.backward(total).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
    }

    #[test]
    fn masked_entries_have_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap());
        let mask = Arc::new(Mask::new(1, 3, vec![true, false, true]).unwrap());
        let p = tape.masked_softmax(x, mask).unwrap();
        let w = tape.input(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let pw = tape.mul(p, w).unwrap();
        let l = tape.sum(pw);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap()[1], 0.0);
    }

    #[test]
    fn gather_out_of_range_is_an_error() {
        let mut tape = Tape::new();
        let t = tape.input(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            tape.gather_rows(t, &[0, 3]),
            Err(TensorError::Index { .. })
        ));
    }
}
