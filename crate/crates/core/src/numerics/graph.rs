//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! A graph is built for one forward pass and then discarded.

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    MaxCols(Var, Vec<usize>),
    MeanSpans(Var, Vec<(usize, usize)>),
    PadCols(Var),
    Pick(Var, Vec<usize>),
    GruCell {
        ax: Var,
        h: Var,
        wh: Var,
        bh: Var,
        z: Vec<f64>,
        r: Vec<f64>,
        n: Vec<f64>,
        ah_n: Vec<f64>,
    },
    Bce {
        s: Var,
        label: f64,
    },
    Focal {
        s: Var,
        label: f64,
        gamma: f64,
        weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp used by the probability losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; gradients are never accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let [r, c] = self.shape(v);
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(r, c, g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            sa[0],
            sa[1],
            sb[1],
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(sa[0], sb[1], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let mut out = vec![0.0; sa[0] * sb[0]];
        matmul_bt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            sa[0],
            sa[1],
            sb[0],
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(sa[0], sb[0], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(sa[0], sa[1], out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(shape_err("add_row", sa, sr));
        }
        let r = self.value(row).data().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(sa[1].max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(sa[0], sa[1], out)?, Op::AddRow(a, row), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(r, c, out).expect("map shape"), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of an empty list".into()))?;
        rest.iter().try_fold(*first, |acc, v| self.add(acc, *v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of an empty list".into()))?;
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[1] != cols {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of an empty list".into()))?;
        let rows = self.shape(first)[0];
        for p in parts {
            let s = self.shape(*p);
            if s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(rows, cols, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start >= end || end > s[0] {
            return Err(shape_err("slice_rows", s, [start, end]));
        }
        let data = self.value(a).data()[start * s[1]..end * s[1]].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(end - start, s[1], data)?,
            Op::SliceRows(a, start),
            rg,
        ))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, i + 1)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start >= end || end > s[1] {
            return Err(shape_err("slice_cols", s, [start, end]));
        }
        let v = self.value(a);
        let data: Vec<f64> = (0..s[0])
            .flat_map(|r| v.row_slice(r)[start..end].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(s[0], end - start, data)?,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Embedding lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        let v = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &id in ids {
            if id >= s[0] {
                return Err(Error::Vocabulary { id, size: s[0] });
            }
            data.extend_from_slice(v.row_slice(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(ids.len(), s[1], data)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature.is_finite() && temperature > 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )))
        }
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let [r, c] = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = ((*x - m) / temperature).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, c, out)?, Op::Softmax(a, temperature), rg))
    }

    /// Row-wise `log_softmax(x / temperature)`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let [r, c] = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let lse = m + row
                .iter()
                .map(|x| (x / temperature - m).exp())
                .sum::<f64>()
                .ln();
            for x in row.iter_mut() {
                *x = *x / temperature - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, c, out)?, Op::LogSoftmax(a, temperature), rg))
    }

    /// Per-row layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let [r, d] = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != [1, d] {
                return Err(shape_err("layer_norm", [r, d], self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(r, d, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x / max(‖x‖, eps)` per row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "normalize eps must be > 0, got {eps}"
            )));
        }
        let [r, d] = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(r, d, out)?,
            Op::NormalizeRows { x, eps, norms },
            rg,
        ))
    }

    /// Maximum over columns for every row (`m × 1`). Ties go to the lowest index.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if c == 0 {
            return Err(shape_err("max_cols", [r, c], [r, 1]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row_slice(i);
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            arg.push(best);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, 1, out)?, Op::MaxCols(a, arg), rg))
    }

    /// Mean of the rows inside each half-open span; spans must be non-empty and in range.
    pub fn mean_spans(&mut self, a: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let [r, d] = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; spans.len() * d];
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s >= e || e > r {
                return Err(Error::Alignment(format!(
                    "span {i} = [{s},{e}) is empty or outside {r} rows"
                )));
            }
            let inv = 1.0 / (e - s) as f64;
            let orow = &mut out[i * d..(i + 1) * d];
            for t in s..e {
                for (o, x) in orow.iter_mut().zip(v.row_slice(t)) {
                    *o += x * inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(spans.len(), d, out)?,
            Op::MeanSpans(a, spans.to_vec()),
            rg,
        ))
    }

    /// Right-pads every row with zeros up to `width` columns.
    pub fn pad_cols(&mut self, a: Var, width: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if c > width {
            return Err(shape_err("pad_cols", [r, c], [r, width]));
        }
        let v = self.value(a);
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            data[i * width..i * width + c].copy_from_slice(v.row_slice(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(r, width, data)?, Op::PadCols(a), rg))
    }

    /// Picks the listed `(row, col)` entries into a `1 × n` row.
    pub fn pick(&mut self, a: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let [r, c] = self.shape(a);
        let mut flat = Vec::with_capacity(positions.len());
        for &(i, j) in positions {
            if i >= r || j >= c {
                return Err(shape_err("pick", [r, c], [i, j]));
            }
            flat.push(i * c + j);
        }
        let v = self.value(a).data();
        let out: Vec<f64> = flat.iter().map(|&k| v[k]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(out), Op::Pick(a, flat), rg))
    }

    /// One GRU step from a precomputed input projection.
    ///
    /// `ax` is `x·W_x + b_x` (`1 × 3h`, gate blocks ordered update, reset, candidate),
    /// `h` is `1 × h`, `wh` is `h × 3h`, `bh` is `1 × 3h`.
    /// `h' = (1 − z)⊙h + z⊙ĥ` with `ĥ = tanh(a_x,n + r⊙(h·W_h,n + b_h,n))`.
    pub fn gru_cell(&mut self, ax: Var, h: Var, wh: Var, bh: Var) -> Result<Var> {
        let dh = self.shape(h)[1];
        if self.shape(h)[0] != 1
            || self.shape(ax) != [1, 3 * dh]
            || self.shape(wh) != [dh, 3 * dh]
            || self.shape(bh) != [1, 3 * dh]
        {
            return Err(Error::Shape {
                op: "gru_cell",
                left: vec![self.shape(ax)[1], self.shape(h)[1]],
                right: self
                    .shape(wh)
                    .iter()
                    .chain(self.shape(bh).iter())
                    .copied()
                    .collect(),
            });
        }
        let hv = self.value(h).data();
        let mut ah = self.value(bh).data().to_vec();
        matmul_into(hv, self.value(wh).data(), &mut ah, 1, dh, 3 * dh);
        let axv = self.value(ax).data();
        let mut z = vec![0.0; dh];
        let mut r = vec![0.0; dh];
        let mut n = vec![0.0; dh];
        let mut out = vec![0.0; dh];
        for j in 0..dh {
            z[j] = sigmoid(axv[j] + ah[j]);
            r[j] = sigmoid(axv[dh + j] + ah[dh + j]);
            n[j] = (axv[2 * dh + j] + r[j] * ah[2 * dh + j]).tanh();
            out[j] = (1.0 - z[j]) * hv[j] + z[j] * n[j];
        }
        let ah_n = ah[2 * dh..].to_vec();
        let rg = self.rg(&[ax, h, wh, bh]);
        Ok(self.push(
            Tensor::row(out),
            Op::GruCell {
                ax,
                h,
                wh,
                bh,
                z,
                r,
                n,
                ah_n,
            },
            rg,
        ))
    }

    /// Binary cross-entropy of a `1 × 1` probability, clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, s: Var, label: f64) -> Result<Var> {
        let p = self.scalar_prob(s, "bce")?;
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        let rg = self.rg(&[s]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { s, label }, rg))
    }

    /// Binary focal loss `−w·(1 − p_t)^γ·ln p_t`.
    pub fn focal(&mut self, s: Var, label: f64, gamma: f64, weight: f64) -> Result<Var> {
        if !(gamma >= 0.0) {
            return Err(Error::Parameter(format!(
                "focal gamma must be >= 0, got {gamma}"
            )));
        }
        let p = self.scalar_prob(s, "focal")?;
        let pt = if label >= 0.5 { p } else { 1.0 - p }.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -weight * (1.0 - pt).powf(gamma) * pt.ln();
        let rg = self.rg(&[s]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                s,
                label,
                gamma,
                weight,
            },
            rg,
        ))
    }

    fn scalar_prob(&self, s: Var, op: &'static str) -> Result<f64> {
        if self.shape(s) != [1, 1] {
            return Err(shape_err(op, self.shape(s), [1, 1]));
        }
        Ok(self.value(s).item())
    }

    /// Reverse sweep from a scalar node. Populates gradients of every
    /// reachable node that requires them.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.shape(out) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn acc_add(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    if let Some(buf) = acc(nodes, grads, v) {
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }
}

/// Accumulates the input gradients of node `i` given its output gradient `g`.
fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let [rows, cols] = nodes[i].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = av.cols();
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; av.len()];
                matmul_bt_into(g, bv.data(), &mut ga, rows, cols, k);
                acc_add(nodes, grads, a, &ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                matmul_at_into(av.data(), g, &mut gb, rows, k, cols);
                acc_add(nodes, grads, b, &gb);
            }
        }
        Op::MatMulBt(a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = av.cols();
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; av.len()];
                matmul_into(g, bv.data(), &mut ga, rows, cols, k);
                acc_add(nodes, grads, a, &ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                matmul_at_into(g, av.data(), &mut gb, rows, cols, k);
                acc_add(nodes, grads, b, &gb);
            }
        }
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            acc_add(nodes, grads, a, g);
            acc_add(nodes, grads, b, g);
        }
        Op::AddRow(a, row) => {
            let (a, row) = (*a, *row);
            acc_add(nodes, grads, a, g);
            if let Some(buf) = acc(nodes, grads, row) {
                for chunk in g.chunks(cols.max(1)) {
                    for (b, x) in buf.iter_mut().zip(chunk) {
                        *b += x;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            acc_add(nodes, grads, a, g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            acc_add(nodes, grads, b, &neg);
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let ga: Vec<f64> = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            let gb: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
            acc_add(nodes, grads, a, &ga);
            acc_add(nodes, grads, b, &gb);
        }
        Op::Scale(a, c) => {
            let (a, c) = (*a, *c);
            let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::AddScalar(a) => {
            let a = *a;
            acc_add(nodes, grads, a, g);
        }
        Op::Sigmoid(a) => {
            let a = *a;
            let y = nodes[i].value.data();
            let ga: Vec<f64> = g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)).collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::Tanh(a) => {
            let a = *a;
            let y = nodes[i].value.data();
            let ga: Vec<f64> = g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::Relu(a) => {
            let a = *a;
            let x = nodes[a.0].value.data();
            let ga: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::Exp(a) => {
            let a = *a;
            let y = nodes[i].value.data();
            let ga: Vec<f64> = g.iter().zip(y).map(|(x, y)| x * y).collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::Ln(a) => {
            let a = *a;
            let x = nodes[a.0].value.data();
            let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
            acc_add(nodes, grads, a, &ga);
        }
        Op::Sum(a) => {
            let a = *a;
            let n = nodes[a.0].value.len();
            acc_add(nodes, grads, a, &vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let a = *a;
            let n = nodes[a.0].value.len();
            acc_add(nodes, grads, a, &vec![g[0] / n as f64; n]);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                acc_add(nodes, grads, *p, &g[off..off + n]);
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let pc = nodes[p.0].value.cols();
                if let Some(buf) = acc(nodes, grads, *p) {
                    for r in 0..rows {
                        for c in 0..pc {
                            buf[r * pc + c] += g[r * cols + off + c];
                        }
                    }
                }
                off += pc;
            }
        }
        Op::SliceRows(a, start) => {
            let (a, start) = (*a, *start);
            if let Some(buf) = acc(nodes, grads, a) {
                for (b, x) in buf[start * cols..].iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
        Op::SliceCols(a, start) => {
            let (a, start) = (*a, *start);
            let ac = nodes[a.0].value.cols();
            if let Some(buf) = acc(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * ac + start + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Gather(table, ids) => {
            let table = *table;
            if let Some(buf) = acc(nodes, grads, table) {
                for (r, id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        buf[id * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let a = *a;
            let gt = Tensor::new(rows, cols, g.to_vec())
                .expect("shape")
                .transpose();
            acc_add(nodes, grads, a, gt.data());
        }
        Op::Softmax(a, t) => {
            let (a, t) = (*a, *t);
            let y = nodes[i].value.data();
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    ga[r * cols + c] = yr[c] * (gr[c] - dot) / t;
                }
            }
            acc_add(nodes, grads, a, &ga);
        }
        Op::LogSoftmax(a, t) => {
            let (a, t) = (*a, *t);
            let y = nodes[i].value.data();
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for c in 0..cols {
                    ga[r * cols + c] = (gr[c] - yr[c].exp() * gsum) / t;
                }
            }
            acc_add(nodes, grads, a, &ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let gv = nodes[gain.0].value.data();
            let d = cols;
            if nodes[x.0].requires_grad {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let dxh: Vec<f64> = (0..d).map(|c| g[r * d + c] * gv[c]).collect();
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dxh
                        .iter()
                        .zip(&xhat[r * d..(r + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for c in 0..d {
                        gx[r * d + c] = inv_std[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                    }
                }
                acc_add(nodes, grads, x, &gx);
            }
            if let Some(buf) = acc(nodes, grads, gain) {
                for r in 0..rows {
                    for c in 0..d {
                        buf[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if let Some(buf) = acc(nodes, grads, bias) {
                for r in 0..rows {
                    for c in 0..d {
                        buf[c] += g[r * d + c];
                    }
                }
            }
        }
        Op::NormalizeRows { x, eps, norms } => {
            let (x, eps) = (*x, *eps);
            let y = nodes[i].value.data();
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                if norms[r] > eps {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                } else {
                    for c in 0..cols {
                        gx[r * cols + c] = gr[c] / eps;
                    }
                }
            }
            acc_add(nodes, grads, x, &gx);
        }
        Op::MaxCols(a, arg) => {
            let a = *a;
            let ac = nodes[a.0].value.cols();
            if let Some(buf) = acc(nodes, grads, a) {
                for (r, j) in arg.iter().enumerate() {
                    buf[r * ac + j] += g[r];
                }
            }
        }
        Op::MeanSpans(a, spans) => {
            let a = *a;
            if let Some(buf) = acc(nodes, grads, a) {
                for (k, (s, e)) in spans.iter().enumerate() {
                    let inv = 1.0 / (e - s) as f64;
                    for t in *s..*e {
                        for c in 0..cols {
                            buf[t * cols + c] += g[k * cols + c] * inv;
                        }
                    }
                }
            }
        }
        Op::PadCols(a) => {
            let a = *a;
            let ac = nodes[a.0].value.cols();
            if let Some(buf) = acc(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..ac {
                        buf[r * ac + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Pick(a, flat) => {
            let a = *a;
            if let Some(buf) = acc(nodes, grads, a) {
                for (k, idx) in flat.iter().enumerate() {
                    buf[*idx] += g[k];
                }
            }
        }
        Op::GruCell {
            ax,
            h,
            wh,
            bh,
            z,
            r,
            n,
            ah_n,
        } => {
            let (ax, h, wh, bh) = (*ax, *h, *wh, *bh);
            let dh = z.len();
            let hv = nodes[h.0].value.data();
            let mut dax = vec![0.0; 3 * dh];
            let mut dah = vec![0.0; 3 * dh];
            let mut dh_direct = vec![0.0; dh];
            for j in 0..dh {
                let dz = g[j] * (n[j] - hv[j]);
                let dn = g[j] * z[j];
                dh_direct[j] = g[j] * (1.0 - z[j]);
                let dan = dn * (1.0 - n[j] * n[j]);
                let dr = dan * ah_n[j];
                let daz = dz * z[j] * (1.0 - z[j]);
                let dar = dr * r[j] * (1.0 - r[j]);
                dax[j] = daz;
                dax[dh + j] = dar;
                dax[2 * dh + j] = dan;
                dah[j] = daz;
                dah[dh + j] = dar;
                dah[2 * dh + j] = dan * r[j];
            }
            acc_add(nodes, grads, ax, &dax);
            acc_add(nodes, grads, bh, &dah);
            if nodes[h.0].requires_grad {
                let whv = nodes[wh.0].value.data();
                let mut gh = dh_direct;
                matmul_bt_into(&dah, whv, &mut gh, 1, 3 * dh, dh);
                acc_add(nodes, grads, h, &gh);
            }
            if let Some(buf) = acc(nodes, grads, wh) {
                matmul_at_into(hv, &dah, buf, 1, dh, 3 * dh);
            }
        }
        Op::Bce { s, label } => {
            let (s, y) = (*s, *label);
            let p = nodes[s.0].value.item();
            let d = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                -y / p + (1.0 - y) / (1.0 - p)
            } else {
                0.0
            };
            acc_add(nodes, grads, s, &[g[0] * d]);
        }
        Op::Focal {
            s,
            label,
            gamma,
            weight,
        } => {
            let (s, y, gamma, w) = (*s, *label, *gamma, *weight);
            let p = nodes[s.0].value.item();
            let (pt, sign) = if y >= 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };
            let d = if pt > PROB_CLAMP && pt < 1.0 - PROB_CLAMP {
                let q = 1.0 - pt;
                let pow_term = if gamma > 0.0 {
                    gamma * q.powf(gamma - 1.0) * pt.ln()
                } else {
                    0.0
                };
                -w * (-pow_term + q.powf(gamma) / pt)
            } else {
                0.0
            };
            acc_add(nodes, grads, s, &[g[0] * d * sign]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[1., 2., 3., 4.]));
        let ones = g.constant(t(2, 1, &[1., 1.]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out).data(), &[3., 7.]);
        let id = g.constant(Tensor::identity(2));
        let same = g.matmul(id, a).unwrap();
        assert_eq!(g.value(same), g.value(a));
        let z = g.constant(Tensor::zeros(3, 2));
        let zz = g.matmul(z, a).unwrap();
        assert!(g.value(zz).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[0.0, 3f64.ln()]));
        let s = g.softmax_rows(x, 1.0).unwrap();
        assert!((g.value(s).get(0, 0) - 0.25).abs() < 1e-12);
        assert!((g.value(s).get(0, 1) - 0.75).abs() < 1e-12);
        let eq = g.constant(t(1, 4, &[2.0; 4]));
        let u = g.softmax_rows(eq, 0.3).unwrap();
        assert!(g.value(u).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        let sat = g.constant(t(1, 2, &[0.0, 100.0]));
        let s2 = g.softmax_rows(sat, 1.0).unwrap();
        assert!(g.value(s2).get(0, 0) < 1e-40);
        assert!((g.value(s2).get(0, 1) - 1.0).abs() < 1e-12);
        assert!(g.softmax_rows(x, 0.0).is_err());
        assert!(g.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 2, &[1., 3., 5., 5.]));
        let one = g.constant(t(1, 2, &[1., 1.]));
        let zero = g.constant(t(1, 2, &[0., 0.]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        let v = g.value(y);
        assert!((v.get(0, 0) + 1.0).abs() < 1e-4 && (v.get(0, 1) - 1.0).abs() < 1e-4);
        assert_eq!(v.get(1, 0), 0.0);
        assert_eq!(v.get(1, 1), 0.0);
        let beta = g.constant(t(1, 2, &[0.5, -2.0]));
        let y2 = g.layer_norm(x, zero, beta, 1e-5).unwrap();
        assert_eq!(g.value(y2).data(), &[0.5, -2.0, 0.5, -2.0]);
        let bad = g.constant(t(1, 3, &[0., 0., 0.]));
        assert!(g.layer_norm(x, bad, zero, 1e-5).is_err());
    }

    #[test]
    fn max_cols_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(t(2, 3, &[1., 5., 5., 2., 2., 2.]));
        let m = g.max_cols(x).unwrap();
        assert_eq!(g.value(m).data(), &[5., 2.]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(1, 2, &[1., 2.]));
        let p = g.param(t(1, 2, &[3., 4.]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn bce_and_focal_values() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::scalar(0.5));
        for y in [0.0, 1.0] {
            let l = g.bce(half, y).unwrap();
            assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        }
        let s = g.constant(Tensor::scalar(0.9));
        let l = g.bce(s, 1.0).unwrap();
        assert!((g.value(l).item() - 0.1053605).abs() < 1e-6);
        let f = g.focal(s, 1.0, 2.0, 1.0).unwrap();
        assert!((g.value(f).item() - 0.01 * 0.9f64.ln().abs()).abs() < 1e-12);
        assert!((g.value(f).item() - 1.0536e-3).abs() < 1e-7);
        let f0 = g.focal(s, 1.0, 0.0, 1.0).unwrap();
        assert!((g.value(f0).item() - g.value(l).item()).abs() < 1e-12);
        let one = g.constant(Tensor::scalar(1.0));
        let exact = g.focal(one, 1.0, 2.0, 1.0).unwrap();
        assert!(g.value(exact).item().abs() < 1e-12);
    }
}
