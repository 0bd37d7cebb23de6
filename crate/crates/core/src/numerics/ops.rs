//! Forward definitions of the differentiable operations.

use std::rc::Rc;

use super::sampling;
use super::tape::{Op, Var};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Points closer than this to the image plane are treated as invalid.
pub const MIN_DEPTH: f64 = 1e-6;

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(shape, data).expect("op output shape")
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn ng(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.ng())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.ng() || other.ng())
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(self.binary(other, t(matmul_kernel(a.data(), b.data(), m, k, n), &[m, n]), Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(invalid("transpose", format!("expected 2-D, got {:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.unary(t(out, &[c, r]), Op::Transpose(self.id)))
    }

    fn zip_same(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(t(data, a.shape()))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "div", |x, y| x / y)?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    /// Adds a `[n]` row vector to every row of `[... × n]`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let n = a.last_dim();
        if b.numel() != n {
            return Err(shape_err("add_row", a.shape(), b.shape()));
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, x) in chunk.iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        Ok(self.binary(row, t(out, a.shape()), Op::AddRow(self.id, row.id)))
    }

    /// Multiplies row `r` of `[R × n]` by `w[r]`.
    pub fn mul_rows(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let (a, wv) = (self.value(), w.value());
        let (r, n) = (a.rows(), a.last_dim());
        if wv.numel() != r {
            return Err(shape_err("mul_rows", a.shape(), wv.shape()));
        }
        let mut out = a.data().to_vec();
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            let s = wv.data()[i];
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.binary(w, t(out, a.shape()), Op::MulRows(self.id, w.id)))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let (a, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(shape_err("mul_scalar", a.shape(), sv.shape()));
        }
        let c = sv.data()[0];
        Ok(self.binary(s, a.map(|x| x * c), Op::MulScalar(self.id, s.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::Shift(self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    /// Elementwise power with a constant exponent; inputs must be non-negative.
    pub fn powf(&self, e: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.powf(e)), Op::Pow(self.id, e))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&self) -> Var<'t> {
        let a = self.value();
        let n = a.last_dim();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.unary(t(out, a.shape()), Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let a = self.value();
        let n = a.last_dim();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(t(out, a.shape()), Op::LogSoftmax(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Flat gather: `out.flat[o] = self.flat[index[o]]`, shaped as `shape`.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
            return Err(invalid("gather", format!("index {bad} >= {}", a.numel())));
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(v, Op::Gather(self.id, index)))
    }

    /// Gathers whole rows of `[R × n]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let n = self.value().last_dim();
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(Rc::new(idx), &[rows.len(), n])
    }

    /// Selects a contiguous column range of `[R × n]`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, n) = (a.rows(), a.last_dim());
        if start >= end || end > n {
            return Err(invalid("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let idx: Vec<usize> = (0..r).flat_map(|i| i * n + start..i * n + end).collect();
        self.gather(Rc::new(idx), &[r, w])
    }

    /// Scatter-adds rows: `out[index[r]] += self[r]`, with `out_rows` rows.
    pub fn index_add_rows(&self, index: Rc<Vec<usize>>, out_rows: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, n) = (a.rows(), a.last_dim());
        if index.len() != r {
            return Err(shape_err("index_add_rows", a.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(invalid("index_add_rows", format!("row {bad} >= {out_rows}")));
        }
        let mut out = vec![0.0; out_rows * n];
        for (src, &dst) in index.iter().enumerate() {
            for c in 0..n {
                out[dst * n + c] += a.data()[src * n + c];
            }
        }
        Ok(self.unary(t(out, &[out_rows, n]), Op::IndexAddRows(self.id, index)))
    }

    /// Sums each run of `group` consecutive rows.
    pub fn sum_row_groups(&self, group: usize) -> Result<Var<'t>> {
        let r = self.value().rows();
        if group == 0 || r % group != 0 {
            return Err(invalid("sum_row_groups", format!("{r} rows not divisible by {group}")));
        }
        let idx: Vec<usize> = (0..r).map(|i| i / group).collect();
        self.index_add_rows(Rc::new(idx), r / group)
    }

    /// Bilinear sampling of `self[H×W×C]` at `pts[P×2]` continuous `(x, y)`
    /// pixel coordinates (`x` along width, `y` along height) with zero padding.
    pub fn bilinear_sample(&self, pts: &Var<'t>) -> Result<Var<'t>> {
        let (m, p) = (self.value(), pts.value());
        if m.shape().len() != 3 || p.last_dim() != 2 {
            return Err(shape_err("bilinear_sample", m.shape(), p.shape()));
        }
        let s = m.shape();
        let out = sampling::bilinear_forward(m.data(), s[0], s[1], s[2], p.data());
        let n = p.rows();
        Ok(self.binary(pts, t(out, &[n, s[2]]), Op::Bilinear { map: self.id, pts: pts.id }))
    }

    /// Trilinear sampling of `self[D0×D1×D2×C]` at `pts[P×3]` continuous
    /// index coordinates with zero padding.
    pub fn trilinear_sample(&self, pts: &Var<'t>) -> Result<Var<'t>> {
        let (v, p) = (self.value(), pts.value());
        if v.shape().len() != 4 || p.last_dim() != 3 {
            return Err(shape_err("trilinear_sample", v.shape(), p.shape()));
        }
        let s = v.shape();
        let out = sampling::trilinear_forward(v.data(), [s[0], s[1], s[2]], s[3], p.data());
        let n = p.rows();
        Ok(self.binary(pts, t(out, &[n, s[3]]), Op::Trilinear { vol: self.id, pts: pts.id }))
    }

    /// Pinhole projection of camera-frame points `[N×3]` to pixels `[N×2]`.
    /// Depths below [`MIN_DEPTH`] are clamped; callers mask those points.
    pub fn perspective(&self, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Var<'t>> {
        let p = self.value();
        if p.last_dim() != 3 {
            return Err(invalid("perspective", format!("expected [N×3], got {:?}", p.shape())));
        }
        let n = p.rows();
        let d = p.data();
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let z = d[3 * i + 2].max(MIN_DEPTH);
            out[2 * i] = fx * d[3 * i] / z + cx;
            out[2 * i + 1] = fy * d[3 * i + 1] / z + cy;
        }
        Ok(self.unary(t(out, &[n, 2]), Op::Perspective { pts: self.id, fx, fy }))
    }
}

/// Concatenates `[R × Ci]` blocks along the last axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let r = vals[0].rows();
    for v in &vals {
        if v.rows() != r {
            return Err(shape_err("concat_cols", vals[0].shape(), v.shape()));
        }
    }
    let total: usize = vals.iter().map(|v| v.last_dim()).sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for v in &vals {
            out.extend_from_slice(v.row(i));
        }
    }
    let ng = parts.iter().any(|p| p.ng());
    Ok(first.tape.push(t(out, &[r, total]), Op::ConcatCols(parts.iter().map(|p| p.id).collect()), ng))
}

/// Stacks `[Ri × C]` blocks along the first axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let c = vals[0].last_dim();
    let mut out = Vec::new();
    let mut rows = 0;
    for v in &vals {
        if v.last_dim() != c {
            return Err(shape_err("concat_rows", vals[0].shape(), v.shape()));
        }
        rows += v.rows();
        out.extend_from_slice(v.data());
    }
    let ng = parts.iter().any(|p| p.ng());
    Ok(first.tape.push(t(out, &[rows, c]), Op::ConcatRows(parts.iter().map(|p| p.id).collect()), ng))
}

/// Affine map on the last axis: `x·w + b` for `x[... × din]`, `w[din × dout]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    let din = *xs.last().expect("non-empty");
    if ws.len() != 2 || ws[0] != din {
        return Err(shape_err("linear", &xs, &ws));
    }
    let rows = xs.iter().product::<usize>() / din;
    let flat = if xs.len() == 2 { *x } else { x.reshape(&[rows, din])? };
    let mut y = flat.matmul(w)?;
    if let Some(b) = bias {
        y = y.add_row(b)?;
    }
    if xs.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("non-empty") = ws[1];
        y.reshape(&out_shape)
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for (d, x) in dst.iter_mut().zip(br) {
                *d += aip * x;
            }
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
