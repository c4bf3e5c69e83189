use super::{axis_split, numel, DType, Node, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Sum(Tensor),
    MeanAxis(Tensor, usize),
    VarAxis(Tensor, usize),
    LayerNorm { x: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Tensor),
    Silu(Tensor),
    Concat(Vec<Tensor>, usize),
    Narrow { x: Tensor, axis: usize, start: usize },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::AddRow(a, r) | Op::MulRow(a, r) => vec![a, r],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::MeanAxis(a, _)
            | Op::VarAxis(a, _)
            | Op::Softmax(a)
            | Op::Silu(a) => vec![a],
            Op::LayerNorm { x, .. } | Op::Narrow { x, .. } => vec![x],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian products for each parent, given the output node and
    /// the gradient flowing into it.
    pub(crate) fn backward(&self, out: &Node, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        match self {
            Op::Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Op::Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(a, c) => vec![(a.clone(), g.iter().map(|v| v * c).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(a.clone(), g.to_vec())],
            Op::AddRow(x, row) => {
                let d = row.numel();
                let mut gr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![(x.clone(), g.to_vec()), (row.clone(), gr)]
            }
            Op::MulRow(x, row) => {
                let d = row.numel();
                let r = row.data();
                let mut gx = vec![0.0; g.len()];
                let mut gr = vec![0.0; d];
                for ((gc, xc), gxc) in g.chunks(d).zip(x.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    for j in 0..d {
                        gxc[j] = gc[j] * r[j];
                        gr[j] += gc[j] * xc[j];
                    }
                }
                vec![(x.clone(), gx), (row.clone(), gr)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb);
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                // g has shape (c, r)
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(a.clone(), ga)]
            }
            Op::Sum(a) => vec![(a.clone(), vec![g[0]; a.numel()])],
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut ga = vec![0.0; a.numel()];
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![(a.clone(), ga)]
            }
            Op::VarAxis(a, axis) => {
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let x = a.data();
                let mut ga = vec![0.0; a.numel()];
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = (0..len).map(|l| x[(o * len + l) * inner + i]).sum::<f64>() / n;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            ga[idx] = g[o * inner + i] * 2.0 * (x[idx] - mean) / n;
                        }
                    }
                }
                vec![(a.clone(), ga)]
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *x.shape().last().unwrap_or(&1);
                let n = d as f64;
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, hr), out)) in
                    g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let s = inv_std[r] / n;
                    for j in 0..d {
                        out[j] = s * (n * gr[j] - sum_g - hr[j] * sum_gh);
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::Softmax(x) => {
                let d = *x.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(out.data.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::Silu(x) => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(&out.shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = p.shape()[*axis];
                    let mut gp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((p.clone(), gp));
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let (outer, total, inner) = axis_split(x.shape(), *axis);
                let len = out.shape[*axis];
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(x.clone(), gx)]
            }
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// c (m×n) = a (m×k) · b (k×n) with explicit (row, col) strides for a and b.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k) and `b` (k×n),
    // and `c` is a contiguous m×n buffer that does not alias them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn build(data: Vec<f64>, shape: Vec<usize>, dtype: DType, tracked: bool, op: impl FnOnce() -> Op) -> Tensor {
    let data = dtype.round_all(data);
    if tracked {
        Tensor::from_parts(data, shape, dtype, true, Some(op()))
    } else {
        Tensor::from_parts(data, shape, dtype, false, None)
    }
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64, op: fn(Tensor, Tensor) -> Op) -> Result<Tensor> {
        self.same_shape(other, what)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(build(
            data,
            self.shape().to_vec(),
            self.dtype().promote(other.dtype()),
            tracked,
            || op(self.clone(), other.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        build(data, self.shape().to_vec(), self.dtype(), self.is_tracked(), || Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        build(data, self.shape().to_vec(), self.dtype(), self.is_tracked(), || Op::AddScalar(self.clone()))
    }

    fn check_row(&self, row: &Tensor, what: &str) -> Result<usize> {
        let d = *self.shape().last().unwrap_or(&1);
        if row.shape() != [d] {
            return Err(Error::Shape(format!(
                "{what}: row of shape {:?} does not match trailing extent {d} of {:?}",
                row.shape(),
                self.shape()
            )));
        }
        Ok(d)
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let d = self.check_row(row, "add_row")?;
        let r = row.data();
        let data = self.data().iter().enumerate().map(|(i, v)| v + r[i % d]).collect();
        Ok(build(
            data,
            self.shape().to_vec(),
            self.dtype().promote(row.dtype()),
            self.is_tracked() || row.is_tracked(),
            || Op::AddRow(self.clone(), row.clone()),
        ))
    }

    /// Multiplies every row (last axis) elementwise by a vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let d = self.check_row(row, "mul_row")?;
        let r = row.data();
        let data = self.data().iter().enumerate().map(|(i, v)| v * r[i % d]).collect();
        Ok(build(
            data,
            self.shape().to_vec(),
            self.dtype().promote(row.dtype()),
            self.is_tracked() || row.is_tracked(),
            || Op::MulRow(self.clone(), row.clone()),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents differ ({:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), &mut out);
        Ok(build(
            out,
            vec![m, n],
            self.dtype().promote(other.dtype()),
            self.is_tracked() || other.is_tracked(),
            || Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(build(out, vec![c, r], self.dtype(), self.is_tracked(), || Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape(), shape)));
        }
        Ok(build(self.to_vec(), shape.to_vec(), self.dtype(), self.is_tracked(), || {
            Op::Reshape(self.clone())
        }))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        build(vec![s], vec![], self.dtype(), self.is_tracked(), || Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", self.shape())));
        }
        Ok(())
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return Err(Error::Shape("mean over an empty axis".into()));
        }
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                out[o * inner + i] = (0..len).map(|l| x[(o * len + l) * inner + i]).sum::<f64>() / len as f64;
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(build(out, shape, self.dtype(), self.is_tracked(), || Op::MeanAxis(self.clone(), axis)))
    }

    /// Population variance over `axis`, which is removed from the shape.
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return Err(Error::Shape("variance over an empty axis".into()));
        }
        let x = self.data();
        let n = len as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let col = (0..len).map(|l| x[(o * len + l) * inner + i]);
                let mean = col.clone().sum::<f64>() / n;
                out[o * inner + i] = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(build(out, shape, self.dtype(), self.is_tracked(), || Op::VarAxis(self.clone(), axis)))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if d == 0 {
            return Err(Error::Shape("layer_norm over an empty axis".into()));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, hr)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (h, v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * inv;
            }
        }
        let out = xhat.clone();
        Ok(build(out, self.shape().to_vec(), self.dtype(), self.is_tracked(), || Op::LayerNorm {
            x: self.clone(),
            xhat,
            inv_std,
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
        let mut out = self.to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        Ok(build(out, self.shape().to_vec(), self.dtype(), self.is_tracked(), || Op::Softmax(self.clone())))
    }

    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v * sigmoid(v)).collect();
        build(data, self.shape().to_vec(), self.dtype(), self.is_tracked(), || Op::Silu(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same tensor has the same shape")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        Ok(self.sub(target)?.square().mean())
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        first.check_axis(axis)?;
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for p in parts {
            let ok = p.rank() == shape.len()
                && p.shape().iter().enumerate().all(|(i, &e)| i == axis || e == shape[i]);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            total += p.shape()[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let dtype = parts.iter().fold(first.dtype(), |d, p| d.promote(p.dtype()));
        let tracked = parts.iter().any(Tensor::is_tracked);
        Ok(build(out, shape, dtype, tracked, || Op::Concat(parts.to_vec(), axis)))
    }

    /// The sub-range `start..start + len` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, total, inner) = axis_split(self.shape(), axis);
        if start + len > total {
            return Err(Error::Shape(format!(
                "narrow {start}..{} exceeds extent {total} of axis {axis}",
                start + len
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(build(out, shape, self.dtype(), self.is_tracked(), || Op::Narrow { x: self.clone(), axis, start }))
    }
}
