//! Primitive differentiable ops. Matrices are row-major `[rows, cols]`; the only
//! broadcasting is a row vector expanded along the leading dimension.

use super::{mismatch, record, AdError, Tensor};
use std::sync::Arc;

/// `c = op(a) * op(b) + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
/// With `*_t` set, the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AdError> {
    if a.shape != b.shape {
        return Err(mismatch(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), AdError> {
    if t.shape.len() != 2 {
        return Err(mismatch(op, &t.shape, &[]));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, AdError> {
        same_shape("add", self, other)?;
        let v = zip_map(&self.data, &other.data, |x, y| x + y);
        Ok(record(&[self, other], self.shape.clone(), v, |g, _| g.to_vec()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, AdError> {
        same_shape("sub", self, other)?;
        let v = zip_map(&self.data, &other.data, |x, y| x - y);
        Ok(record(&[self, other], self.shape.clone(), v, |g, i| {
            if i == 0 {
                g.to_vec()
            } else {
                g.iter().map(|x| -x).collect()
            }
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, AdError> {
        same_shape("mul", self, other)?;
        let v = zip_map(&self.data, &other.data, |x, y| x * y);
        let (a, b) = (self.data.clone(), other.data.clone());
        Ok(record(&[self, other], self.shape.clone(), v, move |g, i| {
            let o = if i == 0 { &b } else { &a };
            zip_map(g, o, |x, y| x * y)
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, AdError> {
        same_shape("div", self, other)?;
        let v = zip_map(&self.data, &other.data, |x, y| x / y);
        let (a, b) = (self.data.clone(), other.data.clone());
        Ok(record(&[self, other], self.shape.clone(), v, move |g, i| {
            if i == 0 {
                zip_map(g, &b, |x, y| x / y)
            } else {
                g.iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gx, (x, y))| -gx * x / (y * y))
                    .collect()
            }
        }))
    }

    pub fn neg(&self) -> Tensor {
        self.scalar_mul(-1.0)
    }

    /// Multiplication by a constant.
    pub fn scalar_mul(&self, s: f64) -> Tensor {
        let v = self.data.iter().map(|x| x * s).collect();
        record(&[self], self.shape.clone(), v, move |g, _| {
            g.iter().map(|x| x * s).collect()
        })
    }

    /// Multiplication by a one-element tensor (which may be tracked).
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor, AdError> {
        if s.len() != 1 {
            return Err(mismatch("mul_scalar", &self.shape, &s.shape));
        }
        let sv = s.data[0];
        let v = self.data.iter().map(|x| x * sv).collect();
        let a = self.data.clone();
        Ok(record(&[self, s], self.shape.clone(), v, move |g, i| {
            if i == 0 {
                g.iter().map(|x| x * sv).collect()
            } else {
                vec![g.iter().zip(a.iter()).map(|(x, y)| x * y).sum()]
            }
        }))
    }

    /// Addition of a one-element tensor to every entry.
    pub fn add_scalar(&self, s: &Tensor) -> Result<Tensor, AdError> {
        if s.len() != 1 {
            return Err(mismatch("add_scalar", &self.shape, &s.shape));
        }
        let sv = s.data[0];
        let v = self.data.iter().map(|x| x + sv).collect();
        Ok(record(&[self, s], self.shape.clone(), v, |g, i| {
            if i == 0 {
                g.to_vec()
            } else {
                vec![g.iter().sum()]
            }
        }))
    }

    /// `x[r, c] + b[c]` for every row.
    pub fn add_row(&self, b: &Tensor) -> Result<Tensor, AdError> {
        let (r, c) = rank2("add_row", self)?;
        if b.len() != c {
            return Err(mismatch("add_row", &self.shape, &b.shape));
        }
        let mut v = self.data.to_vec();
        for row in v.chunks_exact_mut(c) {
            row.iter_mut().zip(b.data.iter()).for_each(|(x, y)| *x += y);
        }
        Ok(record(&[self, b], self.shape.clone(), v, move |g, i| {
            if i == 0 {
                g.to_vec()
            } else {
                column_sums(g, r, c)
            }
        }))
    }

    /// `x[r, c] * s[c]` for every row.
    pub fn mul_row(&self, s: &Tensor) -> Result<Tensor, AdError> {
        let (r, c) = rank2("mul_row", self)?;
        if s.len() != c {
            return Err(mismatch("mul_row", &self.shape, &s.shape));
        }
        let mut v = self.data.to_vec();
        for row in v.chunks_exact_mut(c) {
            row.iter_mut().zip(s.data.iter()).for_each(|(x, y)| *x *= y);
        }
        let (xd, sd) = (self.data.clone(), s.data.clone());
        Ok(record(&[self, s], self.shape.clone(), v, move |g, i| {
            if i == 0 {
                let mut out = g.to_vec();
                for row in out.chunks_exact_mut(c) {
                    row.iter_mut().zip(sd.iter()).for_each(|(x, y)| *x *= y);
                }
                out
            } else {
                let prod = zip_map(g, &xd, |a, b| a * b);
                column_sums(&prod, r, c)
            }
        }))
    }

    /// `x[r, c] * s[r]`: scales row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor, AdError> {
        let (r, c) = rank2("scale_rows", self)?;
        if s.len() != r {
            return Err(mismatch("scale_rows", &self.shape, &s.shape));
        }
        let mut v = self.data.to_vec();
        for (row, f) in v.chunks_exact_mut(c).zip(s.data.iter()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let (xd, sd) = (self.data.clone(), s.data.clone());
        Ok(record(&[self, s], self.shape.clone(), v, move |g, i| {
            if i == 0 {
                let mut out = g.to_vec();
                for (row, f) in out.chunks_exact_mut(c).zip(sd.iter()) {
                    row.iter_mut().for_each(|x| *x *= f);
                }
                out
            } else {
                g.chunks_exact(c)
                    .zip(xd.chunks_exact(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect()
            }
        }))
    }

    /// Matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = rank2("matmul", self)?;
        let (k2, n) = rank2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", &self.shape, &b.shape));
        }
        let mut v = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &b.data, false, 0.0, &mut v);
        let (ad, bd) = (self.data.clone(), b.data.clone());
        Ok(record(&[self, b], vec![m, n], v, move |g, i| {
            if i == 0 {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g, false, &bd, true, 0.0, &mut out);
                out
            } else {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, &ad, true, g, false, 0.0, &mut out);
                out
            }
        }))
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = rank2("matmul_nt", self)?;
        let (n, k2) = rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", &self.shape, &b.shape));
        }
        let mut v = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &b.data, true, 0.0, &mut v);
        let (ad, bd) = (self.data.clone(), b.data.clone());
        Ok(record(&[self, b], vec![m, n], v, move |g, i| {
            if i == 0 {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g, false, &bd, false, 0.0, &mut out);
                out
            } else {
                let mut out = vec![0.0; n * k];
                gemm(n, m, k, g, true, &ad, false, 0.0, &mut out);
                out
            }
        }))
    }

    /// `a^T * b` for `a: [k, m]`, `b: [k, n]`.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor, AdError> {
        let (k, m) = rank2("matmul_tn", self)?;
        let (k2, n) = rank2("matmul_tn", b)?;
        if k != k2 {
            return Err(mismatch("matmul_tn", &self.shape, &b.shape));
        }
        let mut v = vec![0.0; m * n];
        gemm(m, k, n, &self.data, true, &b.data, false, 0.0, &mut v);
        let (ad, bd) = (self.data.clone(), b.data.clone());
        Ok(record(&[self, b], vec![m, n], v, move |g, i| {
            if i == 0 {
                // d a = b g^T  ([k, n] x [n, m])
                let mut out = vec![0.0; k * m];
                gemm(k, n, m, &bd, false, g, true, 0.0, &mut out);
                out
            } else {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, &ad, false, g, false, 0.0, &mut out);
                out
            }
        }))
    }

    pub fn transpose(&self) -> Result<Tensor, AdError> {
        let (r, c) = rank2("transpose", self)?;
        let v = transpose_data(&self.data, r, c);
        Ok(record(&[self], vec![c, r], v, move |g, _| transpose_data(g, c, r)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, AdError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        Ok(record(&[self], shape.to_vec(), self.data.to_vec(), |g, _| {
            g.to_vec()
        }))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, AdError> {
        let r = parts.first().map_or(0, |t| t.rows());
        let mut widths = Vec::with_capacity(parts.len());
        for t in parts {
            let (tr, tc) = rank2("concat_cols", t)?;
            if tr != r {
                return Err(mismatch("concat_cols", &parts[0].shape, &t.shape));
            }
            widths.push(tc);
        }
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for (t, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&t.data[i * w..(i + 1) * w]);
            }
        }
        let offsets: Vec<usize> = widths
            .iter()
            .scan(0, |acc, &w| {
                let o = *acc;
                *acc += w;
                Some(o)
            })
            .collect();
        Ok(record(parts, vec![r, total], v, move |g, i| {
            let (o, w) = (offsets[i], widths[i]);
            let mut out = Vec::with_capacity(r * w);
            for row in g.chunks_exact(total) {
                out.extend_from_slice(&row[o..o + w]);
            }
            out
        }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, AdError> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut lens = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for t in parts {
            let (tr, tc) = rank2("concat_rows", t)?;
            if tc != c {
                return Err(mismatch("concat_rows", &parts[0].shape, &t.shape));
            }
            lens.push(t.len());
            rows += tr;
        }
        let mut v = Vec::with_capacity(rows * c);
        for t in parts {
            v.extend_from_slice(&t.data);
        }
        let offsets: Vec<usize> = lens
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        Ok(record(parts, vec![rows, c], v, move |g, i| {
            g[offsets[i]..offsets[i] + lens[i]].to_vec()
        }))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, AdError> {
        let (r, c) = rank2("slice_cols", self)?;
        if start > end || end > c {
            return Err(mismatch("slice_cols", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut v = Vec::with_capacity(r * w);
        for row in self.data.chunks_exact(c) {
            v.extend_from_slice(&row[start..end]);
        }
        Ok(record(&[self], vec![r, w], v, move |g, _| {
            let mut out = vec![0.0; r * c];
            for (orow, grow) in out.chunks_exact_mut(c).zip(g.chunks_exact(w.max(1))) {
                orow[start..end].copy_from_slice(&grow[..w]);
            }
            out
        }))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, AdError> {
        let (r, c) = rank2("slice_rows", self)?;
        if start > end || end > r {
            return Err(mismatch("slice_rows", &self.shape, &[start, end]));
        }
        let v = self.data[start * c..end * c].to_vec();
        Ok(record(&[self], vec![end - start, c], v, move |g, _| {
            let mut out = vec![0.0; r * c];
            out[start * c..end * c].copy_from_slice(g);
            out
        }))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.len();
        record(&[self], vec![1], vec![self.data.iter().sum()], move |g, _| {
            vec![g[0]; n]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let m = self.data.iter().sum::<f64>() / n as f64;
        record(&[self], vec![1], vec![m], move |g, _| vec![g[0] / n as f64; n])
    }

    /// Sums consecutive groups of `k` rows: `[r*k, c] -> [r, c]`.
    pub fn group_sum(&self, k: usize) -> Result<Tensor, AdError> {
        let (rk, c) = rank2("group_sum", self)?;
        if k == 0 || rk % k != 0 {
            return Err(mismatch("group_sum", &self.shape, &[k]));
        }
        let r = rk / k;
        let mut v = vec![0.0; r * c];
        for (i, row) in self.data.chunks_exact(c).enumerate() {
            let o = (i / k) * c;
            v[o..o + c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(record(&[self], vec![r, c], v, move |g, _| {
            let mut out = Vec::with_capacity(rk * c);
            for i in 0..rk {
                out.extend_from_slice(&g[(i / k) * c..(i / k + 1) * c]);
            }
            out
        }))
    }

    /// Column-wise max over consecutive groups of `k` rows: `[r*k, c] -> [r, c]`.
    /// The gradient goes to the first maximal entry.
    pub fn group_max(&self, k: usize) -> Result<Tensor, AdError> {
        let (rk, c) = rank2("group_max", self)?;
        if k == 0 || rk % k != 0 {
            return Err(mismatch("group_max", &self.shape, &[k]));
        }
        let r = rk / k;
        let mut v = vec![f64::NEG_INFINITY; r * c];
        let mut arg = vec![0usize; r * c];
        for (i, row) in self.data.chunks_exact(c).enumerate() {
            let o = (i / k) * c;
            for (j, &x) in row.iter().enumerate() {
                if x > v[o + j] {
                    v[o + j] = x;
                    arg[o + j] = i * c + j;
                }
            }
        }
        Ok(record(&[self], vec![r, c], v, move |g, _| {
            let mut out = vec![0.0; rk * c];
            for (slot, &src) in arg.iter().enumerate() {
                out[src] += g[slot];
            }
            out
        }))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let v: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let (x, y) = (self.data.clone(), Arc::new(v.clone()));
        record(&[self], self.shape.clone(), v, move |g, _| {
            g.iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                .collect()
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Result<Tensor, AdError> {
        let (_, c) = rank2("softmax_rows", self)?;
        let mut v = self.data.to_vec();
        for row in v.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let y = Arc::new(v.clone());
        Ok(record(&[self], self.shape.clone(), v, move |g, _| {
            let mut out = vec![0.0; g.len()];
            for ((o, gr), yr) in out.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            out
        }))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, AdError> {
        let (r, c) = rank2("layer_norm", self)?;
        if gamma.len() != c || beta.len() != c {
            return Err(mismatch("layer_norm", &self.shape, &gamma.shape));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * s;
            }
        }
        let v: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, xh)| xh * gamma.data[idx % c] + beta.data[idx % c])
            .collect();
        let gd = gamma.data.clone();
        Ok(record(&[self, gamma, beta], self.shape.clone(), v, move |g, i| match i {
            0 => {
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    let gx: Vec<f64> = (0..c).map(|j| g[row * c + j] * gd[j]).collect();
                    let xh = &xhat[row * c..(row + 1) * c];
                    let m1 = gx.iter().sum::<f64>() / c as f64;
                    let m2 = gx.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[row * c + j] = inv_std[row] * (gx[j] - m1 - xh[j] * m2);
                    }
                }
                out
            }
            1 => column_sums(&zip_map(g, &xhat, |a, b| a * b), r, c),
            _ => column_sums(g, r, c),
        }))
    }

    /// Scales each row to unit Euclidean norm (rows with norm below `eps` are
    /// divided by `eps`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor, AdError> {
        let (r, c) = rank2("l2_normalize_rows", self)?;
        let norms: Vec<f64> = self
            .data
            .chunks_exact(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut v = self.data.to_vec();
        for (row, n) in v.chunks_exact_mut(c).zip(&norms) {
            let d = n.max(eps);
            row.iter_mut().for_each(|x| *x /= d);
        }
        let y = Arc::new(v.clone());
        Ok(record(&[self], self.shape.clone(), v, move |g, _| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let yr = &y[i * c..(i + 1) * c];
                if norms[i] < eps {
                    for j in 0..c {
                        out[i * c + j] = gr[j] / eps;
                    }
                    continue;
                }
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    out[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            out
        }))
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, AdError> {
        let (r, c) = rank2("gather_rows", self)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", &self.shape, &[bad]));
        }
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            v.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        let idx = Arc::new(idx.to_vec());
        Ok(record(&[self], vec![idx.len(), c], v, move |g, _| {
            scatter_add_data(g, &idx, r, c)
        }))
    }

    /// Adds input row `i` into output row `idx[i]` of a zero `[rows, c]` matrix.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor, AdError> {
        let (r, c) = rank2("scatter_add_rows", self)?;
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(mismatch("scatter_add_rows", &self.shape, &[idx.len(), rows]));
        }
        let v = scatter_add_data(&self.data, idx, rows, c);
        let idx = Arc::new(idx.to_vec());
        Ok(record(&[self], vec![rows, c], v, move |g, _| {
            let mut out = Vec::with_capacity(r * c);
            for &i in idx.iter() {
                out.extend_from_slice(&g[i * c..(i + 1) * c]);
            }
            out
        }))
    }

    /// Elementwise gather from the flattened tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor, AdError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(mismatch("gather", &self.shape, &[bad]));
        }
        let v = idx.iter().map(|&i| self.data[i]).collect();
        let n = self.len();
        let idx = Arc::new(idx.to_vec());
        Ok(record(&[self], vec![idx.len(), 1], v, move |g, _| {
            let mut out = vec![0.0; n];
            for (gi, &i) in g.iter().zip(idx.iter()) {
                out[i] += gi;
            }
            out
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

fn column_sums(g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks_exact(c).take(r) {
        out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    out
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

fn scatter_add_data(src: &[f64], idx: &[usize], rows: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c];
    for (k, &i) in idx.iter().enumerate() {
        out[i * c..(i + 1) * c]
            .iter_mut()
            .zip(&src[k * c..(k + 1) * c])
            .for_each(|(a, b)| *a += b);
    }
    out
}
