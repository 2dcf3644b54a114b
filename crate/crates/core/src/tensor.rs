//! Dense row-major matrices and the handful of primitives the model needs,
//! each paired with its analytic backward rule.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. All reductions sum in index
//! order, so results are bit-reproducible for fixed inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += other`, element by element.
    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        check_same("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mat, scale: f64) -> Result<()> {
        check_same("add_scaled", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bpj) in out_row.iter_mut().zip(b.row(p)) {
                *o += api * bpj;
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a · b` given `dc`: `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward(a: &Mat, b: &Mat, dc: &Mat) -> Result<(Mat, Mat)> {
    if dc.shape() != (a.rows, b.cols) {
        return Err(Error::shape("matmul_backward", (a.rows, b.cols), dc.shape()));
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

fn zip_with(op: &'static str, a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
    check_same(op, a, b)?;
    Ok(Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn elem_mul(a: &Mat, b: &Mat) -> Result<Mat> {
    zip_with("elem_mul", a, b, |x, y| x * y)
}

pub fn add(a: &Mat, b: &Mat) -> Result<Mat> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Mat, b: &Mat) -> Result<Mat> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    map(a, |x| x * s)
}

pub fn tanh(a: &Mat) -> Mat {
    map(a, f64::tanh)
}

/// Backward of tanh expressed through its output `y`.
pub fn tanh_backward(y: &Mat, dy: &Mat) -> Result<Mat> {
    zip_with("tanh_backward", y, dy, |y, g| g * (1.0 - y * y))
}

pub fn relu(a: &Mat) -> Mat {
    map(a, |x| x.max(0.0))
}

/// Backward of ReLU given its input `x`. The subgradient at 0 is taken as 0.
pub fn relu_backward(x: &Mat, dy: &Mat) -> Result<Mat> {
    zip_with("relu_backward", x, dy, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Concatenates matrices side by side (same row count).
pub fn concat_cols(parts: &[&Mat]) -> Result<Mat> {
    let rows = parts.first().map_or(0, |m| m.rows);
    for p in parts {
        if p.rows != rows {
            return Err(Error::shape("concat_cols", (rows, 0), p.shape()));
        }
    }
    let cols: usize = parts.iter().map(|m| m.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Mat { rows, cols, data })
}

/// Inverse of [`concat_cols`].
pub fn split_cols(m: &Mat, widths: &[usize]) -> Result<Vec<Mat>> {
    if widths.iter().sum::<usize>() != m.cols {
        return Err(Error::shape("split_cols", m.shape(), (m.rows, widths.iter().sum())));
    }
    let mut out: Vec<Mat> = widths.iter().map(|&w| Mat::zeros(m.rows, w)).collect();
    for i in 0..m.rows {
        let mut off = 0;
        for (part, &w) in out.iter_mut().zip(widths) {
            part.row_mut(i).copy_from_slice(&m.row(i)[off..off + w]);
            off += w;
        }
    }
    Ok(out)
}

/// Stacks matrices vertically (same column count).
pub fn concat_rows(parts: &[&Mat]) -> Result<Mat> {
    let cols = parts.first().map_or(0, |m| m.cols);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols != cols {
            return Err(Error::shape("concat_rows", (0, cols), p.shape()));
        }
        data.extend_from_slice(&p.data);
        rows += p.rows;
    }
    Ok(Mat { rows, cols, data })
}

/// Inverse of [`concat_rows`].
pub fn split_rows(m: &Mat, heights: &[usize]) -> Result<Vec<Mat>> {
    if heights.iter().sum::<usize>() != m.rows {
        return Err(Error::shape("split_rows", m.shape(), (heights.iter().sum(), m.cols)));
    }
    let mut off = 0;
    Ok(heights
        .iter()
        .map(|&h| {
            let part = Mat {
                rows: h,
                cols: m.cols,
                data: m.data[off * m.cols..(off + h) * m.cols].to_vec(),
            };
            off += h;
            part
        })
        .collect())
}

/// Column-wise mean over rows.
pub fn mean_over_rows(a: &Mat) -> Result<Vec<f64>> {
    if a.rows == 0 {
        return Err(Error::Degenerate("mean over zero rows".into()));
    }
    let mut out = vec![0.0; a.cols];
    for i in 0..a.rows {
        for (o, x) in out.iter_mut().zip(a.row(i)) {
            *o += x;
        }
    }
    let n = a.rows as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Column sums, accumulated in row order. Bias gradients use this.
pub fn column_sums(a: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for i in 0..a.rows {
        for (o, x) in out.iter_mut().zip(a.row(i)) {
            *o += x;
        }
    }
    out
}

pub fn mean_over_rows_backward(rows: usize, dy: &[f64]) -> Mat {
    let n = rows as f64;
    let mut out = Mat::zeros(rows, dy.len());
    for i in 0..rows {
        for (o, g) in out.row_mut(i).iter_mut().zip(dy) {
            *o = g / n;
        }
    }
    out
}

/// Column-wise max over rows, with the winning row per column.
/// Ties go to the lowest row index.
pub fn max_over_rows(a: &Mat) -> Result<(Vec<f64>, Vec<usize>)> {
    if a.rows == 0 {
        return Err(Error::Degenerate("max over zero rows".into()));
    }
    let mut best = a.row(0).to_vec();
    let mut arg = vec![0; a.cols];
    for i in 1..a.rows {
        for (j, &x) in a.row(i).iter().enumerate() {
            if x > best[j] {
                best[j] = x;
                arg[j] = i;
            }
        }
    }
    Ok((best, arg))
}

pub fn max_over_rows_backward(rows: usize, argmax: &[usize], dy: &[f64]) -> Mat {
    let mut out = Mat::zeros(rows, dy.len());
    for (j, (&i, &g)) in argmax.iter().zip(dy).enumerate() {
        out.set(i, j, g);
    }
    out
}

/// Numerically stable softmax. Masked-out positions (mask `false`) get exactly 0.
pub fn softmax(v: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != v.len() {
            return Err(Error::shape("softmax", (1, v.len()), (1, m.len())));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    if v.iter().enumerate().any(|(i, x)| keep(i) && x.is_nan()) {
        return Err(Error::Degenerate("softmax input contains NaN".into()));
    }
    let max = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("softmax over an empty or fully masked input".into()));
    }
    let mut out: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, &x)| if keep(i) { (x - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(out)
}

/// Backward of softmax through its output `y`: `y ⊙ (dy − ⟨y, dy⟩)`.
/// Masked positions have `y = 0` and so receive no gradient.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - inner)).collect()
}

/// Saved values for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: f64,
}

/// `(v − mean) / sqrt(var + eps) · gamma + beta`, population variance.
pub fn layer_norm(
    v: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    if gamma.len() != v.len() || beta.len() != v.len() {
        return Err(Error::shape("layer_norm", (1, v.len()), (gamma.len(), beta.len())));
    }
    if v.is_empty() {
        return Err(Error::Degenerate("layer_norm of an empty vector".into()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let x_hat: Vec<f64> = v.iter().map(|x| (x - mean) * inv_std).collect();
    let out = x_hat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    Ok((out, LayerNormCache { x_hat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = dy.len() as f64;
    let dbeta = dy.to_vec();
    let dgamma: Vec<f64> = dy.iter().zip(&cache.x_hat).map(|(g, x)| g * x).collect();
    let dxh: Vec<f64> = dy.iter().zip(gamma).map(|(g, w)| g * w).collect();
    let mean_dxh = dxh.iter().sum::<f64>() / n;
    let mean_dxh_xh = dot(&dxh, &cache.x_hat) / n;
    let dx = dxh
        .iter()
        .zip(&cache.x_hat)
        .map(|(d, x)| cache.inv_std * (d - mean_dxh - x * mean_dxh_xh))
        .collect();
    (dx, dgamma, dbeta)
}

/// A trainable tensor and its accumulated gradient.
///
/// `frozen_rows` lists rows that never receive gradient and are never
/// updated (the PAD embedding row).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    pub frozen_rows: Vec<usize>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
            frozen_rows: Vec::new(),
        }
    }

    pub fn with_frozen_rows(mut self, rows: Vec<usize>) -> Self {
        for &r in &rows {
            self.value.row_mut(r).fill(0.0);
        }
        self.frozen_rows = rows;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Mat) -> Result<()> {
        self.grad.add_assign(g)?;
        self.clear_frozen_grad();
        Ok(())
    }

    /// Adds `g` into one row of the gradient, unless that row is frozen.
    pub fn accumulate_row(&mut self, row: usize, g: &[f64]) {
        if self.frozen_rows.contains(&row) {
            return;
        }
        for (a, b) in self.grad.row_mut(row).iter_mut().zip(g) {
            *a += b;
        }
    }

    fn clear_frozen_grad(&mut self) {
        for &r in &self.frozen_rows {
            self.grad.row_mut(r).fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0], None).unwrap();
        assert!(close(&s, &[1.0 / 3.0; 3], 1e-15));

        let s = softmax(&[2f64.ln(), 0.0], None).unwrap();
        assert!(close(&s, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let s = softmax(&[5.0, 5.0, 5.0], Some(&[true, true, false])).unwrap();
        assert_eq!(s, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_rejects_all_masked() {
        let err = softmax(&[1.0, 2.0], Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        assert!(softmax(&[], None).is_err());
    }

    #[test]
    fn softmax_large_inputs() {
        let s = softmax(&[1e4, -1e4, 9999.0], None).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let z = [0.0; 3];
        let one = [1.0; 3];
        let (out, _) = layer_norm(&[4.2, 4.2, 4.2], &one, &z, LAYER_NORM_EPS).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);

        let (out, _) = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!(close(&out, &[1.0, -1.0], 1e-12));

        // mean 3, population std 1: (v - 3) * 3 + 1
        let (out, _) = layer_norm(&[2.0, 4.0], &[3.0, 3.0], &[1.0, 1.0], 1e-14).unwrap();
        assert!(close(&out, &[-2.0, 4.0], 1e-12));
    }

    #[test]
    fn elementwise_examples() {
        let a = Mat::row_vector(&[1.0, 2.0]);
        let b = Mat::row_vector(&[3.0, 4.0]);
        assert_eq!(elem_mul(&a, &b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(relu(&Mat::row_vector(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_padded() {
        let a = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let b = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
        assert!(add(&a, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).unwrap();
        let b = Mat::from_rows(&[[2.0, 1.0, 0.0], [-1.0, 4.0, 2.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), c);
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), c);
    }

    #[test]
    fn max_ties_go_to_lowest_row() {
        let a = Mat::from_rows(&[[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]]).unwrap();
        let (m, arg) = max_over_rows(&a).unwrap();
        assert_eq!(m, vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let g = max_over_rows_backward(3, &arg, &[1.0, 2.0]);
        assert_eq!(g.data(), &[0.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_frozen_row_ignores_gradient() {
        let mut p = Param::new("t", Mat::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap())
            .with_frozen_rows(vec![0]);
        assert_eq!(p.value.row(0), &[0.0, 0.0]);
        p.accumulate(&Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        p.accumulate_row(0, &[5.0, 5.0]);
        p.accumulate_row(1, &[1.0, 0.0]);
        assert_eq!(p.grad.data(), &[0.0, 0.0, 2.0, 1.0]);
        p.zero_grad();
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }
}
