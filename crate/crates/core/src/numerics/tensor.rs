use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Zero-length axes are allowed so that empty neighbour sets (a single agent)
/// flow through the same code as populated ones.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn trailing(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Offset of a multi-index into the flat buffer.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (p, q) = self.as_matrix()?;
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = self.data[i * q + j];
            }
        }
        Tensor::new(vec![q, p], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.as_matrix()?;
        let (q2, r) = other.as_matrix()?;
        if q != q2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; p * r];
        gemm_nn(&self.data, &other.data, &mut out, p, q, r);
        Tensor::new(vec![p, r], out)
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[p, q] => Ok((p, q)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Numerically stable softmax of `logits / tau`.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be > 0, got {tau}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, tau, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-row Euclidean distance between two `[C, n]` coordinate sets.
pub fn column_l2_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::dim(format!(
            "column distance needs equal [C, n] shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.trailing();
    let dist = a
        .data()
        .chunks_exact(n)
        .zip(b.data().chunks_exact(n))
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect();
    Tensor::new(vec![a.shape()[0]], dist)
}

// Dense kernels. All matrices row-major; `c` is accumulated into.

/// c[p×r] += a[p×q] · b[q×r]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    if r == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(q.max(1)).zip(c.chunks_exact_mut(r)).take(p) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(r)) {
            if aik == 0.0 {
                continue;
            }
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// c[p×r] += a[p×q] · b[r×q]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    if q == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(q).zip(c.chunks_exact_mut(r.max(1))).take(p) {
        for (cj, b_row) in c_row.iter_mut().zip(b.chunks_exact(q)) {
            *cj += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[q×r] += a[p×q]ᵀ · b[p×r]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    if q == 0 || r == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(q).zip(b.chunks_exact(r)).take(p) {
        for (&aik, c_row) in a_row.iter().zip(c.chunks_exact_mut(r)) {
            if aik == 0.0 {
                continue;
            }
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let z = a.matmul(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::from_fn(&[3, 4], |k| (k as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[5, 4], |k| (k as f64 * 0.11).cos());
        let mut nt = vec![0.0; 15];
        gemm_nt(a.data(), b.data(), &mut nt, 3, 4, 5);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(Tensor::new(vec![3, 5], nt).unwrap().max_abs_diff(&expect) < 1e-14);

        let c = Tensor::from_fn(&[3, 2], |k| k as f64 - 2.5);
        let mut tn = vec![0.0; 8];
        gemm_tn(a.data(), c.data(), &mut tn, 3, 4, 2);
        let expect = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(Tensor::new(vec![4, 2], tn).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temperature(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        for c in [-7.0, 0.0, 123.0] {
            for tau in [0.1, 1.0, 5.0] {
                let p = softmax_temperature(&[c, c, c], tau).unwrap();
                assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
            }
        }
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_temperature(&[1000.0, -1000.0, 999.0, 0.5], 0.7).unwrap();
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn column_distance_examples() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let d = column_l2_distance(&a, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);
        let d = column_l2_distance(&a, &a).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0]);
        assert!(column_l2_distance(&a, &Tensor::zeros(&[2, 3])).is_err());
    }
}
