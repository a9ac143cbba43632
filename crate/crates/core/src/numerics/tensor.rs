//! Dense row-major f64 tensors.
//!
//! Values are immutable after creation; clones share the underlying buffer.
//! Broadcasting is deliberately restricted to two cases: identical shapes,
//! or one operand holding a single element.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense numeric array with shape, the universal value carrier.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, checking that the data length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self {
            shape,
            data: Arc::new(vec![1.0; n]),
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: Arc::new(v.to_vec()),
        }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer viewed under a different shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        match (self.numel(), other.numel()) {
            (a, b) if self.shape == other.shape && a == b => Ok(Tensor {
                shape: self.shape.clone(),
                data: Arc::new(
                    self.data
                        .iter()
                        .zip(other.data.iter())
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                ),
            }),
            (_, 1) => {
                let s = other.data[0];
                Ok(self.map(|x| f(x, s)))
            }
            (1, _) => {
                let s = self.data[0];
                Ok(other.map(|y| f(s, y)))
            }
            _ => Err(Error::Shape(format!(
                "incompatible shapes {:?} and {:?} (only full-shape or scalar broadcast)",
                self.shape, other.shape
            ))),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.zip(other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.map(f64::exp);
        if !out.is_finite() {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        Ok(out)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("log of negative value".into()));
        }
        if self.data.contains(&0.0) {
            return Err(Error::Domain("log of zero".into()));
        }
        Ok(self.map(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        Ok(self.map(f64::sqrt))
    }

    /// Smooth activation x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        self.map(|x| x * sigmoid(x))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(&self.shape)?;
        let (k2, n) = as_2d(&other.shape)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        dgemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    /// self * other^T, without materializing the transpose.
    pub(crate) fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(&self.shape)?;
        let (n, k2) = as_2d(&other.shape)?;
        if k != k2 {
            return Err(Error::Shape("matmul_nt inner dims disagree".into()));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                1,
                k as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::new(vec![m, n], out)
    }

    /// self^T * other, without materializing the transpose.
    pub(crate) fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = as_2d(&self.shape)?;
        let (k2, n) = as_2d(&other.shape)?;
        if k != k2 {
            return Err(Error::Shape("matmul_tn inner dims disagree".into()));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                m as isize,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::new(vec![m, n], out)
    }

    fn check_axis(&self, axis: Option<usize>) -> Result<()> {
        if let Some(ax) = axis {
            if ax >= self.shape.len() {
                return Err(Error::Shape(format!(
                    "axis {ax} out of range for shape {:?}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.check_axis(axis)?;
        match axis {
            None => Ok(Tensor::scalar(self.data.iter().sum())),
            Some(ax) => {
                let (out_shape, outer, len, inner) = reduce_geometry(&self.shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += self.data[(o * len + l) * inner + i];
                        }
                    }
                }
                Tensor::new(out_shape, out)
            }
        }
    }

    /// Arithmetic mean over one axis or over everything.
    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        let k = match axis {
            None => self.numel(),
            Some(ax) => {
                self.check_axis(axis)?;
                self.shape[ax]
            }
        } as f64;
        Ok(self.sum(axis)?.scale(1.0 / k))
    }

    /// Maximum over one axis or over everything. Ties resolve to the lowest
    /// index (relevant to the gradient rule).
    pub fn max(&self, axis: Option<usize>) -> Result<Tensor> {
        Ok(self.max_with_argmax(axis)?.0)
    }

    /// Max plus the flat index of the (lowest-index) maximizer per slice.
    pub(crate) fn max_with_argmax(&self, axis: Option<usize>) -> Result<(Tensor, Vec<usize>)> {
        self.check_axis(axis)?;
        match axis {
            None => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for (i, &v) in self.data.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                Ok((Tensor::scalar(best), vec![arg]))
            }
            Some(ax) => {
                let (out_shape, outer, len, inner) = reduce_geometry(&self.shape, ax);
                let mut out = vec![f64::NEG_INFINITY; outer * inner];
                let mut args = vec![0usize; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let v = self.data[(o * len + l) * inner + i];
                            let slot = o * inner + i;
                            if v > out[slot] {
                                out[slot] = v;
                                args[slot] = (o * len + l) * inner + i;
                            }
                        }
                    }
                }
                Ok((Tensor::new(out_shape, out)?, args))
            }
        }
    }

    /// Add a `[1, n]` row vector to every row of a `[m, n]` tensor.
    pub(crate) fn add_rowvec(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(&self.shape)?;
        let (one, n2) = as_2d(row.shape())?;
        if one != 1 || n2 != n {
            return Err(Error::Shape(format!(
                "row vector shape {:?} does not match {:?}",
                row.shape(),
                self.shape
            )));
        }
        let mut data = self.data.as_ref().clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row.data[j];
            }
        }
        Tensor::new(vec![m, n], data)
    }

    /// Horizontal concatenation of two 2-D tensors with equal row counts.
    pub fn hcat(&self, other: &Tensor) -> Result<Tensor> {
        let (m, a) = as_2d(&self.shape)?;
        let (m2, b) = as_2d(&other.shape)?;
        if m != m2 {
            return Err(Error::Shape("hcat row counts differ".into()));
        }
        let mut data = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            data.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Tensor::new(vec![m, a + b], data)
    }

    /// Copy of row `i` of a 2-D tensor as a `[1, n]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (m, n) = as_2d(&self.shape)?;
        if i >= m {
            return Err(Error::Shape(format!("row {i} out of range for {m} rows")));
        }
        Tensor::new(vec![1, n], self.data[i * n..(i + 1) * n].to_vec())
    }
}

fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Shape(format!("expected 2-D tensor, got {shape:?}"))),
    }
}

/// Shape bookkeeping for reductions: returns (output shape, outer, len, inner)
/// where the reduced axis has length `len`.
fn reduce_geometry(shape: &[usize], ax: usize) -> (Vec<usize>, usize, usize, usize) {
    let outer: usize = shape[..ax].iter().product();
    let len = shape[ax];
    let inner: usize = shape[ax + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ax)
        .map(|(_, &d)| d)
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    (out_shape, outer, len, inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn add_and_scalar_broadcast() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let s = Tensor::scalar(10.0);
        assert_eq!(a.add(&s).unwrap().data(), &[11.0, 12.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[9.0, 8.0]);
    }

    #[test]
    fn mul_by_zero() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        assert_eq!(a.mul(&Tensor::scalar(0.0)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn log_of_negative_errors() {
        assert!(Tensor::from_slice(&[-1.0]).log().is_err());
        assert!(Tensor::from_slice(&[0.5]).log().is_ok());
    }

    #[test]
    fn sqrt_of_negative_errors() {
        assert!(Tensor::from_slice(&[-0.1]).sqrt().is_err());
    }

    #[test]
    fn matmul_identity_and_small() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_mismatch_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn reductions() {
        let v = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(v.sum(None).unwrap().item(), 6.0);
        assert_eq!(Tensor::from_slice(&[2.0, 4.0]).mean(None).unwrap().item(), 3.0);
        let m = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(m.sum(Some(0)).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(m.sum(Some(1)).unwrap().data(), &[6.0, 5.0]);
        assert_eq!(m.max(Some(0)).unwrap().data(), &[2.0, 5.0]);
        assert!(v.sum(Some(1)).is_err());
    }

    #[test]
    fn max_tie_takes_lowest_index() {
        let v = Tensor::from_slice(&[1.0, 3.0, 3.0]);
        let (m, args) = v.max_with_argmax(None).unwrap();
        assert_eq!(m.item(), 3.0);
        assert_eq!(args, vec![1]);
    }

    #[test]
    fn hcat_rows() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = a.hcat(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
