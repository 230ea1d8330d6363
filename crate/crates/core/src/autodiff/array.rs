//! Dense row-major arrays of 64-bit reals and the raw math kernels
//! shared by the tape's forward and backward passes.

use super::AdError;

/// A dense multi-dimensional array. Shape `[]` denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array, checking the shape/length invariant and that every
    /// entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; skips the finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    /// 1-D array from a plain vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    /// 2-D array from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single entry of a scalar-shaped array.
    ///
    /// Panics if the array is not scalar-shaped; callers are expected to have
    /// checked the shape already.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar array of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Extent of the last axis; 1 for scalars.
    pub(crate) fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the array is viewed as `[rows, last_dim]`.
    pub(crate) fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels. Shape validation happens at the tape layer; kernels assume legal
// inputs and are shared verbatim between forward evaluation and backward.
// ---------------------------------------------------------------------------

/// `a [m,k] @ b [k,n]`. Skips exact-zero multipliers, which makes the
/// one-hot selector matrices used for token lookup effectively free.
pub(crate) fn mm_nn(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Array::from_parts(vec![m, n], out)
}

/// `a [m,k] @ b^T` with `b [n,k]`.
pub(crate) fn mm_nt(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Array::from_parts(vec![m, n], out)
}

/// `a^T @ b` with `a [k,m]`, `b [k,n]`.
pub(crate) fn mm_tn(a: &Array, b: &Array) -> Array {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a.data[l * m..(l + 1) * m];
        let brow = &b.data[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Array::from_parts(vec![m, n], out)
}

pub(crate) fn transpose(a: &Array) -> Array {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Array::from_parts(vec![n, m], out)
}

pub(crate) fn ew_binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_parts(a.shape.clone(), data)
}

pub(crate) fn ew_scalar(a: &Array, s: f64, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data.iter().map(|&x| f(x, s)).collect();
    Array::from_parts(a.shape.clone(), data)
}

pub(crate) fn ew_unary(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    let data = a.data.iter().map(|&x| f(x)).collect();
    Array::from_parts(a.shape.clone(), data)
}

/// Numerically stable softmax along the last axis.
pub(crate) fn softmax_last(a: &Array) -> Array {
    let cols = a.last_dim();
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows() {
        let row = &a.data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Array::from_parts(a.shape.clone(), out)
}

/// Stable log-softmax along the last axis.
pub(crate) fn log_softmax_last(a: &Array) -> Array {
    let cols = a.last_dim();
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows() {
        let row = &a.data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    Array::from_parts(a.shape.clone(), out)
}

/// Unit-normalizes each row of the last axis; rejects rows with exactly
/// zero norm.
pub(crate) fn l2_normalize_last(a: &Array) -> Result<Array, AdError> {
    let cols = a.last_dim();
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows() {
        let row = &a.data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(AdError::ZeroNorm { op: "l2-normalize" });
        }
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = x / norm;
        }
    }
    Ok(Array::from_parts(a.shape.clone(), out))
}

/// Row norms along the last axis, used by the l2-normalize backward rule.
pub(crate) fn row_norms(a: &Array) -> Vec<f64> {
    let cols = a.last_dim();
    (0..a.rows())
        .map(|r| {
            a.data[r * cols..(r + 1) * cols]
                .iter()
                .map(|&x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Picks `a[r, idx[r]]` for each row along the last axis.
pub(crate) fn gather_last(a: &Array, idx: &[usize]) -> Result<Array, AdError> {
    let cols = a.last_dim();
    let mut out = Vec::with_capacity(a.rows());
    for (r, &i) in idx.iter().enumerate() {
        if i >= cols {
            return Err(AdError::IndexOutOfRange {
                index: i,
                size: cols,
            });
        }
        out.push(a.data[r * cols + i]);
    }
    let shape = a.shape[..a.shape.len() - 1].to_vec();
    Ok(Array::from_parts(shape, out))
}

pub(crate) fn sum_all(a: &Array) -> f64 {
    a.data.iter().sum()
}

pub(crate) fn inner(a: &Array, b: &Array) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub(crate) fn clip_vals(a: &Array, lo: f64, hi: f64) -> Array {
    ew_unary(a, |x| x.clamp(lo, hi))
}

/// Adds `src` into `dst` elementwise. Shapes must already match.
pub(crate) fn add_assign(dst: &mut Array, src: &Array) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Array::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Array::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Array::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Array::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 3.5);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = mm_nn(&a, &b);
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Array::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Array::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let nn = mm_nn(&a, &b);
        let nt = mm_nt(&a, &transpose(&b));
        let tn = mm_tn(&transpose(&a), &b);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
    }

    #[test]
    fn softmax_symmetry() {
        let x = Array::vector(vec![0.0, 0.0]);
        let y = softmax_last(&x);
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let x = Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(l2_normalize_last(&x).is_err());
    }

    #[test]
    fn clip_saturates() {
        let x = Array::scalar(2.0);
        assert_eq!(clip_vals(&x, 0.0, 1.0).item(), 1.0);
    }
}
