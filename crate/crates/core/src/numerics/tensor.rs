use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::NumericsError;

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::Shape(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal use where the length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
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

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose2(&self) -> Result<Self, NumericsError> {
        let [r, c] = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn dims2(&self) -> Result<[usize; 2], NumericsError> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(NumericsError::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<(), NumericsError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Writes the tensor as CSV: a `# shape a,b,...` header, then rows over the last axis.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv_string().as_bytes())?;
        f.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        let mut s = format!("# shape {}\n", dims.join(","));
        for row in self.data.chunks(self.last_dim()) {
            write_csv_row(&mut s, row);
        }
        s
    }
}

/// Appends one comma-separated row using shortest round-trip float formatting.
pub(crate) fn write_csv_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

/// Runs `$body` through a copy compiled with AVX2 when the CPU has it. Only the
/// vector width changes; the arithmetic and its order are the same on both paths.
macro_rules! avx2_dispatch {
    ($(#[$meta:meta])* fn $name:ident($($arg:ident: $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        $(#[$meta])*
        pub(crate) fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn imp($($arg: $ty),*) $(-> $ret)? $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    imp($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature `wide` was compiled for is present.
                    return unsafe { wide($($arg),*) };
                }
            }
            imp($($arg),*)
        }
    };
}

const ROWS: usize = 4;
const COLS: usize = 8;

avx2_dispatch! {
    /// `out[m×n] += a[m×k] · b[k×n]`. Each output element accumulates its `k` products in
    /// order onto the existing value; tiles of `ROWS × COLS` are kept in registers.
    fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        let full_rows = m - m % ROWS;
        let full_cols = n - n % COLS;
        for i in (0..full_rows).step_by(ROWS) {
            for j in (0..full_cols).step_by(COLS) {
                let mut acc = [[0.0; COLS]; ROWS];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + COLS]);
                }
                for p in 0..k {
                    let bv: &[f64; COLS] = b[p * n + j..p * n + j + COLS].try_into().expect("tile width");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for c in 0..COLS {
                            row[c] += av * bv[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i + r) * n + j..(i + r) * n + j + COLS].copy_from_slice(row);
                }
            }
            for r in i..i + ROWS {
                axpy_row(&a[r * k..(r + 1) * k], b, n, full_cols, &mut out[r * n..(r + 1) * n]);
            }
        }
        for r in full_rows..m {
            axpy_row(&a[r * k..(r + 1) * k], b, n, 0, &mut out[r * n..(r + 1) * n]);
        }
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn axpy_row(arow: &[f64], b: &[f64], n: usize, from: usize, orow: &mut [f64]) {
    if from == n {
        return;
    }
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + from..(p + 1) * n];
        for (o, &bv) in orow[from..].iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_acc(a, &transpose(b, n, k), m, k, n, out);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_acc(&transpose(a, m, k), b, k, m, n, out);
}

/// Row-major `r×c` → `c×r`.
fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

avx2_dispatch! {
    /// Inner product with four interleaved partial sums.
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut lanes = [0.0; 4];
        let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..4 {
                lanes[l] += x[l] * y[l];
            }
        }
        let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
    }
}

/// Untracked matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Max-shifted softmax over each last-axis slice.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor, NumericsError> {
    t.ensure_finite("softmax input")?;
    let c = t.last_dim();
    let mut out = vec![0.0; t.len()];
    for (x, o) in t.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_slice(x, o);
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&p, &v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_lastdim(&Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn csv_dump_has_shape_header() {
        let t = Tensor::from_rows(&[vec![1.0, 2.5], vec![3.0, -4.0]]).unwrap();
        assert_eq!(t.to_csv_string(), "# shape 2,2\n1.0,2.5\n3.0,-4.0\n");
    }
}

