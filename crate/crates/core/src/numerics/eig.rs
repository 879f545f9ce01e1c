//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::tensor::Tensor;
use super::NumericsError;

const MAX_SWEEPS: usize = 100;
const REL_TOL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    /// `n×n`; column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Tensor,
}

impl SymEig {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|r| self.vectors.get2(r, i)).collect()
    }
}

pub fn sym_eig(m: &Tensor) -> Result<SymEig, NumericsError> {
    let [n, c] = m.dims2()?;
    if n != c {
        return Err(NumericsError::Shape(format!("sym_eig needs a square matrix, got {:?}", m.shape())));
    }
    m.ensure_finite("sym_eig input")?;
    let scale = m.max_abs().max(1.0);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (m.get2(i, j), m.get2(j, i));
            if (x - y).abs() > 1e-10 * scale {
                return Err(NumericsError::Input(format!(
                    "matrix not symmetric at ({i},{j}): {x} vs {y}"
                )));
            }
            a[i * n + j] = 0.5 * (x + y);
        }
    }
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = Tensor::identity(n).into_data();

    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&a, n);
        if off <= REL_TOL * fro {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut a, n, p, q, c, s);
                rotate_rows(&mut a, n, p, q, c, s);
                rotate_columns(&mut v, n, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|r| v[r * n + src]).collect();
        fix_sign(&mut col);
        for (r, x) in col.into_iter().enumerate() {
            vectors.set2(r, dst, x);
        }
    }
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

fn rotate_columns(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let (x, y) = (a[k * n + p], a[k * n + q]);
        a[k * n + p] = c * x - s * y;
        a[k * n + q] = s * x + c * y;
    }
}

fn rotate_rows(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let (x, y) = (a[p * n + k], a[q * n + k]);
        a[p * n + k] = c * x - s * y;
        a[q * n + k] = s * x + c * y;
    }
}

/// Flips the vector so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}
