use rayon::prelude::*;

use crate::numerics::Tensor;

use super::GraphError;

/// Unconstrained dynamic time warping with `|a_i − b_j|` local cost.
///
/// The path is anchored at `(0, 0)` and `(len_a − 1, len_b − 1)` and moves by
/// steps `(1,0)`, `(0,1)` or `(1,1)`.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64, GraphError> {
    if a.is_empty() || b.is_empty() {
        return Err(GraphError::Input("dtw needs two non-empty series".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &x) in a.iter().enumerate() {
        for j in 0..m {
            let cost = (x - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Symmetric `N×N` DTW distances between the rows of `series`. Rows are computed in parallel.
pub fn dtw_matrix(series: &Tensor) -> Result<Tensor, GraphError> {
    let [n, _] = series.dims2()?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if j > i { dtw_distance(series.row(i), series.row(j)) } else { Ok(0.0) })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            out.set2(i, j, rows[i][j]);
            out.set2(j, i, rows[i][j]);
        }
    }
    Ok(out)
}
