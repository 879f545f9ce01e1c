use std::path::Path;

use crate::numerics::{write_csv_row, Tensor};

use super::dtw::dtw_matrix;
use super::paths::DistanceMatrix;
use super::GraphError;

/// `1` where `D(i,j) < threshold` (strict), else `0`.
pub fn build_local_mask(d: &DistanceMatrix, threshold: f64) -> Result<Tensor, GraphError> {
    if !(threshold > 0.0) {
        return Err(GraphError::Config(format!("local threshold must be positive, got {threshold}")));
    }
    let n = d.n();
    let data = d.as_slice().iter().map(|&x| if x < threshold { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![n, n], data)?)
}

/// Per-slot mean over complete days of `history` (`N × T_hist`); a trailing partial day is dropped.
pub fn daily_average(history: &Tensor, steps_per_day: usize) -> Result<Tensor, GraphError> {
    let [n, len] = history.dims2()?;
    if steps_per_day == 0 || len < steps_per_day {
        return Err(GraphError::Input(format!(
            "history has {len} steps, fewer than one day of {steps_per_day}"
        )));
    }
    let days = len / steps_per_day;
    let mut out = Tensor::zeros(&[n, steps_per_day]);
    for i in 0..n {
        let row = history.row(i);
        for s in 0..steps_per_day {
            let total: f64 = (0..days).map(|d| row[d * steps_per_day + s]).sum();
            out.set2(i, s, total / days as f64);
        }
    }
    Ok(out)
}

/// The `k` nodes closest to `i` under `dist` (excluding `i`); ties go to the lower index.
pub fn top_k_nearest(dist: &Tensor, i: usize, k: usize) -> Vec<usize> {
    let n = dist.shape()[0];
    let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| dist.get2(i, a).total_cmp(&dist.get2(i, b)).then(a.cmp(&b)));
    others.truncate(k);
    others
}

/// Mutual top-`k` neighbourhood over a dissimilarity matrix.
pub fn mutual_top_k(dist: &Tensor, k: usize) -> Result<Tensor, GraphError> {
    let [n, c] = dist.dims2()?;
    if n != c {
        return Err(GraphError::Input(format!("distance matrix must be square, got {:?}", dist.shape())));
    }
    if n < 2 || k == 0 || k >= n {
        return Err(GraphError::Config(format!("k_global must satisfy 0 < k < N (k={k}, N={n})")));
    }
    let mut member = vec![false; n * n];
    for i in 0..n {
        for j in top_k_nearest(dist, i, k) {
            member[i * n + j] = true;
        }
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if member[i * n + j] && member[j * n + i] {
                out.set2(i, j, 1.0);
            }
        }
    }
    Ok(out)
}

/// Global view: mutual top-`k` DTW neighbours of the daily-average profiles (`N × steps_per_day`).
pub fn build_global_mask(avg: &Tensor, k: usize) -> Result<Tensor, GraphError> {
    let [n, _] = avg.dims2()?;
    if n < 2 || k == 0 || k >= n {
        return Err(GraphError::Config(format!("k_global must satisfy 0 < k < N (k={k}, N={n})")));
    }
    mutual_top_k(&dtw_matrix(avg)?, k)
}

/// Row sum plus column sum of the OD matrix; the diagonal is counted twice.
pub fn node_scores(od: &Tensor) -> Result<Vec<f64>, GraphError> {
    let [n, c] = od.dims2()?;
    if n != c {
        return Err(GraphError::Input(format!("OD matrix must be square, got {:?}", od.shape())));
    }
    if od.data().iter().any(|&v| v < 0.0) {
        return Err(GraphError::Input("OD entries must be nonnegative".into()));
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| od.get2(i, j) + od.get2(j, i)).sum())
        .collect())
}

/// Indices of the `k` highest scores; ties go to the lower index.
pub fn top_k_scores(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `Score(i) + Score(j)` whenever `i` or `j` is pivotal, else `0`.
pub fn build_pivotal_mask(scores: &[f64], k: usize) -> Result<Tensor, GraphError> {
    let n = scores.len();
    if k > n {
        return Err(GraphError::Config(format!("k_pivotal {k} exceeds N={n}")));
    }
    let mut pivotal = vec![false; n];
    for i in top_k_scores(scores, k) {
        pivotal[i] = true;
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if pivotal[i] || pivotal[j] {
                out.set2(i, j, scores[i] + scores[j]);
            }
        }
    }
    Ok(out)
}

/// Writes a square mask as CSV under a `# mask <name> N=<n>` header.
pub fn write_mask_csv(path: impl AsRef<Path>, name: &str, mask: &Tensor) -> Result<(), GraphError> {
    std::fs::write(path, mask_to_csv(name, mask)?)?;
    Ok(())
}

pub fn mask_to_csv(name: &str, mask: &Tensor) -> Result<String, GraphError> {
    let [n, _] = mask.dims2()?;
    let mut s = format!("# mask {name} N={n}\n");
    for i in 0..n {
        write_csv_row(&mut s, mask.row(i));
    }
    Ok(s)
}

/// Reads a mask CSV, returning its name and matrix.
pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<(String, Tensor), GraphError> {
    parse_mask_csv(&std::fs::read_to_string(path)?)
}

pub fn parse_mask_csv(text: &str) -> Result<(String, Tensor), GraphError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let parse_err = |line: usize, msg: String| GraphError::Parse { line, msg };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (name, n) = match fields.as_slice() {
        ["#", "mask", name, size] => {
            let n = size
                .strip_prefix("N=")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| parse_err(1, format!("bad size field `{size}`")))?;
            (name.to_string(), n)
        }
        _ => return Err(parse_err(1, "expected `# mask <name> N=<n>` header".into())),
    };
    let rows = parse_rows(lines, n, n)?;
    Ok((name, Tensor::new(vec![n, n], rows)?))
}

/// Parses `rows` lines of `cols` comma-separated reals; blank lines are skipped.
pub(crate) fn parse_rows<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>, GraphError> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| GraphError::Parse { line: idx + 1, msg: e.to_string() })?;
        if vals.len() != cols {
            return Err(GraphError::Parse {
                line: idx + 1,
                msg: format!("expected {cols} values, found {}", vals.len()),
            });
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(GraphError::Parse { line: 0, msg: format!("expected {rows} rows, found {seen}") });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_views::{shortest_paths, Edge, RoadGraph};

    fn path3() -> DistanceMatrix {
        let g = RoadGraph::new(3, &[Edge::new(0, 1, Some(1.0)), Edge::new(1, 2, Some(2.0))], None).unwrap();
        shortest_paths(&g).unwrap()
    }

    #[test]
    fn local_mask_threshold() {
        let m = build_local_mask(&path3(), 2.0).unwrap();
        assert_eq!(m.get2(0, 2), 0.0);
        assert_eq!(m.get2(0, 1), 1.0);
        // D(1,2) = 2 is not strictly below 2
        assert_eq!(m.get2(1, 2), 0.0);
        assert!((0..3).all(|i| m.get2(i, i) == 1.0));
        let all = build_local_mask(&path3(), f64::INFINITY).unwrap();
        assert!(all.data().iter().all(|&v| v == 1.0));
        assert!(build_local_mask(&path3(), 0.0).is_err());
    }

    #[test]
    fn daily_average_cases() {
        let day = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(daily_average(&day, 4).unwrap(), day);
        let two = Tensor::new(vec![1, 4], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(daily_average(&two, 2).unwrap().data(), &[2.0, 2.0]);
        // 2.5 days: the half day is ignored
        let h = Tensor::new(vec![1, 5], vec![1.0, 2.0, 3.0, 6.0, 100.0]).unwrap();
        assert_eq!(daily_average(&h, 2).unwrap().data(), &[2.0, 4.0]);
        assert!(daily_average(&h, 6).is_err());
    }

    #[test]
    fn global_mask_identical_pair() {
        let avg = Tensor::from_rows(&[
            vec![0.0, 5.0, 1.0],
            vec![9.0, 2.0, 7.0],
            vec![0.0, 5.0, 1.0],
            vec![3.0, 3.0, -4.0],
        ])
        .unwrap();
        let m = build_global_mask(&avg, 1).unwrap();
        assert_eq!(m.get2(0, 2), 1.0);
        assert_eq!(m.get2(2, 0), 1.0);
        let full = build_global_mask(&avg, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(full.get2(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
        assert!(matches!(build_global_mask(&avg, 4), Err(GraphError::Config(_))));
    }

    #[test]
    fn scores_and_pivotal() {
        let sym = Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(node_scores(&sym).unwrap(), vec![4.0, 6.0]);
        assert_eq!(node_scores(&Tensor::zeros(&[3, 3])).unwrap(), vec![0.0; 3]);

        let m = build_pivotal_mask(&[5.0, 3.0, 1.0], 1).unwrap();
        assert_eq!(m.get2(0, 1), 8.0);
        assert_eq!(m.get2(1, 2), 0.0);
        assert_eq!(m.get2(0, 2), 6.0);
        assert!(build_pivotal_mask(&[5.0, 3.0, 1.0], 0).unwrap().data().iter().all(|&v| v == 0.0));
        let all = build_pivotal_mask(&[5.0, 3.0, 1.0], 3).unwrap();
        assert_eq!(all.get2(1, 2), 4.0);
        assert_eq!(all.get2(2, 2), 2.0);
    }

    #[test]
    fn pivotal_ties_prefer_lower_index() {
        assert_eq!(top_k_scores(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_scores(&[3.0, 3.0, 3.0], 1), vec![0]);
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.25, 1.0]]).unwrap();
        let text = mask_to_csv("local", &m).unwrap();
        assert!(text.starts_with("# mask local N=2\n"));
        let (name, back) = parse_mask_csv(&text).unwrap();
        assert_eq!(name, "local");
        assert_eq!(back, m);
        assert!(parse_mask_csv("# mask x N=2\n1,0\n").is_err());
    }
}
