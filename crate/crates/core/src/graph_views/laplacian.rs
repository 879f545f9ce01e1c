use std::path::Path;

use crate::numerics::{sym_eig, write_csv_row, Tensor};

use super::masks::parse_rows;
use super::{GraphError, RoadGraph};

/// Eigenvalues below this are treated as the trivial (per-component constant) modes.
pub const TRIVIAL_EIGENVALUE: f64 = 1e-8;

/// The `k` smallest non-trivial eigenvectors of the normalized Laplacian.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianBasis {
    /// `N × k`, one eigenvector per column.
    pub vectors: Tensor,
    pub eigenvalues: Vec<f64>,
}

impl LaplacianBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn to_csv(&self) -> String {
        let (n, k) = (self.n_nodes(), self.k());
        let mut s = format!("# basis N={n} k={k}\n# eigenvalues ");
        let ev: Vec<String> = self.eigenvalues.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&ev.join(","));
        s.push('\n');
        for i in 0..n {
            write_csv_row(&mut s, self.vectors.row(i));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().enumerate();
        let perr = |line, msg: &str| GraphError::Parse { line, msg: msg.to_string() };
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let mut n = None;
        let mut k = None;
        for f in header.split_whitespace() {
            if let Some(v) = f.strip_prefix("N=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = f.strip_prefix("k=") {
                k = v.parse::<usize>().ok();
            }
        }
        let (Some(n), Some(k)) = (n, k) else {
            return Err(perr(1, "expected `# basis N=<n> k=<k>` header"));
        };
        let ev_line = lines.next().map(|(_, l)| l).unwrap_or("");
        let ev_text = ev_line
            .strip_prefix("# eigenvalues")
            .ok_or_else(|| perr(2, "expected `# eigenvalues` line"))?;
        let eigenvalues: Vec<f64> = ev_text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(2, &e.to_string()))?;
        if eigenvalues.len() != k {
            return Err(perr(2, "eigenvalue count does not match k"));
        }
        let data = parse_rows(lines, n, k)?;
        Ok(Self { vectors: Tensor::new(vec![n, k], data)?, eigenvalues })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

/// `I − D^{-1/2} A D^{-1/2}`; an isolated node contributes an identity row.
pub fn normalized_laplacian(g: &RoadGraph) -> Tensor {
    let n = g.n_nodes();
    let a = g.adjacency();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor::identity(n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get2(i, j) * inv_sqrt[i] * inv_sqrt[j];
            if v != 0.0 {
                l.set2(i, j, l.get2(i, j) - v);
            }
        }
    }
    l
}

pub fn laplacian_basis(g: &RoadGraph, k: usize) -> Result<LaplacianBasis, GraphError> {
    let n = g.n_nodes();
    if k == 0 || k >= n {
        return Err(GraphError::Config(format!("Laplacian basis size must satisfy 0 < k ≤ N−1 (k={k}, N={n})")));
    }
    let eig = sym_eig(&normalized_laplacian(g))?;
    let keep: Vec<usize> = (0..n).filter(|&i| eig.values[i] >= TRIVIAL_EIGENVALUE).take(k).collect();
    if keep.len() < k {
        return Err(GraphError::Input(format!(
            "graph has {} connected components, leaving {} non-trivial eigenvectors; {k} requested",
            g.component_count(),
            keep.len()
        )));
    }
    let mut vectors = Tensor::zeros(&[n, k]);
    for (c, &src) in keep.iter().enumerate() {
        for r in 0..n {
            vectors.set2(r, c, eig.vectors.get2(r, src));
        }
    }
    let eigenvalues = keep.iter().map(|&i| eig.values[i]).collect();
    Ok(LaplacianBasis { vectors, eigenvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_views::Edge;

    #[test]
    fn two_node_graph() {
        let g = RoadGraph::new(2, &[Edge::new(0, 1, None)], None).unwrap();
        let l = normalized_laplacian(&g);
        assert_eq!(l.data(), &[1.0, -1.0, -1.0, 1.0]);
        let b = laplacian_basis(&g, 1).unwrap();
        assert!((b.eigenvalues[0] - 2.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.vectors.get2(0, 0) - r).abs() < 1e-12);
        assert!((b.vectors.get2(1, 0) + r).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_gets_identity_row() {
        let g = RoadGraph::new(3, &[Edge::new(0, 1, None)], None).unwrap();
        let l = normalized_laplacian(&g);
        assert_eq!(l.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_few_nontrivial_names_components() {
        // two components → two zero eigenvalues, one non-trivial (2.0) per edge
        let g = RoadGraph::new(4, &[Edge::new(0, 1, None), Edge::new(2, 3, None)], None).unwrap();
        let err = laplacian_basis(&g, 3).unwrap_err().to_string();
        assert!(err.contains("2 connected components"), "{err}");
        assert_eq!(laplacian_basis(&g, 2).unwrap().k(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let g = RoadGraph::new(3, &[Edge::new(0, 1, None), Edge::new(1, 2, None)], None).unwrap();
        let b = laplacian_basis(&g, 2).unwrap();
        assert_eq!(LaplacianBasis::parse_csv(&b.to_csv()).unwrap(), b);
    }
}
