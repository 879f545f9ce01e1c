use super::{GraphError, RoadGraph};

/// All-pairs shortest-path lengths; unreachable pairs hold `f64::INFINITY`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

/// Floyd–Warshall over edge distances, or unit weights (hop counts) when the graph has none.
pub fn shortest_paths(g: &RoadGraph) -> Result<DistanceMatrix, GraphError> {
    let n = g.n_nodes();
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in g.neighbors(i) {
            let w = g.edge_dist().map_or(1.0, |ed| ed[i * n + j]);
            if w < 0.0 {
                return Err(GraphError::Input(format!("negative edge weight {w} on {i}-{j}")));
            }
            d[i * n + j] = d[i * n + j].min(w);
        }
        d[i * n + i] = 0.0;
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik == f64::INFINITY {
                continue;
            }
            for j in 0..n {
                let via = dik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    Ok(DistanceMatrix { n, d })
}
