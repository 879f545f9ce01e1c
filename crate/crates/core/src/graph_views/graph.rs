use std::fmt::Write as _;

use crate::numerics::Tensor;

use super::GraphError;

/// Road network: binary symmetric adjacency, optional edge lengths, optional OD counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    n: usize,
    adjacency: Vec<bool>,
    /// Row-major `n×n`; `+∞` where there is no edge. Present only if every edge carried a distance.
    edge_dist: Option<Vec<f64>>,
    od: Option<Tensor>,
}

/// One undirected edge as read from a graph file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub dist: Option<f64>,
}

impl Edge {
    pub fn new(from: usize, to: usize, dist: Option<f64>) -> Self {
        Self { from, to, dist }
    }
}

impl RoadGraph {
    /// Builds an undirected graph. Either every edge has a distance or none does.
    pub fn new(n: usize, edges: &[Edge], od: Option<Tensor>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Input("graph needs at least one node".into()));
        }
        let with_dist = edges.iter().filter(|e| e.dist.is_some()).count();
        if with_dist != 0 && with_dist != edges.len() {
            return Err(GraphError::Input(format!(
                "{with_dist} of {} edges carry a distance; give all or none",
                edges.len()
            )));
        }
        let mut adjacency = vec![false; n * n];
        let mut dist = (with_dist > 0).then(|| vec![f64::INFINITY; n * n]);
        for e in edges {
            if e.from >= n || e.to >= n {
                return Err(GraphError::Input(format!("edge {}-{} outside 0..{n}", e.from, e.to)));
            }
            if e.from == e.to {
                return Err(GraphError::Input(format!("self-loop on node {}", e.from)));
            }
            adjacency[e.from * n + e.to] = true;
            adjacency[e.to * n + e.from] = true;
            if let (Some(d), Some(w)) = (dist.as_mut(), e.dist) {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(GraphError::Input(format!(
                        "edge {}-{} has invalid distance {w}; distances must be finite and nonnegative",
                        e.from, e.to
                    )));
                }
                // Parallel edges keep the shorter length.
                let cur = d[e.from * n + e.to];
                let best = cur.min(w);
                d[e.from * n + e.to] = best;
                d[e.to * n + e.from] = best;
            }
        }
        if let Some(m) = &od {
            if m.shape() != [n, n] {
                return Err(GraphError::Input(format!("OD matrix {:?} does not match N={n}", m.shape())));
            }
            if m.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(GraphError::Input("OD entries must be finite and nonnegative".into()));
            }
        }
        Ok(Self { n, adjacency, edge_dist: dist, od })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn adjacency(&self) -> Tensor {
        let data = self.adjacency.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.n, self.n], data).expect("n×n")
    }

    pub fn edge_dist(&self) -> Option<&[f64]> {
        self.edge_dist.as_deref()
    }

    pub fn od_matrix(&self) -> Option<&Tensor> {
        self.od.as_ref()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.adjacency[i * self.n + j])
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push(Edge::new(i, j, self.edge_dist.as_ref().map(|d| d[i * self.n + j])));
                }
            }
        }
        out
    }

    /// Number of connected components (BFS).
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut count = 0;
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let edges: Vec<Edge> = self
            .edges()
            .into_iter()
            .map(|e| Edge::new(perm[e.from], perm[e.to], e.dist))
            .collect();
        let od = self.od.as_ref().map(|m| permute_matrix(m, perm));
        Self::new(self.n, &edges, od)
    }

    /// Parses the line-oriented graph format: `N <count>`, then `E i j [dist]` and `OD i j w` lines.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut n = None;
        let mut edges = Vec::new();
        let mut od_entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| GraphError::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad node index `{s}`")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
            match fields[0] {
                "N" if fields.len() == 2 => {
                    if n.is_some() {
                        return Err(err("duplicate N header".into()));
                    }
                    n = Some(num(fields[1])?);
                }
                "E" if fields.len() == 3 || fields.len() == 4 => {
                    let dist = fields.get(3).map(|s| real(s)).transpose()?;
                    edges.push(Edge::new(num(fields[1])?, num(fields[2])?, dist));
                }
                "OD" if fields.len() == 4 => {
                    od_entries.push((num(fields[1])?, num(fields[2])?, real(fields[3])?, line_no));
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
            if n.is_none() {
                return Err(err("first entry must be the `N <count>` header".into()));
            }
        }
        let n = n.ok_or(GraphError::Parse { line: 0, msg: "missing `N <count>` header".into() })?;
        let od = if od_entries.is_empty() {
            None
        } else {
            let mut m = Tensor::zeros(&[n, n]);
            for (i, j, w, line) in od_entries {
                if i >= n || j >= n {
                    return Err(GraphError::Parse { line, msg: format!("OD entry {i},{j} outside 0..{n}") });
                }
                m.set2(i, j, m.get2(i, j) + w);
            }
            Some(m)
        };
        Self::new(n, &edges, od)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("N {}\n", self.n);
        for e in self.edges() {
            match e.dist {
                Some(d) => writeln!(s, "E {} {} {d:?}", e.from, e.to),
                None => writeln!(s, "E {} {}", e.from, e.to),
            }
            .unwrap();
        }
        if let Some(m) = &self.od {
            for i in 0..self.n {
                for j in 0..self.n {
                    let w = m.get2(i, j);
                    if w != 0.0 {
                        writeln!(s, "OD {i} {j} {w:?}").unwrap();
                    }
                }
            }
        }
        s
    }
}

/// `out(perm[i], perm[j]) = m(i, j)`.
pub fn permute_matrix(m: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set2(perm[i], perm[j], m.get2(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "# toy\nN 3\nE 0 1 1.5\nE 1 2 2.0\nOD 0 2 4\n";
        let g = RoadGraph::parse(text).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert!(g.has_edge(1, 0) && !g.has_edge(0, 2));
        assert_eq!(g.od_matrix().unwrap().get2(0, 2), 4.0);
        assert_eq!(RoadGraph::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RoadGraph::parse("N 3\nE 0 x\n") {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RoadGraph::parse("E 0 1\n").is_err());
    }

    #[test]
    fn rejects_negative_distance_and_self_loop() {
        assert!(RoadGraph::new(2, &[Edge::new(0, 1, Some(-1.0))], None).is_err());
        assert!(RoadGraph::new(2, &[Edge::new(1, 1, None)], None).is_err());
        assert!(RoadGraph::new(3, &[Edge::new(0, 1, Some(1.0)), Edge::new(1, 2, None)], None).is_err());
    }

    #[test]
    fn components() {
        let g = RoadGraph::new(4, &[Edge::new(0, 1, None), Edge::new(2, 3, None)], None).unwrap();
        assert_eq!(g.component_count(), 2);
    }
}
