use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PipelineError, ReadingsTable};
use crate::graph_views::{Edge, RoadGraph};
use crate::numerics::Tensor;

const INTERVAL_MINUTES: u32 = 5;
const STEPS_PER_DAY: usize = 288;
/// Spacing of the slow random drift's control points (12 hours).
const DRIFT_KNOT_STEPS: usize = 144;
const DIP_PROB_PER_DAY: f64 = 0.1;
const DIP_HALF_WIDTH: usize = 9;
const NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub table: ReadingsTable,
    pub graph: RoadGraph,
}

/// Synthetic flow on a random geometric road graph: per-node base level plus a
/// rush-hour daily profile (damped at weekends), a smooth drift diffused along
/// edges, occasional congestion dips and small white noise. Starts on a Monday.
pub fn synth_generate(n_nodes: usize, n_days: usize, seed: u64) -> Result<SynthData, PipelineError> {
    if n_nodes < 4 {
        return Err(PipelineError::Config(format!("synthetic graph needs at least 4 nodes, got {n_nodes}")));
    }
    if n_days == 0 {
        return Err(PipelineError::Config("synthetic data needs at least one day".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = geometric_graph(n_nodes, &mut rng)?;
    let neighbors: Vec<Vec<usize>> = (0..n_nodes).map(|i| graph.neighbors(i).collect()).collect();

    let base: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(150.0..200.0)).collect();
    let amp: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(60.0..140.0)).collect();
    let shift: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let steps = n_days * STEPS_PER_DAY;
    let n_knots = steps / DRIFT_KNOT_STEPS + 2;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let knots: Vec<Vec<f64>> = (0..n_knots)
        .map(|_| {
            let raw: Vec<f64> = (0..n_nodes).map(|_| std_normal.sample(&mut rng)).collect();
            diffuse(&diffuse(&raw, &neighbors), &neighbors)
        })
        .collect();

    let mut values = vec![0.0; n_nodes * steps];
    for node in 0..n_nodes {
        let row = &mut values[node * steps..(node + 1) * steps];
        for (s, v) in row.iter_mut().enumerate() {
            let day = s / STEPS_PER_DAY;
            let hour = (s % STEPS_PER_DAY) as f64 * 24.0 / STEPS_PER_DAY as f64;
            let weekend = day % 7 >= 5;
            let k = s / DRIFT_KNOT_STEPS;
            let frac = (s % DRIFT_KNOT_STEPS) as f64 / DRIFT_KNOT_STEPS as f64;
            let w = 0.5 - 0.5 * (PI * frac).cos();
            let drift = (1.0 - w) * knots[k][node] + w * knots[k + 1][node];
            *v = base[node] + amp[node] * daily_profile(hour + shift[node], weekend) + 0.3 * amp[node] * drift;
        }
        for day in 0..n_days {
            if rng.gen_bool(DIP_PROB_PER_DAY) {
                let centre = day * STEPS_PER_DAY + rng.gen_range(0..STEPS_PER_DAY);
                let depth = rng.gen_range(0.2..0.4) * amp[node];
                let lo = centre.saturating_sub(DIP_HALF_WIDTH);
                let hi = (centre + DIP_HALF_WIDTH).min(steps - 1);
                for (s, v) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
                    let x = (s as f64 - centre as f64) / DIP_HALF_WIDTH as f64;
                    *v -= depth * 0.5 * (1.0 + (PI * x).cos());
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    for v in values.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).max(0.0);
    }
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid date");
    let table = ReadingsTable::new(INTERVAL_MINUTES, start, Tensor::new(vec![n_nodes, steps], values)?)?;
    Ok(SynthData { table, graph })
}

/// Morning and evening peaks over a midday plateau, centred near zero; weekends are flatter and later.
fn daily_profile(hour: f64, weekend: bool) -> f64 {
    let bump = |c: f64, w: f64| (-(hour - c).powi(2) / (2.0 * w * w)).exp();
    if weekend {
        0.65 * (0.6 * bump(10.0, 2.0) + 0.7 * bump(16.0, 2.5) + 0.3 * bump(13.0, 3.0)) - 0.3
    } else {
        bump(8.0, 1.3) + 0.85 * bump(17.5, 1.6) + 0.35 * bump(13.0, 3.0) - 0.4
    }
}

fn diffuse(v: &[f64], neighbors: &[Vec<usize>]) -> Vec<f64> {
    v.iter()
        .zip(neighbors)
        .map(|(&x, nb)| {
            let m = nb.iter().map(|&j| v[j]).sum::<f64>() / nb.len().max(1) as f64;
            0.5 * x + 0.5 * m
        })
        .collect()
}

/// Points in a square of side `2.5·√N` km joined by their Euclidean minimum spanning
/// tree plus every pair closer than 1.2× the mean tree edge.
fn geometric_graph(n: usize, rng: &mut ChaCha8Rng) -> Result<RoadGraph, PipelineError> {
    let side = 2.5 * (n as f64).sqrt();
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..side), rng.gen_range(0.0..side))).collect();
    let dist = |i: usize, j: usize| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();

    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    let mut tree = Vec::with_capacity(n - 1);
    in_tree[0] = true;
    for j in 1..n {
        best[j] = (dist(0, j), 0);
    }
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0))
            .expect("a node remains outside the tree");
        in_tree[next] = true;
        tree.push((best[next].1, next));
        for j in 0..n {
            if !in_tree[j] && dist(next, j) < best[j].0 {
                best[j] = (dist(next, j), next);
            }
        }
    }
    let mean_edge = tree.iter().map(|&(a, b)| dist(a, b)).sum::<f64>() / tree.len() as f64;
    let mut edges: Vec<Edge> = tree.iter().map(|&(a, b)| Edge::new(a.min(b), a.max(b), Some(dist(a, b)))).collect();
    for i in 0..n {
        for j in i + 1..n {
            let is_tree = tree.iter().any(|&(a, b)| (a.min(b), a.max(b)) == (i, j));
            if !is_tree && dist(i, j) < 1.2 * mean_edge {
                edges.push(Edge::new(i, j, Some(dist(i, j))));
            }
        }
    }
    Ok(RoadGraph::new(n, &edges, None)?)
}
