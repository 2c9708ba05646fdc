use petgraph::algo::{astar, connected_components, dijkstra};
use petgraph::graph::{NodeIndex, UnGraph};
use petgraph::Graph;
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance for comparing path lengths built from two-decimal weights.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// An undirected weighted graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub n: usize,
    /// `(u, v, weight)` with `u < v`.
    pub edges: Vec<(usize, usize, f64)>,
}

pub(crate) fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

impl Topology {
    /// Erdős–Rényi graph with the given mean degree, redrawn until connected.
    pub fn random_connected(rng: &mut impl Rng, n: usize, avg_degree: f64, weight: (f64, f64)) -> Result<Self> {
        if n < 2 {
            return Err(Error::Generator(format!("need at least 2 nodes, got {n}")));
        }
        let p = (avg_degree / (n - 1) as f64).min(1.0);
        for _ in 0..10_000 {
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random_bool(p) {
                        let w = round_to(rng.random_range(weight.0..=weight.1), 2);
                        edges.push((u, v, w));
                    }
                }
            }
            let t = Topology { n, edges };
            if t.is_connected() {
                return Ok(t);
            }
        }
        Err(Error::Generator(format!("no connected graph on {n} nodes with mean degree {avg_degree}")))
    }

    fn graph(&self) -> UnGraph<(), f64> {
        let mut g = UnGraph::with_capacity(self.n, self.edges.len());
        let nodes: Vec<NodeIndex> = (0..self.n).map(|_| g.add_node(())).collect();
        for &(u, v, w) in &self.edges {
            g.add_edge(nodes[u], nodes[v], w);
        }
        g
    }

    pub fn is_connected(&self) -> bool {
        connected_components(&self.graph()) == 1
    }

    /// Weighted distances from `source` to every node.
    pub fn distances(&self, source: usize) -> Vec<f64> {
        let g = self.graph();
        let d = dijkstra(&g, NodeIndex::new(source), None, |e| *e.weight());
        (0..self.n)
            .map(|i| d.get(&NodeIndex::new(i)).copied().unwrap_or(f64::INFINITY))
            .collect()
    }

    /// Edges (by index) of the shortest `s`–`t` path when it is unique.
    pub fn unique_shortest_path(&self, s: usize, t: usize) -> Option<Vec<usize>> {
        let ds = self.distances(s);
        let dt = self.distances(t);
        let total = ds[t];
        // Count shortest paths over tight edges in order of distance from s.
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| ds[a].total_cmp(&ds[b]));
        let mut count = vec![0u64; self.n];
        count[s] = 1;
        for &u in &order {
            for &(a, b, w) in &self.edges {
                for (x, y) in [(a, b), (b, a)] {
                    if x == u && (ds[x] + w - ds[y]).abs() <= TIE_TOLERANCE && ds[y] > ds[x] {
                        count[y] = count[y].saturating_add(count[u]);
                    }
                }
            }
        }
        if count[t] != 1 {
            return None;
        }
        let on_path = self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, &(a, b, w))| {
                (ds[a] + w + dt[b] - total).abs() <= TIE_TOLERANCE || (ds[b] + w + dt[a] - total).abs() <= TIE_TOLERANCE
            })
            .map(|(i, _)| i)
            .collect();
        Some(on_path)
    }
}

/// Shortest route from `s` to `t` on a directed graph, as arc indices.
pub(crate) fn route(n: usize, arcs: &[(usize, usize, f64)], s: usize, t: usize) -> Option<Vec<usize>> {
    let mut g: Graph<(), (f64, usize)> = Graph::with_capacity(n, arcs.len());
    let nodes: Vec<NodeIndex> = (0..n).map(|_| g.add_node(())).collect();
    for (i, &(u, v, w)) in arcs.iter().enumerate() {
        g.add_edge(nodes[u], nodes[v], (w, i));
    }
    let (_, path) = astar(&g, nodes[s], |x| x == nodes[t], |e| e.weight().0, |_| 0.0)?;
    let mut out = Vec::with_capacity(path.len().saturating_sub(1));
    for hop in path.windows(2) {
        let best = g
            .edges_connecting(hop[0], hop[1])
            .min_by(|a, b| a.weight().0.total_cmp(&b.weight().0).then(a.weight().1.cmp(&b.weight().1)))?;
        out.push(best.weight().1);
    }
    Some(out)
}
