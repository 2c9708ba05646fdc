//! Shipped model descriptions and synthetic dataset generators with their
//! label oracles.

mod topology;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::dataset::{FeatureValue, GraphEdge, GraphNode, HeterogeneousGraph, Label};
use crate::error::{Error, Result};

pub use topology::{Topology, TIE_TOLERANCE};

pub const ROUTENET_YAML: &str = include_str!("../../models/routenet.yaml");
pub const GQNN_YAML: &str = include_str!("../../models/gqnn.yaml");
pub const SHORTEST_PATH_YAML: &str = include_str!("../../models/shortest_path.yaml");

/// `(file name, YAML text)` of every shipped model.
pub fn shipped_models() -> [(&'static str, &'static str); 3] {
    [
        ("routenet.yaml", ROUTENET_YAML),
        ("gqnn.yaml", GQNN_YAML),
        ("shortest_path.yaml", SHORTEST_PATH_YAML),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ShortestPath,
    Routenet,
    Gqnn,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ShortestPath => "shortest_path",
            Task::Routenet => "routenet",
            Task::Gqnn => "gqnn",
        }
    }

    pub fn model_yaml(self) -> &'static str {
        match self {
            Task::ShortestPath => SHORTEST_PATH_YAML,
            Task::Routenet => ROUTENET_YAML,
            Task::Gqnn => GQNN_YAML,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shortest_path" => Ok(Task::ShortestPath),
            "routenet" => Ok(Task::Routenet),
            "gqnn" => Ok(Task::Gqnn),
            other => Err(Error::Generator(format!(
                "unknown task '{other}' (expected shortest_path, routenet or gqnn)"
            ))),
        }
    }
}

/// Generator settings. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologyGenConfig {
    pub task: Task,
    pub count: usize,
    pub seed: u64,
    pub nodes: (usize, usize),
    /// Node range for the validation split; defaults to `nodes`.
    pub validation_nodes: Option<(usize, usize)>,
    pub avg_degree: f64,
    pub weight: (f64, f64),
    pub capacity: (f64, f64),
    pub traffic: (f64, f64),
    pub flows: (usize, usize),
    /// Largest admissible load/capacity ratio on any link.
    pub max_utilization: f64,
    pub train_fraction: f64,
}

impl TopologyGenConfig {
    pub fn new(task: Task) -> Self {
        let mut c = Self {
            task,
            count: 100,
            seed: 0,
            nodes: (5, 10),
            validation_nodes: None,
            avg_degree: 3.0,
            weight: (1.0, 10.0),
            capacity: (1.0, 2.0),
            traffic: (0.05, 0.5),
            flows: (4, 12),
            max_utilization: 0.9,
            train_fraction: 0.8,
        };
        if task == Task::Routenet {
            c.nodes = (5, 8);
        }
        c
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generator(m));
        for (name, (lo, hi)) in [("nodes", self.nodes), ("validation_nodes", self.validation_nodes.unwrap_or(self.nodes))] {
            if lo < 2 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] must satisfy 2 <= min <= max"));
            }
        }
        for (name, (lo, hi)) in [("weight", self.weight), ("capacity", self.capacity), ("traffic", self.traffic)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] must be positive and ordered"));
            }
        }
        if self.flows.0 < 1 || self.flows.0 > self.flows.1 {
            return bad(format!("flows range [{}, {}] must satisfy 1 <= min <= max", self.flows.0, self.flows.1));
        }
        if !(self.avg_degree > 0.0) {
            return bad(format!("avg_degree must be positive, got {}", self.avg_degree));
        }
        if !(self.max_utilization > 0.0 && self.max_utilization <= 1.0) {
            return bad(format!("max_utilization must lie in (0, 1], got {}", self.max_utilization));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        Ok(())
    }

    /// Number of samples in the train split.
    pub fn train_count(&self) -> usize {
        ((self.count as f64) * self.train_fraction).round() as usize
    }

    fn oracle(&self) -> &'static str {
        match self.task {
            Task::ShortestPath => "on_path = 1 iff the edge lies on the unique minimum-weight src-dst path (Dijkstra)",
            Task::Routenet => "delay(path) = sum over its links of 1 / (capacity - load), load = sum of traffic of traversing paths",
            Task::Gqnn => "on_path = 1 iff the interface's directed link lies on the unique minimum-weight src-dst path (Dijkstra)",
        }
    }
}

/// One sample of `config.task`; `split_nodes` is the node range to draw from.
pub fn generate_sample(config: &TopologyGenConfig, index: usize) -> Result<HeterogeneousGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ index as u64);
    let nodes = if index < config.train_count() {
        config.nodes
    } else {
        config.validation_nodes.unwrap_or(config.nodes)
    };
    match config.task {
        Task::ShortestPath => shortest_path_sample(&mut rng, config, nodes),
        Task::Routenet => routenet_sample(&mut rng, config, nodes),
        Task::Gqnn => gqnn_sample(&mut rng, config, nodes),
    }
}

/// Summary of a generator run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub train: usize,
    pub validation: usize,
}

/// Writes `train/` and `validation/` splits plus `manifest.json` under `out`.
/// Files depend only on the config, not on scheduling.
pub fn generate(config: &TopologyGenConfig, out: &Path) -> Result<GenSummary> {
    config.check()?;
    let train = config.train_count();
    for split in ["train", "validation"] {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    (0..config.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let g = generate_sample(config, i)?;
        let (split, k) = if i < train { ("train", i) } else { ("validation", i - train) };
        let path = out.join(split).join(format!("sample_{k:05}.json"));
        std::fs::write(&path, g.to_json()).map_err(|e| Error::io(&path, e))
    })?;
    let manifest = json!({
        "task": config.task,
        "config": config,
        "oracle": config.oracle(),
        "train": train,
        "validation": config.count - train,
    });
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(GenSummary {
        train,
        validation: config.count - train,
    })
}

fn scalar(name: &str, v: f64) -> BTreeMap<String, FeatureValue> {
    [(name.to_string(), FeatureValue::Scalar(v))].into()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Topology plus an endpoint pair with a unique shortest path.
fn routed_topology(
    rng: &mut ChaCha8Rng,
    config: &TopologyGenConfig,
    nodes: (usize, usize),
) -> Result<(Topology, usize, usize, Vec<usize>)> {
    for _ in 0..1000 {
        let n = rng.random_range(nodes.0..=nodes.1);
        let topo = Topology::random_connected(rng, n, config.avg_degree, config.weight)?;
        for _ in 0..50 {
            let s = rng.random_range(0..n);
            let t = rng.random_range(0..n - 1);
            let t = if t >= s { t + 1 } else { t };
            if let Some(path) = topo.unique_shortest_path(s, t) {
                return Ok((topo, s, t, path));
            }
        }
    }
    Err(Error::Generator("no endpoint pair with a unique shortest path".into()))
}

fn shortest_path_sample(
    rng: &mut ChaCha8Rng,
    config: &TopologyGenConfig,
    nodes: (usize, usize),
) -> Result<HeterogeneousGraph> {
    let (topo, s, t, path) = routed_topology(rng, config, nodes)?;
    let mut graph_nodes: Vec<GraphNode> = (0..topo.n)
        .map(|u| GraphNode {
            id: format!("n{u}"),
            entity: "node".into(),
            features: [
                ("src".to_string(), FeatureValue::Scalar(flag(u == s))),
                ("dst".to_string(), FeatureValue::Scalar(flag(u == t))),
            ]
            .into(),
        })
        .collect();
    let mut edges = Vec::with_capacity(topo.edges.len() * 4);
    let mut labels = BTreeMap::new();
    for (k, &(u, v, w)) in topo.edges.iter().enumerate() {
        let id = format!("e{k}");
        graph_nodes.push(GraphNode {
            id: id.clone(),
            entity: "edge".into(),
            features: scalar("weight", w),
        });
        for x in [u, v] {
            let n = format!("n{x}");
            edges.push(GraphEdge { source: n.clone(), target: id.clone(), position: None });
            edges.push(GraphEdge { source: id.clone(), target: n, position: None });
        }
        labels.insert(id, flag(path.contains(&k)));
    }
    HeterogeneousGraph::new(graph_nodes, edges, [("on_path".to_string(), Label::PerNode(labels))].into())
}

fn gqnn_sample(rng: &mut ChaCha8Rng, config: &TopologyGenConfig, nodes: (usize, usize)) -> Result<HeterogeneousGraph> {
    let (topo, s, t, _) = routed_topology(rng, config, nodes)?;
    let ds = topo.distances(s);
    let dt = topo.distances(t);
    let total = ds[t];
    let mut graph_nodes: Vec<GraphNode> = (0..topo.n)
        .map(|u| GraphNode {
            id: format!("r{u}"),
            entity: "router".into(),
            features: [
                ("src".to_string(), FeatureValue::Scalar(flag(u == s))),
                ("dst".to_string(), FeatureValue::Scalar(flag(u == t))),
            ]
            .into(),
        })
        .collect();
    let mut edges = Vec::new();
    let mut labels = BTreeMap::new();
    let mut k = 0;
    for &(a, b, w) in &topo.edges {
        for (u, v) in [(a, b), (b, a)] {
            let id = format!("i{k}");
            k += 1;
            graph_nodes.push(GraphNode {
                id: id.clone(),
                entity: "interface".into(),
                features: scalar("weight", w),
            });
            let (owner, remote) = (format!("r{u}"), format!("r{v}"));
            edges.push(GraphEdge { source: owner.clone(), target: id.clone(), position: Some(0) });
            edges.push(GraphEdge { source: remote, target: id.clone(), position: Some(1) });
            edges.push(GraphEdge { source: id.clone(), target: owner, position: None });
            let used = (ds[u] + w + dt[v] - total).abs() <= TIE_TOLERANCE;
            labels.insert(id, flag(used));
        }
    }
    HeterogeneousGraph::new(graph_nodes, edges, [("on_path".to_string(), Label::PerNode(labels))].into())
}

fn routenet_sample(rng: &mut ChaCha8Rng, config: &TopologyGenConfig, nodes: (usize, usize)) -> Result<HeterogeneousGraph> {
    let n = rng.random_range(nodes.0..=nodes.1);
    let topo = Topology::random_connected(rng, n, config.avg_degree, config.weight)?;
    // One link per direction of every undirected edge.
    let mut arcs = Vec::with_capacity(topo.edges.len() * 2);
    for &(u, v, w) in &topo.edges {
        arcs.push((u, v, w));
        arcs.push((v, u, w));
    }
    let capacity: Vec<f64> = arcs
        .iter()
        .map(|_| topology::round_to(rng.random_range(config.capacity.0..=config.capacity.1), 2))
        .collect();
    let mut drawn = None;
    for _ in 0..1000 {
        let flows = rng.random_range(config.flows.0..=config.flows.1);
        let mut routes = Vec::with_capacity(flows);
        for _ in 0..flows {
            let s = rng.random_range(0..n);
            let t = rng.random_range(0..n - 1);
            let t = if t >= s { t + 1 } else { t };
            let r = topology::route(n, &arcs, s, t).ok_or_else(|| Error::Generator("disconnected topology".into()))?;
            routes.push(r);
        }
        let traffic: Vec<f64> = (0..flows)
            .map(|_| topology::round_to(rng.random_range(config.traffic.0..=config.traffic.1), 3))
            .collect();
        let loads = link_loads(arcs.len(), &routes, &traffic);
        if loads.iter().zip(&capacity).all(|(l, c)| *l < config.max_utilization * c) {
            drawn = Some((routes, traffic));
            break;
        }
    }
    let Some((routes, traffic)) = drawn else {
        return Err(Error::Generator(format!(
            "link loads stay above {} of capacity after 1000 traffic draws",
            config.max_utilization
        )));
    };
    let flows = routes.len();

    let mut graph_nodes = Vec::with_capacity(arcs.len() + flows);
    for (i, c) in capacity.iter().enumerate() {
        graph_nodes.push(GraphNode {
            id: format!("l{i}"),
            entity: "link".into(),
            features: scalar("capacity", *c),
        });
    }
    let delays = route_delays(&routes, &traffic, &capacity);
    let mut edges = Vec::new();
    let mut labels = BTreeMap::new();
    for (p, route) in routes.iter().enumerate() {
        let id = format!("p{p}");
        graph_nodes.push(GraphNode {
            id: id.clone(),
            entity: "path".into(),
            features: scalar("traffic", traffic[p]),
        });
        for (hop, &l) in route.iter().enumerate() {
            let link = format!("l{l}");
            edges.push(GraphEdge { source: link.clone(), target: id.clone(), position: Some(hop) });
            edges.push(GraphEdge { source: id.clone(), target: link, position: None });
        }
        labels.insert(id, delays[p]);
    }
    HeterogeneousGraph::new(graph_nodes, edges, [("delay".to_string(), Label::PerNode(labels))].into())
}

fn link_loads(links: usize, routes: &[Vec<usize>], traffic: &[f64]) -> Vec<f64> {
    let mut loads = vec![0.0; links];
    for (r, &x) in routes.iter().zip(traffic) {
        for &l in r {
            loads[l] += x;
        }
    }
    loads
}

/// Sum over each route's links of `1 / (capacity − load)`.
pub fn route_delays(routes: &[Vec<usize>], traffic: &[f64], capacity: &[f64]) -> Vec<f64> {
    let loads = link_loads(capacity.len(), routes, traffic);
    routes
        .iter()
        .map(|r| r.iter().map(|&l| 1.0 / (capacity[l] - loads[l])).sum())
        .collect()
}

fn feature(node: &GraphNode, name: &str) -> Result<f64> {
    match node.features.get(name) {
        Some(FeatureValue::Scalar(x)) => Ok(*x),
        _ => Err(Error::Generator(format!("node '{}' lacks scalar feature '{name}'", node.id))),
    }
}

/// Recomputes RouteNet delay labels from a sample's own features and
/// link–path edges.
pub fn routenet_oracle(graph: &HeterogeneousGraph) -> Result<BTreeMap<String, f64>> {
    let mut capacity = BTreeMap::new();
    let mut traffic = BTreeMap::new();
    for n in graph.nodes() {
        match n.entity.as_str() {
            "link" => capacity.insert(n.id.as_str(), feature(n, "capacity")?),
            "path" => traffic.insert(n.id.as_str(), feature(n, "traffic")?),
            _ => None,
        };
    }
    let mut hops: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    let mut load: BTreeMap<&str, f64> = BTreeMap::new();
    for e in graph.edges() {
        if let (Some(_), Some(x)) = (capacity.get(e.source.as_str()), traffic.get(e.target.as_str())) {
            hops.entry(&e.target).or_default().push((e.position.unwrap_or(0), &e.source));
            *load.entry(&e.source).or_default() += x;
        }
    }
    Ok(traffic
        .keys()
        .map(|p| {
            let d = hops
                .get(p)
                .map_or(0.0, |ls| ls.iter().map(|(_, l)| 1.0 / (capacity[l] - load[l])).sum());
            (p.to_string(), d)
        })
        .collect())
}
