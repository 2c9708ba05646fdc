//! Heterogeneous graph samples stored as node-link JSON.
//!
//! One graph per file:
//!
//! ```json
//! {"nodes": [{"id": "l0", "entity": "link", "features": {"capacity": 10.0}}],
//!  "links": [{"source": "l0", "target": "p0", "position": 0}],
//!  "labels": {"delay": {"p0": 0.25}}}
//! ```
//!
//! `edges` is accepted as a synonym for `links`, and the `directed`,
//! `multigraph` and `graph` keys written by graph libraries are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::schema::{AggregationKind, ModelDescription};
use crate::tensor::Tensor;
use crate::validator::{DatasetSchema, LabelLevel, LabelSchema};

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl FeatureValue {
    pub fn arity(&self) -> usize {
        match self {
            FeatureValue::Scalar(_) => 1,
            FeatureValue::Vector(v) => v.len(),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            FeatureValue::Scalar(x) => std::slice::from_ref(x),
            FeatureValue::Vector(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub entity: String,
    pub features: BTreeMap<String, FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    PerNode(BTreeMap<String, f64>),
    Global(f64),
}

/// One input sample. Node ids are unique, edge endpoints exist and
/// positions are distinct within each (target, source entity) group.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    labels: BTreeMap<String, Label>,
}

fn fault(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Graph {
        path: path.into(),
        message: message.into(),
    }
}

impl HeterogeneousGraph {
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>, labels: BTreeMap<String, Label>) -> Result<Self> {
        let mut entity_of: HashMap<&str, &str> = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.entity.is_empty() {
                return Err(fault(format!("nodes[{i}].entity"), "empty entity name"));
            }
            if entity_of.insert(&n.id, &n.entity).is_some() {
                return Err(fault(format!("nodes[{i}].id"), format!("duplicate node id '{}'", n.id)));
            }
            for (name, value) in &n.features {
                if value.values().iter().any(|v| !v.is_finite()) {
                    return Err(fault(format!("nodes[{i}].features.{name}"), "non-finite feature value"));
                }
            }
        }
        let mut positions: HashMap<(&str, &str, usize), usize> = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            for (end, id) in [("source", &e.source), ("target", &e.target)] {
                if !entity_of.contains_key(id.as_str()) {
                    return Err(fault(format!("edges[{i}].{end}"), format!("unknown node id '{id}'")));
                }
            }
            if let Some(p) = e.position {
                let group = (e.target.as_str(), entity_of[e.source.as_str()], p);
                if let Some(prev) = positions.insert(group, i) {
                    return Err(fault(
                        format!("edges[{i}].position"),
                        format!("duplicate position {p} into node '{}' (also at edges[{prev}])", e.target),
                    ));
                }
            }
        }
        for (name, label) in &labels {
            match label {
                Label::Global(v) if !v.is_finite() => {
                    return Err(fault(format!("labels.{name}"), "non-finite label value"));
                }
                Label::PerNode(map) => {
                    for (id, v) in map {
                        if !entity_of.contains_key(id.as_str()) {
                            return Err(fault(format!("labels.{name}.{id}"), format!("unknown node id '{id}'")));
                        }
                        if !v.is_finite() {
                            return Err(fault(format!("labels.{name}.{id}"), "non-finite label value"));
                        }
                    }
                }
                Label::Global(_) => {}
            }
        }
        Ok(Self { nodes, edges, labels })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn labels(&self) -> &BTreeMap<String, Label> {
        &self.labels
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Node-link JSON with `links` as the edge key.
    pub fn to_json_value(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                let features: Map<String, Value> = n
                    .features
                    .iter()
                    .map(|(k, v)| {
                        let v = match v {
                            FeatureValue::Scalar(x) => json!(x),
                            FeatureValue::Vector(xs) => json!(xs),
                        };
                        (k.clone(), v)
                    })
                    .collect();
                json!({"id": n.id, "entity": n.entity, "features": features})
            })
            .collect();
        let links: Vec<Value> = self
            .edges
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert("source".into(), json!(e.source));
                m.insert("target".into(), json!(e.target));
                if let Some(p) = e.position {
                    m.insert("position".into(), json!(p));
                }
                Value::Object(m)
            })
            .collect();
        let labels: Map<String, Value> = self
            .labels
            .iter()
            .map(|(k, l)| {
                let v = match l {
                    Label::Global(x) => json!(x),
                    Label::PerNode(m) => json!(m),
                };
                (k.clone(), v)
            })
            .collect();
        json!({"directed": true, "multigraph": true, "graph": {}, "nodes": nodes, "links": links, "labels": labels})
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("graph serializes")
    }
}

fn number(v: &Value, path: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| fault(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(fault(path, "non-finite value"));
    }
    Ok(x)
}

fn node_id(v: &Value, path: &str) -> Result<String> {
    match v {
        Value::String(s) if !s.is_empty() => Ok(s.clone()),
        Value::Number(n) if n.is_i64() || n.is_u64() => Ok(n.to_string()),
        _ => Err(fault(path, "expected a node id (string or integer)")),
    }
}

/// Parses and validates one node-link JSON sample.
pub fn load_graph(json_text: &str) -> Result<HeterogeneousGraph> {
    let root: Value = serde_json::from_str(json_text).map_err(|e| fault("$", format!("invalid JSON: {e}")))?;
    let obj = root.as_object().ok_or_else(|| fault("$", "expected a JSON object"))?;

    let raw_nodes = obj
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| fault("nodes", "missing 'nodes' array"))?;
    let mut nodes = Vec::with_capacity(raw_nodes.len());
    for (i, n) in raw_nodes.iter().enumerate() {
        let p = format!("nodes[{i}]");
        let id = node_id(n.get("id").unwrap_or(&Value::Null), &format!("{p}.id"))?;
        let entity = n
            .get("entity")
            .and_then(Value::as_str)
            .ok_or_else(|| fault(format!("{p}.entity"), "missing entity name"))?
            .to_string();
        let mut features = BTreeMap::new();
        if let Some(fs) = n.get("features") {
            let fs = fs.as_object().ok_or_else(|| fault(format!("{p}.features"), "expected an object"))?;
            for (name, v) in fs {
                let fp = format!("{p}.features.{name}");
                let value = match v {
                    Value::Array(items) => FeatureValue::Vector(
                        items
                            .iter()
                            .enumerate()
                            .map(|(k, x)| number(x, &format!("{fp}[{k}]")))
                            .collect::<Result<_>>()?,
                    ),
                    other => FeatureValue::Scalar(number(other, &fp)?),
                };
                features.insert(name.clone(), value);
            }
        }
        nodes.push(GraphNode { id, entity, features });
    }

    let edge_key = if obj.contains_key("links") { "links" } else { "edges" };
    let raw_edges = match obj.get(edge_key) {
        Some(v) => v.as_array().ok_or_else(|| fault("edges", "expected an array"))?.as_slice(),
        None => &[],
    };
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (i, e) in raw_edges.iter().enumerate() {
        let p = format!("edges[{i}]");
        let source = node_id(e.get("source").unwrap_or(&Value::Null), &format!("{p}.source"))?;
        let target = node_id(e.get("target").unwrap_or(&Value::Null), &format!("{p}.target"))?;
        let position = match e.get("position") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_u64()
                    .ok_or_else(|| fault(format!("{p}.position"), "expected a non-negative integer"))?
                    as usize,
            ),
        };
        edges.push(GraphEdge { source, target, position });
    }

    let mut labels = BTreeMap::new();
    if let Some(ls) = obj.get("labels") {
        let ls = ls.as_object().ok_or_else(|| fault("labels", "expected an object"))?;
        for (name, v) in ls {
            let lp = format!("labels.{name}");
            let label = match v {
                Value::Object(m) => Label::PerNode(
                    m.iter()
                        .map(|(id, x)| Ok((id.clone(), number(x, &format!("{lp}.{id}"))?)))
                        .collect::<Result<_>>()?,
                ),
                other => Label::Global(number(other, &lp)?),
            };
            labels.insert(name.clone(), label);
        }
    }
    HeterogeneousGraph::new(nodes, edges, labels)
}

pub fn load_graph_file(path: &Path) -> Result<HeterogeneousGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_graph(&text).map_err(|e| e.in_sample(path.display().to_string()))
}

/// Row layout of a graph: nodes of each entity sorted by id.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    rows: BTreeMap<String, Vec<usize>>,
    row_of: Vec<usize>,
    by_id: HashMap<String, usize>,
}

impl GraphIndex {
    pub fn new(graph: &HeterogeneousGraph) -> Self {
        let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, n) in graph.nodes.iter().enumerate() {
            rows.entry(n.entity.clone()).or_default().push(i);
        }
        let mut row_of = vec![0; graph.nodes.len()];
        for members in rows.values_mut() {
            members.sort_by(|&a, &b| graph.nodes[a].id.cmp(&graph.nodes[b].id));
            for (r, &i) in members.iter().enumerate() {
                row_of[i] = r;
            }
        }
        let by_id = graph.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        Self { rows, row_of, by_id }
    }

    pub fn count(&self, entity: &str) -> usize {
        self.rows.get(entity).map_or(0, Vec::len)
    }

    /// Node indices of `entity` in row order.
    pub fn members(&self, entity: &str) -> &[usize] {
        self.rows.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn row(&self, node_index: usize) -> usize {
        self.row_of[node_index]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Ids of `entity`'s nodes in row order.
    pub fn ids<'g>(&self, graph: &'g HeterogeneousGraph, entity: &str) -> Vec<&'g str> {
        self.members(entity).iter().map(|&i| graph.nodes[i].id.as_str()).collect()
    }
}

/// Senders of one source entity for every destination row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceAdjacency {
    pub entity: String,
    /// Sender rows per destination row; ascending id, or by position for
    /// `ordered` aggregation.
    pub senders: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessagePassingAdjacency {
    pub destination: String,
    pub num_destinations: usize,
    /// Parallel to the stage message passing's sources.
    pub sources: Vec<SourceAdjacency>,
    /// For `ordered` aggregation: `(source slot, sender row)` per destination
    /// row, sorted by position then source slot.
    pub sequences: Option<Vec<Vec<(usize, usize)>>>,
}

/// Adjacency for every stage message passing of a model, indexed
/// `[stage][message passing]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedAdjacency {
    pub stages: Vec<Vec<MessagePassingAdjacency>>,
}

pub fn build_staged_adjacency(graph: &HeterogeneousGraph, model: &ModelDescription) -> Result<StagedAdjacency> {
    build_staged_adjacency_indexed(graph, model, &GraphIndex::new(graph))
}

pub fn build_staged_adjacency_indexed(
    graph: &HeterogeneousGraph,
    model: &ModelDescription,
    index: &GraphIndex,
) -> Result<StagedAdjacency> {
    // (source entity, target entity) -> edges
    let mut by_kind: HashMap<(&str, &str), Vec<&GraphEdge>> = HashMap::new();
    for e in &graph.edges {
        let s = &graph.nodes[index.by_id[&e.source]].entity;
        let t = &graph.nodes[index.by_id[&e.target]].entity;
        by_kind.entry((s.as_str(), t.as_str())).or_default().push(e);
    }

    let mut stages = Vec::with_capacity(model.message_passing.stages.len());
    for stage in &model.message_passing.stages {
        let mut mps = Vec::with_capacity(stage.message_passings.len());
        for mp in &stage.message_passings {
            let dest = mp.destination_entity.as_str();
            let n = index.count(dest);
            let ordered = mp.aggregation == AggregationKind::Ordered;
            let mut sources = Vec::with_capacity(mp.sources.len());
            let mut sequences: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
            for (slot, src) in mp.sources.iter().enumerate() {
                let mut per_dest: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
                for e in by_kind.get(&(src.name.as_str(), dest)).map_or(&[][..], Vec::as_slice) {
                    let d = index.row(index.by_id[&e.target]);
                    let s = index.row(index.by_id[&e.source]);
                    let key = if ordered {
                        e.position.ok_or_else(|| {
                            Error::Runtime(format!(
                                "ordered aggregation into {dest} node '{}': edge from '{}' has no position",
                                e.target, e.source
                            ))
                        })?
                    } else {
                        s
                    };
                    per_dest[d].push((key, s));
                    if ordered {
                        sequences[d].push((key, slot, s));
                    }
                }
                let senders = per_dest
                    .into_iter()
                    .map(|mut v| {
                        v.sort_unstable();
                        v.into_iter().map(|(_, s)| s).collect()
                    })
                    .collect();
                sources.push(SourceAdjacency { entity: src.name.clone(), senders });
            }
            let sequences = ordered.then(|| {
                sequences
                    .into_iter()
                    .map(|mut seq| {
                        seq.sort_unstable();
                        seq.into_iter().map(|(_, slot, s)| (slot, s)).collect()
                    })
                    .collect()
            });
            mps.push(MessagePassingAdjacency {
                destination: dest.to_string(),
                num_destinations: n,
                sources,
                sequences,
            });
        }
        stages.push(mps);
    }
    Ok(StagedAdjacency { stages })
}

/// Hidden states per entity.
pub type StateMap = BTreeMap<String, Tensor>;

/// Initial hidden states: the listed features concatenated in declaration
/// order and zero-padded to the state dimension, one row per node.
pub fn initial_states(graph: &HeterogeneousGraph, model: &ModelDescription) -> Result<StateMap> {
    initial_states_indexed(graph, model, &GraphIndex::new(graph))
}

pub fn initial_states_indexed(
    graph: &HeterogeneousGraph,
    model: &ModelDescription,
    index: &GraphIndex,
) -> Result<StateMap> {
    let mut states = StateMap::new();
    for e in &model.entities {
        let members = index.members(&e.name);
        let dim = e.state_dimension;
        let mut data = vec![0.0; members.len() * dim];
        for (r, &i) in members.iter().enumerate() {
            let node = &graph.nodes[i];
            let row = &mut data[r * dim..(r + 1) * dim];
            let mut at = 0;
            for f in e.input_features() {
                let value = node
                    .features
                    .get(f)
                    .ok_or_else(|| Error::Runtime(format!("node '{}' lacks feature '{f}'", node.id)))?;
                let vals = value.values();
                if at + vals.len() > dim {
                    return Err(Error::Runtime(format!(
                        "features of node '{}' overflow state_dimension {dim}",
                        node.id
                    )));
                }
                row[at..at + vals.len()].copy_from_slice(vals);
                at += vals.len();
            }
        }
        states.insert(e.name.clone(), Tensor::new(vec![members.len(), dim], data)?);
    }
    Ok(states)
}

/// Sample files of a split directory in ascending file-name order;
/// `manifest.json` is skipped.
pub fn list_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_sample = path.is_file()
            && path.extension().is_some_and(|x| x == "json")
            && path.file_name().is_some_and(|n| n != "manifest.json");
        if is_sample {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, HeterogeneousGraph)>> {
    let files = list_samples(dir)?;
    files
        .into_par_iter()
        .map(|p| load_graph_file(&p).map(|g| (p, g)))
        .collect()
}

/// Unions features, labels and edge kinds over every sample. A dataset root
/// with `train/` and `validation/` splits is scanned across both.
pub fn infer_schema(dir: &Path) -> Result<DatasetSchema> {
    let split_dirs: Vec<PathBuf> = ["train", "validation"].iter().map(|s| dir.join(s)).filter(|p| p.is_dir()).collect();
    let dirs = if split_dirs.is_empty() { vec![dir.to_path_buf()] } else { split_dirs };
    let mut samples = Vec::new();
    for d in &dirs {
        samples.extend(load_dir(d)?);
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no samples found in {}", dir.display())));
    }
    schema_of(&samples)
}

/// Schema of already loaded samples; paths only appear in error messages.
pub fn schema_of(samples: &[(PathBuf, HeterogeneousGraph)]) -> Result<DatasetSchema> {
    let mut schema = DatasetSchema::default();
    let mut first_seen: BTreeMap<(String, String), PathBuf> = BTreeMap::new();
    for (path, g) in samples {
        let file = || path.display().to_string();
        for n in &g.nodes {
            let feats = schema.entities.entry(n.entity.clone()).or_default();
            for (name, value) in &n.features {
                match feats.get(name) {
                    Some(&arity) if arity != value.arity() => {
                        let other = &first_seen[&(n.entity.clone(), name.clone())];
                        return Err(Error::Dataset(format!(
                            "feature '{name}' of entity '{}' has arity {arity} in {} but {} in {}",
                            n.entity,
                            other.display(),
                            value.arity(),
                            file()
                        )));
                    }
                    Some(_) => {}
                    None => {
                        feats.insert(name.clone(), value.arity());
                        first_seen.insert((n.entity.clone(), name.clone()), path.clone());
                    }
                }
            }
        }
        let entity_of: HashMap<&str, &str> = g.nodes.iter().map(|n| (n.id.as_str(), n.entity.as_str())).collect();
        for e in &g.edges {
            schema
                .edge_kinds
                .insert((entity_of[e.source.as_str()].to_string(), entity_of[e.target.as_str()].to_string()));
        }
        for (name, label) in &g.labels {
            let level = match label {
                Label::Global(_) => LabelLevel::Global,
                Label::PerNode(m) => {
                    let entities: BTreeSet<&str> = m.keys().map(|id| entity_of[id.as_str()]).collect();
                    if entities.len() > 1 {
                        return Err(Error::Dataset(format!(
                            "label '{name}' in {} spans entities {entities:?}",
                            file()
                        )));
                    }
                    match entities.into_iter().next() {
                        Some(e) => LabelLevel::PerNode { entity: e.to_string() },
                        None => continue,
                    }
                }
            };
            let ls = LabelSchema { level, arity: 1 };
            match schema.labels.get(name) {
                Some(prev) if *prev != ls => {
                    return Err(Error::Dataset(format!("label '{name}' changes level in {}", file())));
                }
                Some(_) => {}
                None => {
                    schema.labels.insert(name.clone(), ls);
                }
            }
        }
    }
    Ok(schema)
}
